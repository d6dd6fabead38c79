//! Bundled synthetic world: a visual lexicon of confusable entity pairs, the
//! mock LLM's knowledge tables, and a deterministic corpus generator.
//!
//! Each item is a bag of visual attribute tokens (scene plus three
//! entity-specific attributes). Captions name the entity and the scene, so a
//! caption shares only its scene token with the item it describes and is
//! equally close to every other entity photographed in that scene. Visual
//! descriptions carry the attribute tokens, which is what lets a rewritten
//! query single out the right item.

use crate::encoder::CorpusItem;

/// Visual facet an attribute belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Facet {
    Color,
    Shape,
    Parts,
    Material,
    Texture,
    Pattern,
}

impl Facet {
    /// Description phrase for an attribute word of this facet.
    pub fn describe(self, word: &str) -> String {
        match self {
            Facet::Color => format!("has a {word} color"),
            Facet::Shape => format!("has a {word} shape"),
            Facet::Parts => format!("has {word} parts"),
            Facet::Material => format!("has {word} material"),
            Facet::Texture => format!("has a {word} texture"),
            Facet::Pattern => format!("has a {word} pattern"),
        }
    }
}

use Facet::*;

pub type Attr = (&'static str, Facet);

/// A visually confusable pair and the split it belongs to.
pub struct EntityPair {
    pub a: (&'static str, [Attr; 3]),
    pub b: (&'static str, [Attr; 3]),
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

macro_rules! pair {
    ($split:ident, $a:literal [$($aw:literal $af:ident),+], $b:literal [$($bw:literal $bf:ident),+]) => {
        EntityPair {
            a: ($a, [$(($aw, $af)),+]),
            b: ($b, [$(($bw, $bf)),+]),
            split: Split::$split,
        }
    };
}

pub const PAIRS: &[EntityPair] = &[
    pair!(Train, "tent" ["khaki" Color, "triangular" Shape, "guylines" Parts],
                 "village" ["thatched" Material, "huts" Parts, "clustered" Shape]),
    pair!(Train, "canoe" ["birchbark" Material, "gunwales" Parts, "tapered" Shape],
                 "kayak" ["cockpit" Parts, "sleek" Shape, "fiberglass" Material]),
    pair!(Train, "wolf" ["grizzled" Color, "rangy" Shape, "muzzle" Parts],
                 "husky" ["piebald" Color, "harness" Parts, "stocky" Shape]),
    pair!(Train, "lemon" ["yellow" Color, "dimpled" Texture, "pointed" Shape],
                 "lime" ["emerald" Color, "glossy" Texture, "spherical" Shape]),
    pair!(Train, "pigeon" ["iridescent" Color, "plump" Shape, "cere" Parts],
                 "dove" ["ivory" Color, "slender" Shape, "wingtips" Parts]),
    pair!(Train, "cello" ["varnished" Material, "endpin" Parts, "hulking" Shape],
                 "violin" ["chinrest" Parts, "petite" Shape, "maple" Material]),
    pair!(Train, "bus" ["doubledecker" Shape, "windscreen" Parts, "crimson" Color],
                 "tram" ["pantograph" Parts, "articulated" Shape, "teal" Color]),
    pair!(Train, "mug" ["ceramic" Material, "handle" Parts, "cylindrical" Shape],
                 "teacup" ["porcelain" Material, "saucer" Parts, "floral" Pattern]),
    pair!(Train, "sofa" ["upholstered" Material, "cushions" Parts, "elongated" Shape],
                 "armchair" ["tufted" Material, "armrests" Parts, "wingback" Shape]),
    pair!(Train, "hawk" ["barred" Pattern, "hooked" Shape, "talons" Parts],
                 "vulture" ["featherless" Parts, "hunched" Shape, "sooty" Color]),
    pair!(Train, "pumpkin" ["orange" Color, "ribbed" Texture, "squat" Shape],
                 "melon" ["netted" Texture, "beige" Color, "oblong" Shape]),
    pair!(Train, "skateboard" ["griptape" Material, "trucks" Parts, "kicktail" Shape],
                 "scooter" ["handlebar" Parts, "footboard" Parts, "upright" Shape]),
    pair!(Test, "ferry" ["ramp" Parts, "boxy" Shape, "rusty" Color],
                "yacht" ["gleaming" Color, "streamlined" Shape, "flybridge" Parts]),
    pair!(Test, "horse" ["chestnut" Color, "mane" Parts, "muscular" Shape],
                "donkey" ["dun" Color, "longears" Parts, "shaggy" Texture]),
    pair!(Test, "cupcake" ["frosting" Parts, "sprinkles" Parts, "pastel" Color],
                "muffin" ["domed" Shape, "crumbly" Texture, "blueberries" Parts]),
    pair!(Test, "lighthouse" ["striped" Pattern, "lantern" Parts, "towering" Shape],
                "windmill" ["sails" Parts, "wooden" Material, "octagonal" Shape]),
    pair!(Test, "crocodile" ["olive" Color, "scutes" Parts, "toothy" Shape],
                "alligator" ["blackish" Color, "broad" Shape, "leathery" Texture]),
    pair!(Test, "trumpet" ["brass" Material, "valves" Parts, "flared" Shape],
                "trombone" ["slide" Parts, "golden" Color, "looped" Shape]),
    pair!(Test, "leopard" ["rosettes" Pattern, "powerful" Shape, "tawny" Color],
                "cheetah" ["spots" Pattern, "tearlines" Parts, "lanky" Shape]),
    pair!(Test, "sailboat" ["mast" Parts, "canvas" Material, "heeling" Shape],
                "catamaran" ["twinhulls" Parts, "trampoline" Parts, "wide" Shape]),
    pair!(Test, "rabbit" ["fluffy" Texture, "cottontail" Parts, "compact" Shape],
                "hare" ["russet" Color, "hindlegs" Parts, "athletic" Shape]),
    pair!(Test, "castle" ["battlements" Parts, "moat" Parts, "fortified" Shape],
                "palace" ["gilded" Color, "colonnades" Parts, "symmetrical" Shape]),
    pair!(Test, "bicycle" ["pedals" Parts, "spokes" Parts, "lightweight" Shape],
                "motorcycle" ["exhaust" Parts, "chrome" Material, "heavy" Shape]),
    pair!(Test, "goose" ["greybrown" Color, "stout" Shape, "webbed" Parts],
                "swan" ["snowy" Color, "curved" Shape, "knob" Parts]),
];

/// Sense-specific attributes for ambiguous entities, keyed by
/// `(entity, sense_tag, gloss)`.
pub const AMBIGUOUS: &[(&str, &str, &str, [Attr; 3])] = &[
    ("bank", "financial institution", "a building where money is deposited and lent",
        [("columns", Parts), ("marble", Material), ("vault", Parts)]),
    ("bank", "riverbank", "the sloping land alongside a river",
        [("grassy", Texture), ("muddy", Color), ("sloping", Shape)]),
    ("bat", "animal", "a nocturnal flying mammal",
        [("membranous", Parts), ("furry", Texture), ("winged", Shape)]),
    ("bat", "sports equipment", "a club used to hit a ball",
        [("lacquered", Material), ("grip", Parts), ("tapering", Shape)]),
    ("mouse", "animal", "a small rodent",
        [("whiskers", Parts), ("tiny", Shape), ("brownish", Color)]),
    ("mouse", "computer device", "a handheld pointing device",
        [("scrollwheel", Parts), ("plastic", Material), ("ergonomic", Shape)]),
];

/// Visual nouns outside the confusable pairs that the mock still recognizes.
pub const EXTRA_VISUAL_NOUNS: &[&str] = &["man", "woman", "crowd", "whale", "school bus", "dog"];

/// Non-visual associations used by noisy descriptions and filler baselines.
pub const NON_VISUAL_FILLERS: &[&str] = &[
    "holidays",
    "tradition",
    "leisure",
    "history",
    "weekends",
    "memories",
    "commerce",
    "folklore",
];

pub const SCENES: &[&str] = &["river", "market", "hill", "beach", "park"];

const CAPTION_TEMPLATES: &[&str] = &[
    "a {e} near the {s}",
    "the {e} by the {s}",
    "a photo of a {e} at the {s}",
    "an old {e} beside the {s}",
    "one {e} close to the {s}",
];

/// Lexicon entry for a single entity (or entity sense).
#[derive(Debug, Clone)]
pub struct LexiconEntry {
    pub attrs: Vec<Attr>,
    pub partner: Option<&'static str>,
}

/// Attributes and confusable partner of an untagged entity, if known.
pub fn entity_entry(entity: &str) -> Option<LexiconEntry> {
    for p in PAIRS {
        if p.a.0 == entity {
            return Some(LexiconEntry {
                attrs: p.a.1.to_vec(),
                partner: Some(p.b.0),
            });
        }
        if p.b.0 == entity {
            return Some(LexiconEntry {
                attrs: p.b.1.to_vec(),
                partner: Some(p.a.0),
            });
        }
    }
    None
}

/// Attributes of a specific sense of an ambiguous entity.
pub fn sense_entry(entity: &str, tag: &str) -> Option<LexiconEntry> {
    AMBIGUOUS
        .iter()
        .find(|(e, t, _, _)| *e == entity && *t == tag)
        .map(|(e, t, _, attrs)| LexiconEntry {
            attrs: attrs.to_vec(),
            partner: AMBIGUOUS
                .iter()
                .find(|(e2, t2, _, _)| e2 == e && t2 != t)
                .map(|(e2, _, _, _)| *e2),
        })
}

/// Senses and glosses of an ambiguous entity; empty when unambiguous.
pub fn senses_of(entity: &str) -> Vec<(&'static str, &'static str)> {
    AMBIGUOUS
        .iter()
        .filter(|(e, _, _, _)| *e == entity)
        .map(|(_, t, g, _)| (*t, *g))
        .collect()
}

/// Every noun the mock extractor treats as visual.
pub fn visual_nouns() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = PAIRS.iter().flat_map(|p| [p.a.0, p.b.0]).collect();
    v.extend(EXTRA_VISUAL_NOUNS);
    let mut ambiguous: Vec<&'static str> = AMBIGUOUS.iter().map(|(e, _, _, _)| *e).collect();
    ambiguous.dedup();
    v.extend(ambiguous);
    v
}

/// Builds the corpus for one split: every entity of every pair in `split`,
/// photographed in every scene. Both members of a pair share the caption
/// template for a given scene.
pub fn corpus(split: Split) -> Vec<CorpusItem> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut items = Vec::new();
    for (pi, pair) in PAIRS.iter().filter(|p| p.split == split).enumerate() {
        for (si, scene) in SCENES.iter().enumerate() {
            let template = CAPTION_TEMPLATES[(pi + si) % CAPTION_TEMPLATES.len()];
            for (name, attrs) in [&pair.a, &pair.b] {
                let caption = template.replace("{e}", name).replace("{s}", scene);
                let mut attributes = vec![scene.to_string()];
                attributes.extend(attrs.iter().map(|(w, _)| w.to_string()));
                items.push(CorpusItem {
                    id: format!("{prefix}-{name}-{scene}"),
                    caption,
                    attributes,
                });
            }
        }
    }
    items
}
