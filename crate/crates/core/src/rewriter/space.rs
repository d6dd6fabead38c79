//! Constrained rewrite action space and the deterministic renderer.
//!
//! Each linked entity in a query is a slot. A slot either stays untouched
//! (`Skip`) or receives one description of one of its senses, spliced in
//! right after the entity with one of the connective templates.

use serde::{Deserialize, Serialize};

use super::RewriteError;
use crate::kb::{EntityMatch, EvdKnowledgeBase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Appositive,
    Relative,
    Parenthetical,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Appositive, Template::Relative, Template::Parenthetical];

    pub fn name(self) -> &'static str {
        match self {
            Template::Appositive => "appositive",
            Template::Relative => "relative",
            Template::Parenthetical => "parenthetical",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Text inserted directly after the entity surface form.
    pub fn insertion(self, description: &str) -> String {
        let d = description.trim();
        match self {
            Template::Appositive => format!(", which {d},"),
            Template::Relative => format!(" with {}", noun_phrase(d)),
            Template::Parenthetical => format!(" ({d})"),
        }
    }
}

/// Drops a leading verb so `"has a khaki color"` reads `"a khaki color"`.
fn noun_phrase(desc: &str) -> &str {
    for verb in ["has ", "have ", "is ", "are ", "with "] {
        if let Some(rest) = desc.strip_prefix(verb) {
            if !rest.trim().is_empty() {
                return rest.trim_start();
            }
        }
    }
    desc
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Skip,
    Insert {
        desc_index: usize,
        template: Template,
        sense_tag: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RewriteAction {
    pub slot: usize,
    pub choice: Choice,
}

impl RewriteAction {
    pub fn skip(slot: usize) -> Self {
        Self {
            slot,
            choice: Choice::Skip,
        }
    }
}

/// A rewrite of a query: one action per slot and the rendered text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteCandidate {
    pub actions: Vec<RewriteAction>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseOption {
    pub sense_tag: Option<String>,
    pub descriptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub matched: EntityMatch,
    /// Surface form as written in the query.
    pub surface: String,
    pub senses: Vec<SenseOption>,
    /// Legal choices; index 0 is always `Skip`.
    pub choices: Vec<Choice>,
}

impl Slot {
    pub fn description(&self, choice: &Choice) -> Option<&str> {
        match choice {
            Choice::Skip => None,
            Choice::Insert {
                desc_index,
                sense_tag,
                ..
            } => self
                .senses
                .iter()
                .find(|s| &s.sense_tag == sense_tag)
                .and_then(|s| s.descriptions.get(*desc_index))
                .map(String::as_str),
        }
    }

    pub fn choice_index(&self, choice: &Choice) -> Option<usize> {
        self.choices.iter().position(|c| c == choice)
    }
}

/// Per-slot legal choices for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    pub query: String,
    pub slots: Vec<Slot>,
}

/// Enumerates, for each entity match, `Skip` followed by every
/// (sense, description, template) combination in KB order.
pub fn action_space(query: &str, kb: &EvdKnowledgeBase, templates: &[Template]) -> ActionSpace {
    let slots = kb
        .link_entities(query)
        .into_iter()
        .map(|m| {
            let senses = kb
                .lookup(&m.entity, None)
                .into_iter()
                .map(|e| SenseOption {
                    sense_tag: e.sense.sense_tag.clone(),
                    descriptions: e.descriptions.clone(),
                })
                .collect();
            Slot::new(query, m, senses, templates)
        })
        .collect();
    ActionSpace {
        query: query.to_string(),
        slots,
    }
}

impl Slot {
    /// Builds a slot and enumerates its legal choices.
    pub fn new(query: &str, matched: EntityMatch, senses: Vec<SenseOption>, templates: &[Template]) -> Self {
        let mut choices = vec![Choice::Skip];
        for s in &senses {
            for desc_index in 0..s.descriptions.len() {
                for &template in templates {
                    choices.push(Choice::Insert {
                        desc_index,
                        template,
                        sense_tag: s.sense_tag.clone(),
                    });
                }
            }
        }
        Slot {
            surface: query[matched.start..matched.end].to_string(),
            matched,
            senses,
            choices,
        }
    }
}

impl ActionSpace {
    pub fn identity_actions(&self) -> Vec<RewriteAction> {
        (0..self.slots.len()).map(RewriteAction::skip).collect()
    }

    /// Checks that `actions` holds exactly one legal action per slot, in
    /// slot order, and returns the chosen index for each slot.
    pub fn choice_indices(&self, actions: &[RewriteAction]) -> Result<Vec<usize>, RewriteError> {
        if actions.len() != self.slots.len() {
            return Err(RewriteError::IllegalAction(format!(
                "{} actions for {} slots",
                actions.len(),
                self.slots.len()
            )));
        }
        actions
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if a.slot != i {
                    return Err(RewriteError::IllegalAction(format!(
                        "action for slot {} at position {i}",
                        a.slot
                    )));
                }
                self.slots[i].choice_index(&a.choice).ok_or_else(|| {
                    RewriteError::IllegalAction(format!("{:?} not legal in slot {i}", a.choice))
                })
            })
            .collect()
    }

    /// Splices the chosen descriptions into the query. All-`Skip` returns
    /// the query unchanged.
    pub fn render(&self, actions: &[RewriteAction]) -> Result<String, RewriteError> {
        self.choice_indices(actions)?;
        let mut out = String::with_capacity(self.query.len() + 64);
        let mut cursor = 0;
        for (slot, action) in self.slots.iter().zip(actions) {
            out.push_str(&self.query[cursor..slot.matched.end]);
            cursor = slot.matched.end;
            if let Choice::Insert { template, .. } = &action.choice {
                let desc = slot
                    .description(&action.choice)
                    .expect("legal choice has a description");
                out.push_str(&template.insertion(desc));
            }
        }
        out.push_str(&self.query[cursor..]);
        Ok(out)
    }

    pub fn candidate(&self, actions: Vec<RewriteAction>) -> Result<RewriteCandidate, RewriteError> {
        let text = self.render(&actions)?;
        Ok(RewriteCandidate {
            actions,
            text,
            score: None,
            logprob: None,
        })
    }

    /// Recovers the action sequence that renders exactly to `text`, if any.
    ///
    /// Walks the query segments in order; after each entity it tries every
    /// legal insertion, longest first, backtracking when the following
    /// query segment does not line up.
    pub fn infer_actions(&self, text: &str) -> Option<Vec<RewriteAction>> {
        let mut insertions: Vec<Vec<(usize, String)>> = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let mut opts: Vec<(usize, String)> = slot
                .choices
                .iter()
                .enumerate()
                .map(|(ci, c)| {
                    let ins = match c {
                        Choice::Skip => String::new(),
                        Choice::Insert { template, .. } => {
                            template.insertion(slot.description(c).expect("legal"))
                        }
                    };
                    (ci, ins)
                })
                .collect();
            opts.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
            insertions.push(opts);
        }
        let mut chosen = Vec::with_capacity(self.slots.len());
        if self.align(text, 0, 0, 0, &insertions, &mut chosen) {
            Some(
                chosen
                    .into_iter()
                    .enumerate()
                    .map(|(slot, ci)| RewriteAction {
                        slot,
                        choice: self.slots[slot].choices[ci].clone(),
                    })
                    .collect(),
            )
        } else {
            None
        }
    }

    fn align(
        &self,
        text: &str,
        pos: usize,
        query_cursor: usize,
        slot: usize,
        insertions: &[Vec<(usize, String)>],
        chosen: &mut Vec<usize>,
    ) -> bool {
        let seg_end = self
            .slots
            .get(slot)
            .map_or(self.query.len(), |s| s.matched.end);
        let segment = &self.query[query_cursor..seg_end];
        let Some(rest) = text.get(pos..) else {
            return false;
        };
        if !rest.starts_with(segment) {
            return false;
        }
        let pos = pos + segment.len();
        if slot == self.slots.len() {
            return pos == text.len();
        }
        for (ci, ins) in &insertions[slot] {
            if text[pos..].starts_with(ins.as_str()) {
                chosen.push(*ci);
                if self.align(text, pos + ins.len(), seg_end, slot + 1, insertions, chosen) {
                    return true;
                }
                chosen.pop();
            }
        }
        false
    }

    /// Expands every inserted slot over all senses that have the chosen
    /// description index, yielding one parallel action sequence per
    /// combination. Slots of single-sense entities contribute one option.
    pub fn parallel_sense_variants(&self, actions: &[RewriteAction]) -> Vec<Vec<RewriteAction>> {
        let mut variants: Vec<Vec<RewriteAction>> = vec![Vec::new()];
        for (slot, action) in self.slots.iter().zip(actions) {
            let options: Vec<Choice> = match &action.choice {
                Choice::Skip => vec![Choice::Skip],
                Choice::Insert {
                    desc_index,
                    template,
                    ..
                } => {
                    let opts: Vec<Choice> = slot
                        .senses
                        .iter()
                        .filter(|s| *desc_index < s.descriptions.len())
                        .map(|s| Choice::Insert {
                            desc_index: *desc_index,
                            template: *template,
                            sense_tag: s.sense_tag.clone(),
                        })
                        .collect();
                    if opts.is_empty() {
                        vec![action.choice.clone()]
                    } else {
                        opts
                    }
                }
            };
            variants = variants
                .into_iter()
                .flat_map(|prefix| {
                    options.iter().map(move |c| {
                        let mut v = prefix.clone();
                        v.push(RewriteAction {
                            slot: action.slot,
                            choice: c.clone(),
                        });
                        v
                    })
                })
                .collect();
        }
        variants
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{EntitySense, EvdEntry, Source};
    use chrono::{TimeZone, Utc};

    fn kb(entries: &[(&str, Option<&str>, &[&str])]) -> EvdKnowledgeBase {
        let mut kb = EvdKnowledgeBase::default();
        for (e, tag, descs) in entries {
            kb = kb
                .insert(EvdEntry {
                    sense: EntitySense::new(e, *tag, Source::Llm),
                    descriptions: descs.iter().map(|s| s.to_string()).collect(),
                    created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
                })
                .unwrap();
        }
        kb
    }

    const FIVE: &[&str] = &["d0", "d1", "d2", "d3", "d4"];

    fn insert(slot: usize, desc_index: usize, template: Template) -> RewriteAction {
        RewriteAction {
            slot,
            choice: Choice::Insert {
                desc_index,
                template,
                sense_tag: None,
            },
        }
    }

    #[test]
    fn choice_counts() {
        let k = kb(&[("tent", None, FIVE), ("bank", Some("river"), FIVE), ("bank", Some("money"), FIVE)]);
        assert!(action_space("nothing", &k, &Template::ALL).slots.is_empty());
        assert_eq!(action_space("a tent", &k, &Template::ALL).slots[0].choices.len(), 16);
        assert_eq!(action_space("a bank", &k, &Template::ALL).slots[0].choices.len(), 31);
    }

    #[test]
    fn render_templates() {
        let k = kb(&[("camp of tents", None, &["rows of fabric shelters", "has a khaki color"])]);
        let s = action_space("a camp of tents", &k, &Template::ALL);
        assert_eq!(s.render(&s.identity_actions()).unwrap(), "a camp of tents");
        assert_eq!(
            s.render(&[insert(0, 0, Template::Parenthetical)]).unwrap(),
            "a camp of tents (rows of fabric shelters)"
        );
        assert_eq!(
            s.render(&[insert(0, 1, Template::Appositive)]).unwrap(),
            "a camp of tents, which has a khaki color,"
        );
        assert_eq!(
            s.render(&[insert(0, 1, Template::Relative)]).unwrap(),
            "a camp of tents with a khaki color"
        );
        assert!(matches!(
            s.render(&[insert(0, 7, Template::Relative)]),
            Err(RewriteError::IllegalAction(_))
        ));
    }

    #[test]
    fn two_slots_render_left_to_right() {
        let k = kb(&[("tent", None, &["has poles"]), ("village", None, &["has huts"])]);
        let s = action_space("A Tent near the village today", &k, &Template::ALL);
        let out = s
            .render(&[insert(0, 0, Template::Parenthetical), insert(1, 0, Template::Relative)])
            .unwrap();
        assert_eq!(out, "A Tent (has poles) near the village with huts today");

        let again = action_space(&out, &k, &Template::ALL);
        assert_eq!(again.render(&again.identity_actions()).unwrap(), out);
    }

    #[test]
    fn infer_recovers_actions() {
        let k = kb(&[("tent", None, FIVE), ("village", None, &["has huts", "has huts and fences"])]);
        let s = action_space("a tent near a village", &k, &Template::ALL);
        for a0 in &s.slots[0].choices {
            for a1 in &s.slots[1].choices {
                let acts = vec![
                    RewriteAction { slot: 0, choice: a0.clone() },
                    RewriteAction { slot: 1, choice: a1.clone() },
                ];
                let text = s.render(&acts).unwrap();
                assert_eq!(s.infer_actions(&text), Some(acts));
            }
        }
        assert_eq!(s.infer_actions("a tent near a town"), None);
    }

    #[test]
    fn parallel_variants_cover_senses() {
        let k = kb(&[("wedding", Some("western"), FIVE), ("wedding", Some("chinese"), &["red"])]);
        let s = action_space("a wedding", &k, &Template::ALL);
        let act = RewriteAction {
            slot: 0,
            choice: Choice::Insert {
                desc_index: 0,
                template: Template::Parenthetical,
                sense_tag: Some("western".into()),
            },
        };
        assert_eq!(s.parallel_sense_variants(std::slice::from_ref(&act)).len(), 2);
        let act3 = RewriteAction {
            slot: 0,
            choice: Choice::Insert {
                desc_index: 3,
                template: Template::Parenthetical,
                sense_tag: Some("western".into()),
            },
        };
        assert_eq!(s.parallel_sense_variants(&[act3]).len(), 1);
        assert_eq!(s.parallel_sense_variants(&[RewriteAction::skip(0)]).len(), 1);
    }
}
