use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    ExtractEntities,
    DescribeEntity,
    IdentifyAmbiguous,
    ExplainSenses,
    RewriteQuery,
}

impl TemplateName {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::ExtractEntities => "extract_entities",
            TemplateName::DescribeEntity => "describe_entity",
            TemplateName::IdentifyAmbiguous => "identify_ambiguous",
            TemplateName::ExplainSenses => "explain_senses",
            TemplateName::RewriteQuery => "rewrite_query",
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Instruction, worked examples and input slot for one kind of request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    /// Instruction followed by the input line; `{name}` marks a placeholder.
    pub body: String,
    pub demonstrations: Vec<String>,
}

impl PromptTemplate {
    pub fn builtin(name: TemplateName) -> Self {
        let (body, demos): (&str, &[&str]) = match name {
            TemplateName::ExtractEntities => (
                "Extract the visual entities mentioned in the caption. A visual entity is a concrete \
                 object with a recognizable appearance; leave out places, names and abstract terms. \
                 Answer with one lowercase entity per line, or (none).\n\nCaption: {caption}",
                &[
                    "Caption: a whale swims next to a school bus\nAnswer:\nwhale\nschool bus",
                    "Caption: a street in New York at night\nAnswer:\n(none)",
                ],
            ),
            TemplateName::DescribeEntity => (
                "Write {h} short visual descriptions of the entity, focusing on color, shape, parts \
                 and quantity. Each line starts with a verb. Answer with one description per line.\n\n\
                 Entity: {entity}",
                &["Entity: tent\nAnswer:\nhas a triangular shape\nis made of fabric\nhas poles and ropes"],
            ),
            TemplateName::IdentifyAmbiguous => (
                "Does the word name more than one kind of visually different thing? Answer yes or no.\n\n\
                 Word: {entity}",
                &["Word: tent\nAnswer: no", "Word: bank\nAnswer: yes"],
            ),
            TemplateName::ExplainSenses => (
                "List every distinct meaning of the word as `tag: explanation`, one meaning per line.\n\n\
                 Word: {entity}",
                &["Word: bank\nAnswer:\nfinancial institution: a building where money is kept\n\
                   riverbank: the land alongside a river"],
            ),
            TemplateName::RewriteQuery => (
                "Rewrite the query by inserting the most helpful visual description of each entity \
                 right after the entity. Keep every original word. Available descriptions (JSON): \
                 {slots}. Connectives: {templates}. Write {k} different rewrites, one per line.\n\n\
                 Query: {query}",
                &["Query: a tent near the hill\nAnswer:\na tent (has a triangular shape) near the hill"],
            ),
        };
        Self {
            name,
            body: body.to_string(),
            demonstrations: demos.iter().map(|d| d.to_string()).collect(),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) => {
                    let name = &after[..close];
                    if !name.is_empty()
                        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                        && !out.iter().any(|n| n == name)
                    {
                        out.push(name.to_string());
                    }
                    rest = &after[close + 1..];
                }
                None => break,
            }
        }
        out
    }

    /// Substitutes every placeholder; bound values are not re-scanned.
    pub fn fill(&self, bindings: &BTreeMap<String, String>) -> Result<String, LlmError> {
        if !(1..=3).contains(&self.demonstrations.len()) {
            return Err(LlmError::InvalidRequest(format!(
                "template {} has {} demonstrations",
                self.name,
                self.demonstrations.len()
            )));
        }
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let name = close.map(|c| &after[..c]);
            match name {
                Some(n) if !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                    let value = bindings
                        .get(n)
                        .ok_or_else(|| LlmError::MissingBinding(n.to_string()))?;
                    out.push_str(value);
                    rest = &after[n.len() + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Chat messages in [instruction, demonstrations, input] order: a system
    /// message with the examples, then the filled body as the user turn.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<Vec<ChatMessage>, LlmError> {
        let body = self.fill(bindings)?;
        let system = format!(
            "You help build a visual search index. Examples:\n\n{}",
            self.demonstrations.join("\n\n")
        );
        Ok(vec![
            ChatMessage {
                role: "system".into(),
                content: system,
            },
            ChatMessage {
                role: "user".into(),
                content: body,
            },
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn placeholders_are_listed() {
        let t = PromptTemplate::builtin(TemplateName::RewriteQuery);
        assert_eq!(t.placeholders(), ["slots", "templates", "k", "query"]);
        let t = PromptTemplate::builtin(TemplateName::DescribeEntity);
        assert_eq!(t.placeholders(), ["h", "entity"]);
    }

    #[test]
    fn missing_binding_is_reported() {
        let t = PromptTemplate::builtin(TemplateName::DescribeEntity);
        let err = t.fill(&b(&[("entity", "tent")])).unwrap_err();
        assert!(matches!(err, LlmError::MissingBinding(n) if n == "h"));
    }

    #[test]
    fn bound_values_are_not_rescanned() {
        let t = PromptTemplate::builtin(TemplateName::ExtractEntities);
        let out = t.fill(&b(&[("caption", "a {entity} sign")])).unwrap();
        assert!(out.ends_with("Caption: a {entity} sign"));
    }

    #[test]
    fn every_builtin_has_valid_demonstrations() {
        for name in [
            TemplateName::ExtractEntities,
            TemplateName::DescribeEntity,
            TemplateName::IdentifyAmbiguous,
            TemplateName::ExplainSenses,
            TemplateName::RewriteQuery,
        ] {
            let t = PromptTemplate::builtin(name);
            assert!((1..=3).contains(&t.demonstrations.len()), "{name}");
            let bindings = t.placeholders().into_iter().map(|p| (p, "x".to_string())).collect();
            let msgs = t.render(&bindings).unwrap();
            assert_eq!(msgs.len(), 2);
        }
    }
}
