//! Versioned prompt templates and the renderer that fills their slots.
//!
//! Templates are plain text with `{{slot}}` placeholders. Bumping the wording
//! of a template must bump its version: request digests, replay fixtures and
//! graph metadata all key on it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub version: &'static str,
    pub body: &'static str,
}

pub const SYSTEM: Template = Template {
    name: "system",
    version: "system/v1",
    body: include_str!("../prompts/system.v1.txt"),
};

pub const GENERATION_TURN1: Template = Template {
    name: "generation_turn1",
    version: "generation_turn1/v1",
    body: include_str!("../prompts/generation_turn1.v1.txt"),
};

pub const GENERATION_TURN2: Template = Template {
    name: "generation_turn2",
    version: "generation_turn2/v1",
    body: include_str!("../prompts/generation_turn2.v1.txt"),
};

pub const VERIFICATION: Template = Template {
    name: "verification",
    version: "verification/v1",
    body: include_str!("../prompts/verification.v1.txt"),
};

pub const FORMAT_REMINDER: Template = Template {
    name: "format_reminder",
    version: "format_reminder/v1",
    body: include_str!("../prompts/format_reminder.v1.txt"),
};

pub const RELATION_SCORE: Template = Template {
    name: "relation_score",
    version: "relation_score/v1",
    body: include_str!("../prompts/relation_score.v1.txt"),
};

pub const QA: Template = Template {
    name: "qa",
    version: "qa/v1",
    body: include_str!("../prompts/qa.v1.txt"),
};

/// Templates used while building edges.
pub const EDGE_TEMPLATES: [Template; 5] = [
    SYSTEM,
    GENERATION_TURN1,
    GENERATION_TURN2,
    VERIFICATION,
    FORMAT_REMINDER,
];

/// `name -> version` for the given templates.
pub fn versions(templates: &[Template]) -> BTreeMap<String, String> {
    templates
        .iter()
        .map(|t| (t.name.to_string(), t.version.to_string()))
        .collect()
}

impl Template {
    /// Substitute every `{{key}}` with its value. Unknown placeholders are left
    /// in place; values are inserted verbatim and never re-scanned.
    pub fn render(&self, slots: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body;
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            match after.find("}}") {
                Some(close) => {
                    let key = &after[..close];
                    match slots.iter().find(|(k, _)| *k == key) {
                        Some((_, v)) => out.push_str(v),
                        None => {
                            out.push_str("{{");
                            out.push_str(key);
                            out.push_str("}}");
                        }
                    }
                    rest = &after[close + 2..];
                }
                None => {
                    out.push_str(&rest[open..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out.trim_end().to_string()
    }
}
