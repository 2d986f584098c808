//! Prompt templates with named `{placeholder}` slots.
//!
//! A placeholder is `{` followed by one or more `[a-z0-9_]` characters and
//! `}`. Any other brace text (JSON snippets, for example) is copied verbatim.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    source: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn parse(name: impl Into<String>, source: impl Into<String>) -> Self {
        let source = source.into();
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut rest = source.as_str();
        while let Some(open) = rest.find('{') {
            text.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let ident_len = after
                .bytes()
                .take_while(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_')
                .count();
            if ident_len > 0 && after.as_bytes().get(ident_len) == Some(&b'}') {
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                pieces.push(Piece::Slot(after[..ident_len].to_string()));
                rest = &after[ident_len + 1..];
            } else {
                text.push('{');
                rest = after;
            }
        }
        text.push_str(rest);
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        Self {
            name: name.into(),
            source,
            pieces,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::parse(name, source))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Distinct placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for p in &self.pieces {
            if let Piece::Slot(s) = p {
                if !seen.contains(&s.as_str()) {
                    seen.push(s.as_str());
                }
            }
        }
        seen
    }

    pub fn require(&self, names: &[&str]) -> Result<()> {
        let present = self.placeholders();
        for n in names {
            if !present.contains(n) {
                return Err(Error::Template(format!(
                    "template \"{}\" is missing placeholder {{{n}}}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<String> {
        let mut out = String::with_capacity(self.source.len());
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => match vars.get(s.as_str()) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(Error::Template(format!(
                            "no value for placeholder {{{s}}} in template \"{}\"",
                            self.name
                        )))
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Built-in templates, also shipped as files under `templates/`.
pub mod defaults {
    pub const SUMMARIZE_REVIEWS: &str = include_str!("../templates/summarize_reviews.txt");
    pub const AGGREGATE_USER: &str = include_str!("../templates/aggregate_user.txt");
    pub const AGGREGATE_ITEM: &str = include_str!("../templates/aggregate_item.txt");
    pub const GENERATION: &str = include_str!("../templates/generation.txt");
    pub const JUDGE: &str = include_str!("../templates/judge.txt");
}
