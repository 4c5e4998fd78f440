//! Release templates with `{{body}}`, `{{citations}}` and `{{case_id}}` slots.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PLACEHOLDERS: [&str; 3] = ["body", "citations", "case_id"];

const DEFAULT_TEMPLATE: &str = "{{body}}\n\nCitations:\n{{citations}}\n\nCase: {{case_id}}\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateStore {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateStore {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert("default".to_owned(), DEFAULT_TEMPLATE.to_owned());
        templates.insert("body-only".to_owned(), "{{body}}".to_owned());
        Self { templates }
    }
}

enum Piece<'a> {
    Lit(&'a str),
    Slot(&'a str),
}

fn parse(template: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push(Piece::Lit(&rest[..open]));
        let after = &rest[open + 2..];
        let close = after
            .find("}}")
            .ok_or_else(|| Error::Template("unterminated placeholder".into()))?;
        let name = after[..close].trim();
        if !PLACEHOLDERS.contains(&name) {
            return Err(Error::Template(format!(
                "unknown placeholder {{{{{name}}}}}"
            )));
        }
        out.push(Piece::Slot(name));
        rest = &after[close + 2..];
    }
    out.push(Piece::Lit(rest));
    Ok(out)
}

impl TemplateStore {
    pub fn insert(&mut self, id: &str, text: &str) -> Result<()> {
        if id.trim().is_empty() {
            return Err(Error::Template("empty template id".into()));
        }
        parse(text)?;
        self.templates.insert(id.to_owned(), text.to_owned());
        Ok(())
    }

    /// Loads every `*.txt` / `*.tmpl` file in `dir`; the file stem is the id.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize> {
        let mut n = 0;
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            let ext = path.extension().and_then(|s| s.to_str());
            if !matches!(ext, Some("txt" | "tmpl")) {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            self.insert(id, &std::fs::read_to_string(&path)?)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(
        &self,
        id: &str,
        body: &str,
        citations: &[String],
        case_id: &str,
    ) -> Result<String> {
        let t = self
            .templates
            .get(id)
            .ok_or_else(|| Error::Template(format!("no template named {id:?}")))?;
        let cites = if citations.is_empty() {
            "(none)".to_owned()
        } else {
            citations
                .iter()
                .map(|c| format!("- {c}"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let mut out = String::new();
        for p in parse(t)? {
            match p {
                Piece::Lit(s) => out.push_str(s),
                Piece::Slot("body") => out.push_str(body),
                Piece::Slot("citations") => out.push_str(&cites),
                Piece::Slot(_) => out.push_str(case_id),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_templates() {
        let t = TemplateStore::default();
        assert_eq!(
            t.render("body-only", "Text.", &["d1".into()], "c1")
                .unwrap(),
            "Text."
        );
        let full = t
            .render("default", "Text.", &["d1".into(), "d2".into()], "c1")
            .unwrap();
        assert_eq!(full, "Text.\n\nCitations:\n- d1\n- d2\n\nCase: c1\n");
        assert!(matches!(
            t.render("memo", "x", &[], "c"),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn bad_placeholders_are_rejected() {
        let mut t = TemplateStore::default();
        assert!(t.insert("x", "{{ body }} and {{signature}}").is_err());
        assert!(t.insert("x", "{{body").is_err());
        t.insert("memo", "MEMO {{ case_id }}: {{body}}").unwrap();
        assert_eq!(t.render("memo", "b", &[], "c9").unwrap(), "MEMO c9: b");
    }

    #[test]
    fn loads_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("letter.txt"), "Dear client, {{body}}").unwrap();
        std::fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        let mut t = TemplateStore::default();
        assert_eq!(t.load_dir(dir.path()).unwrap(), 1);
        assert!(t.contains("letter"));
    }
}
