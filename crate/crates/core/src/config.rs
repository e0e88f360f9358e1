//! Plain `key = value` configuration text with `[section]` headers.
//!
//! ```text
//! # comment
//! [model]
//! d_model = 512
//! strategy = cycle_rev
//!
//! [bench.universal]
//! d_model = 1024
//! ```

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: [{section}] {key} = `{value}`: {reason}")]
    Invalid {
        line: usize,
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("[{section}] missing required key `{key}`")]
    Missing { section: String, key: String },
    #[error("[{section}] {reason}")]
    Rejected { section: String, reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<Entry>,
}

/// Parsed configuration document. Section and key order is preserved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigDoc {
    sections: Vec<Section>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = ConfigDoc::default();
        let mut current: Option<usize> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    message: format!("unterminated section header `{content}`"),
                })?;
                let name = name.trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(ConfigError::Syntax {
                        line,
                        message: format!("bad section name `{name}`"),
                    });
                }
                if doc.section(name).is_some() {
                    return Err(ConfigError::Syntax {
                        line,
                        message: format!("duplicate section [{name}]"),
                    });
                }
                doc.sections.push(Section {
                    name: name.to_string(),
                    entries: Vec::new(),
                });
                current = Some(doc.sections.len() - 1);
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    message: "empty key".into(),
                });
            }
            let idx = match current {
                Some(i) => i,
                None => {
                    return Err(ConfigError::Syntax {
                        line,
                        message: format!("`{key}` appears before any [section]"),
                    })
                }
            };
            let section = &mut doc.sections[idx];
            if section.entries.iter().any(|e| e.key == key) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("duplicate key `{key}` in [{}]", section.name),
                });
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(doc)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Sections named `prefix.<suffix>`, in file order.
    pub fn subsections<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Section)> {
        self.sections.iter().filter_map(move |s| {
            s.name
                .strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('.'))
                .map(|suffix| (suffix, s))
        })
    }

    pub fn push_section(&mut self, name: &str) -> &mut Section {
        self.sections.push(Section {
            name: name.to_string(),
            entries: Vec::new(),
        });
        self.sections.last_mut().unwrap()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{}]\n", s.name));
            for e in &s.entries {
                out.push_str(&format!("{} = {}\n", e.key, e.value));
            }
        }
        out
    }
}

impl Section {
    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value,
            None => self.entries.push(Entry {
                key: key.to_string(),
                value,
                line: 0,
            }),
        }
        self
    }

    /// Parses `key` if present.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>, ConfigError>
    where
        V::Err: Display,
    {
        let Some(e) = self.entry(key) else {
            return Ok(None);
        };
        e.value.parse::<V>().map(Some).map_err(|err| ConfigError::Invalid {
            line: e.line,
            section: self.name.clone(),
            key: key.to_string(),
            value: e.value.clone(),
            reason: err.to_string(),
        })
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V, ConfigError>
    where
        V::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V, ConfigError>
    where
        V::Err: Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    /// Rejects keys outside `known`, reporting the first offender's line.
    pub fn check_keys(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(ConfigError::Syntax {
                line: e.line,
                message: format!("unknown key `{}` in [{}]", e.key, self.name),
            }),
            None => Ok(()),
        }
    }

    /// Copy of `self` with `overrides`' entries replacing or extending it.
    pub fn overlaid(&self, overrides: &Section) -> Section {
        let mut merged = self.clone();
        for e in &overrides.entries {
            match merged.entries.iter_mut().find(|m| m.key == e.key) {
                Some(m) => *m = e.clone(),
                None => merged.entries.push(e.clone()),
            }
        }
        merged.name = overrides.name.clone();
        merged
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "# header comment\n[model]\nd_model = 512  # width\nstrategy = cycle_rev\n\n[bench.small]\nd_model = 32\n";

    #[test]
    fn parses_sections_and_values() {
        let doc = ConfigDoc::parse(SAMPLE).unwrap();
        let model = doc.section("model").unwrap();
        assert_eq!(model.require::<usize>("d_model").unwrap(), 512);
        assert_eq!(model.entry("strategy").unwrap().value, "cycle_rev");
        assert_eq!(model.get::<usize>("missing").unwrap(), None);
        let subs: Vec<_> = doc.subsections("bench").map(|(n, _)| n).collect();
        assert_eq!(subs, ["small"]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ConfigDoc::parse("[model]\nd_model 512\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
        let err = ConfigDoc::parse("d_model = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
        let err = ConfigDoc::parse("[a]\nx = 1\nx = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 3, .. }));

        let doc = ConfigDoc::parse("[model]\n\nd_model = wide\n").unwrap();
        let err = doc.section("model").unwrap().require::<usize>("d_model").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { line: 3, .. }));
        assert!(err.to_string().starts_with("line 3"));
    }

    #[test]
    fn render_round_trips() {
        let doc = ConfigDoc::parse(SAMPLE).unwrap();
        let again = ConfigDoc::parse(&doc.render()).unwrap();
        assert_eq!(again.render(), doc.render());
        assert_eq!(again.sections().len(), 2);
    }

    #[test]
    fn overlay_replaces_and_extends() {
        let doc = ConfigDoc::parse("[model]\na = 1\nb = 2\n[bench.x]\nb = 3\nc = 4\n").unwrap();
        let merged = doc
            .section("model")
            .unwrap()
            .overlaid(doc.section("bench.x").unwrap());
        assert_eq!(merged.require::<u32>("a").unwrap(), 1);
        assert_eq!(merged.require::<u32>("b").unwrap(), 3);
        assert_eq!(merged.require::<u32>("c").unwrap(), 4);
    }
}
