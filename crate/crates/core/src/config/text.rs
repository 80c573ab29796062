//! Flat `key = value` text with `[section]` headers.

use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("unknown key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("invalid value for {section}.{key}: {detail}")]
    Value {
        section: String,
        key: String,
        detail: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Parsed document: section → key → value. Keys outside any section land
/// in the section named `""`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Document {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Document, ConfigError> {
        let mut doc = Document::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: i + 1,
                    detail: format!("unterminated section header `{line}`"),
                })?;
                current = name.trim().to_string();
                doc.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                detail: format!("expected key = value, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    detail: "empty key".into(),
                });
            }
            let section = doc.sections.entry(current.clone()).or_default();
            if section.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    detail: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(doc)
    }

    /// Take a section out of the document for typed reading.
    pub fn take(&mut self, section: &str) -> Section {
        Section {
            name: section.to_string(),
            values: self.sections.remove(section).unwrap_or_default(),
        }
    }

    /// Fail on any section that was never taken.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.sections.into_iter().find(|(_, v)| !v.is_empty()) {
            Some((name, _)) => Err(ConfigError::UnknownSection(name)),
            None => Ok(()),
        }
    }
}

/// One section being read. Each `get` consumes its key; [`Section::finish`]
/// rejects whatever is left.
#[derive(Debug)]
pub struct Section {
    name: String,
    values: BTreeMap<String, String>,
}

impl Section {
    pub fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e: T::Err| ConfigError::Value {
                section: self.name.clone(),
                key: key.to_string(),
                detail: format!("`{raw}`: {e}"),
            }),
        }
    }

    pub fn get_with<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl FnOnce(&str) -> Option<T>,
    ) -> Result<T, ConfigError> {
        match self.values.remove(key) {
            None => Ok(default),
            Some(raw) => parse(&raw).ok_or_else(|| ConfigError::Value {
                section: self.name.clone(),
                key: key.to_string(),
                detail: format!("`{raw}` not recognized"),
            }),
        }
    }

    pub fn finish(self) -> Result<(), ConfigError> {
        match self.values.into_keys().next() {
            Some(key) => Err(ConfigError::UnknownKey {
                section: self.name,
                key,
            }),
            None => Ok(()),
        }
    }
}

/// Append `[name]` and its entries in the given order.
pub fn write_section(out: &mut String, name: &str, entries: &[(&str, String)]) {
    out.push('[');
    out.push_str(name);
    out.push_str("]\n");
    for (k, v) in entries {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let doc = Document::parse("top = 1\n[a]\n x = 2 # note\n\n[b]\ny=hello\n").unwrap();
        assert_eq!(doc.sections[""]["top"], "1");
        assert_eq!(doc.sections["a"]["x"], "2");
        assert_eq!(doc.sections["b"]["y"], "hello");
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Document::parse("[a\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(Document::parse("[a]\nnovalue\n"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(Document::parse("[a]\nx=1\nx=2\n").is_err());
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let mut doc = Document::parse("[a]\nx = 3\nz = 1\n[c]\nq = 1\n").unwrap();
        let mut a = doc.take("a");
        assert_eq!(a.get("x", 0usize).unwrap(), 3);
        assert_eq!(a.get("missing", 7usize).unwrap(), 7);
        assert!(matches!(a.finish(), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(doc.finish(), Err(ConfigError::UnknownSection(_))));
    }

    #[test]
    fn bad_value_names_the_key() {
        let mut doc = Document::parse("[a]\nx = nope\n").unwrap();
        let err = doc.take("a").get("x", 0usize).unwrap_err();
        assert!(err.to_string().contains("a.x"));
    }
}
