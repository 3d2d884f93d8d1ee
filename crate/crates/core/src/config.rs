//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear at
//! most once. Values are kept as trimmed strings; callers parse them.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_kv(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: trimmed.to_string(),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                text: trimmed.to_string(),
            });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        out.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<Entry>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_kv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_comments_and_blanks() {
        let e = parse_kv("# hi\n\n a = 1 \nb=two words\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].key, "a");
        assert_eq!(e[0].value, "1");
        assert_eq!(e[1].value, "two words");
        assert_eq!(e[1].line, 4);
    }

    #[test]
    fn rejects_missing_equals_and_duplicates() {
        assert!(matches!(parse_kv("abc"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse_kv("= 3"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(
            parse_kv("a = 1\na = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }
}
