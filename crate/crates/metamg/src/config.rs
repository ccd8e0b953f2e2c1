//! Line-oriented configuration files: `key = value` pairs grouped under
//! `[section]` headers, `#` comments, blank lines ignored. Values are plain
//! strings until a typed accessor parses them.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    /// (section, key, value) triples in file order; keys before the first
    /// header belong to the unnamed section `""`. Later duplicates win.
    entries: Vec<(String, String, String)>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut entries = Vec::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let Some(name) = inner.strip_suffix(']') else {
                    return Err(Error::Config(format!(
                        "line {}: unterminated section header",
                        lineno + 1
                    )));
                };
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {}: empty section name", lineno + 1)));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{}'",
                    lineno + 1,
                    line
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.push((section.clone(), key.to_string(), value.trim().to_string()));
        }
        Ok(Config { entries })
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(s, k, _)| s == section && k == key)
            .map(|(_, _, v)| v.as_str())
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        self.typed(section, key, "number")
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<Option<usize>> {
        self.typed(section, key, "integer")
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        self.typed(section, key, "integer")
    }

    fn typed<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        kind: &str,
    ) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!(
                    "[{}] {} = '{}' is not a valid {}",
                    section, key, v, kind
                ))
            }),
        }
    }

    /// Comma-separated list of integers.
    pub fn get_usize_list(&self, section: &str, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        Error::Config(format!("[{}] {} = '{}' is not an integer list", section, key, v))
                    })
                })
                .collect::<Result<Vec<usize>>>()
                .map(Some),
        }
    }

    /// Section names in first-appearance order (excluding the unnamed one).
    pub fn sections(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for (s, _, _) in &self.entries {
            if !s.is_empty() && !seen.contains(&s.as_str()) {
                seen.push(s.as_str());
            }
        }
        seen
    }

    pub fn keys(&self, section: &str) -> Vec<&str> {
        let mut seen = Vec::new();
        for (s, k, _) in &self.entries {
            if s == section && !seen.contains(&k.as_str()) {
                seen.push(k.as_str());
            }
        }
        seen
    }
}
