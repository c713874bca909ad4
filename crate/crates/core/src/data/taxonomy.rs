use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CancerSite {
    pub name: String,
    /// Normalized code prefixes (uppercase, no dots).
    pub prefixes: Vec<String>,
}

fn default_prefix_length() -> usize {
    3
}

fn default_other() -> String {
    "other".into()
}

/// Maps raw diagnosis codes to class indices.
///
/// Class order: cancer sites, then prefix classes, then the catch-all.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    #[serde(default)]
    pub cancer_sites: Vec<CancerSite>,
    /// Whether codes fall back to their leading-character prefix class.
    #[serde(default = "default_true")]
    pub prefix_rule: bool,
    #[serde(default = "default_prefix_length")]
    pub prefix_length: usize,
    /// Known prefix classes.
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default = "default_other")]
    pub other: String,
}

fn default_true() -> bool {
    true
}

/// Uppercases and strips dots and surrounding whitespace.
pub fn normalize_code(code: &str) -> String {
    code.trim().chars().filter(|&c| c != '.').flat_map(char::to_uppercase).collect()
}

impl LabelTaxonomy {
    pub fn validate(&self) -> Result<()> {
        if self.prefix_length == 0 {
            return Err(Error::Config("prefix_length must be positive".into()));
        }
        let mut names: Vec<&str> = self.class_names();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("class {:?} defined twice", w[0])));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.cancer_sites
            .iter()
            .map(|s| s.name.as_str())
            .chain(self.classes.iter().map(String::as_str))
            .chain(std::iter::once(self.other.as_str()))
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.cancer_sites.len() + self.classes.len() + 1
    }

    pub fn other_index(&self) -> usize {
        self.n_classes() - 1
    }

    /// Total: cancer-site table first (longest matching prefix wins), then the
    /// prefix rule, then the catch-all class.
    pub fn group(&self, raw_code: &str) -> usize {
        let code = normalize_code(raw_code);
        let site = self
            .cancer_sites
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.prefixes.iter().map(move |p| (i, normalize_code(p))))
            .filter(|(_, p)| !p.is_empty() && code.starts_with(p.as_str()))
            .max_by_key(|(i, p)| (p.len(), std::cmp::Reverse(*i)));
        if let Some((i, _)) = site {
            return i;
        }
        if self.prefix_rule && code.chars().count() >= self.prefix_length {
            let prefix: String = code.chars().take(self.prefix_length).collect();
            if let Some(j) = self.classes.iter().position(|c| normalize_code(c) == prefix) {
                return self.cancer_sites.len() + j;
            }
        }
        self.other_index()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("taxonomy serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
