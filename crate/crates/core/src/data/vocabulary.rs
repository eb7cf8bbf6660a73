use std::collections::HashMap;
use std::path::Path;

use super::{DataError, Result};

/// The 19-class BigEarthNet nomenclature, one class per line.
pub const BIGEARTHNET_19: &str = include_str!("../../assets/bigearthnet19.txt");

/// Ordered class names; a class's index is its line number in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(DataError::Validation(format!("empty class name at index {i}")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(DataError::Validation(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names, index })
    }

    /// Parses newline-delimited names, ignoring blank lines at the end.
    pub fn parse(text: &str) -> Result<Self> {
        let names: Vec<String> = text
            .trim_end()
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        Self::new(names)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn bigearthnet() -> Self {
        Self::parse(BIGEARTHNET_19).expect("built-in vocabulary is valid")
    }

    /// Synthetic vocabulary `class_00`, `class_01`, ...
    pub fn numbered(n: usize) -> Self {
        Self::new((0..n).map(|i| format!("class_{i:02}")).collect()).expect("distinct names")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.names.join("\n");
        s.push('\n');
        s
    }

    /// Binary vector for a list of class names; unknown names are collected
    /// into the error.
    pub fn encode(&self, names: &[String]) -> Result<Vec<u8>> {
        let mut out = vec![0u8; self.len()];
        let mut unknown = Vec::new();
        for n in names {
            match self.index_of(n) {
                Some(i) => out[i] = 1,
                None => unknown.push(n.clone()),
            }
        }
        if unknown.is_empty() {
            Ok(out)
        } else {
            Err(DataError::UnknownClasses(unknown))
        }
    }

    pub fn decode(&self, labels: &[u8]) -> Vec<String> {
        labels
            .iter()
            .zip(&self.names)
            .filter(|(v, _)| **v == 1)
            .map(|(_, n)| n.clone())
            .collect()
    }
}
