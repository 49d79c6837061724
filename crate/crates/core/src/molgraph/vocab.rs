use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element table: symbol, bond-order capacity and Pauling electronegativity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomVocab {
    symbols: Vec<String>,
    max_valence: Vec<u32>,
    electronegativity: Vec<f64>,
}

impl AtomVocab {
    pub fn new(
        symbols: Vec<String>,
        max_valence: Vec<u32>,
        electronegativity: Vec<f64>,
    ) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::invalid("vocabulary must contain at least one element"));
        }
        if symbols.len() != max_valence.len() || symbols.len() != electronegativity.len() {
            return Err(Error::invalid("vocabulary columns differ in length"));
        }
        for (i, s) in symbols.iter().enumerate() {
            if symbols[..i].contains(s) {
                return Err(Error::invalid(format!("duplicate element symbol `{s}`")));
            }
        }
        if let Some(i) = max_valence.iter().position(|&v| v < 1) {
            return Err(Error::invalid(format!("max valence of `{}` must be >= 1", symbols[i])));
        }
        if let Some(i) = electronegativity.iter().position(|&x| !(x > 0.0)) {
            return Err(Error::invalid(format!(
                "electronegativity of `{}` must be positive",
                symbols[i]
            )));
        }
        Ok(Self { symbols, max_valence, electronegativity })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, atom_type: usize) -> Option<&str> {
        self.symbols.get(atom_type).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn max_valence(&self, atom_type: usize) -> Option<u32> {
        self.max_valence.get(atom_type).copied()
    }

    pub fn electronegativity(&self, atom_type: usize) -> Option<f64> {
        self.electronegativity.get(atom_type).copied()
    }
}

impl Default for AtomVocab {
    /// C, N, O, F, S with capacities 4/3/2/1/6.
    fn default() -> Self {
        Self {
            symbols: ["C", "N", "O", "F", "S"].iter().map(|s| s.to_string()).collect(),
            max_valence: vec![4, 3, 2, 1, 6],
            electronegativity: vec![2.55, 3.04, 3.44, 3.98, 2.58],
        }
    }
}
