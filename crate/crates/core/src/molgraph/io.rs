use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{AtomVocab, MolecularGraph};
use crate::error::{Error, Result};

/// One molecule per JSONL line: `{"atoms":[..],"bonds":[[i,j,type],..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeRecord {
    pub atoms: Vec<String>,
    pub bonds: Vec<(usize, usize, u8)>,
}

impl MoleculeRecord {
    /// Bonds come out in lexicographic pair order.
    pub fn from_graph(g: &MolecularGraph, vocab: &AtomVocab) -> Result<Self> {
        let atoms = g
            .atom_types()
            .iter()
            .map(|&t| {
                vocab
                    .symbol(t)
                    .map(str::to_string)
                    .ok_or_else(|| Error::invalid(format!("unknown atom type {t}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { atoms, bonds: g.bond_list() })
    }

    pub fn to_graph(&self, vocab: &AtomVocab) -> Result<MolecularGraph> {
        let types = self
            .atoms
            .iter()
            .map(|s| vocab.index_of(s).ok_or_else(|| Error::invalid(format!("unknown element `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        for &(i, j, t) in &self.bonds {
            if i >= j {
                return Err(Error::invalid(format!("bond ({i}, {j}) must have i < j")));
            }
            if !(1..=4).contains(&t) {
                return Err(Error::invalid(format!("bond type {t} outside 1..=4")));
            }
        }
        MolecularGraph::from_bond_list(types, &self.bonds)
    }
}

pub fn write_jsonl<W: Write>(
    mut out: W,
    graphs: &[MolecularGraph],
    vocab: &AtomVocab,
) -> Result<()> {
    for g in graphs {
        serde_json::to_writer(&mut out, &MoleculeRecord::from_graph(g, vocab)?)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R, vocab: &AtomVocab) -> Result<Vec<MolecularGraph>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MoleculeRecord = serde_json::from_str(&line)?;
        out.push(
            rec.to_graph(vocab)
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(out)
}
