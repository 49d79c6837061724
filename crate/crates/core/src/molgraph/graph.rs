use crate::error::{Error, Result};

/// Number of bond classes including "no bond".
pub const N_BOND_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum BondType {
    None = 0,
    Single = 1,
    Double = 2,
    Triple = 3,
    Aromatic = 4,
}

impl BondType {
    pub const ALL: [BondType; N_BOND_CLASSES] = [
        BondType::None,
        BondType::Single,
        BondType::Double,
        BondType::Triple,
        BondType::Aromatic,
    ];

    pub fn from_class(class: u8) -> Option<Self> {
        Self::ALL.get(class as usize).copied()
    }

    pub fn class(self) -> u8 {
        self as u8
    }

    /// Contribution to an atom's valence; aromatic bonds count 1.5.
    pub fn order(self) -> f64 {
        match self {
            BondType::None => 0.0,
            BondType::Single => 1.0,
            BondType::Double => 2.0,
            BondType::Triple => 3.0,
            BondType::Aromatic => 1.5,
        }
    }
}

/// Heavy-atom graph: atom types (vocabulary indices) plus a symmetric bond
/// class matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MolecularGraph {
    atom_types: Vec<usize>,
    bonds: Vec<u8>,
}

impl MolecularGraph {
    /// Builds a graph from a dense row-major `n x n` bond class matrix.
    pub fn new(atom_types: Vec<usize>, bonds: Vec<u8>) -> Result<Self> {
        let n = atom_types.len();
        if n == 0 {
            return Err(Error::invalid("molecular graph needs at least one atom"));
        }
        if bonds.len() != n * n {
            return Err(Error::invalid(format!(
                "bond matrix has {} entries, expected {}",
                bonds.len(),
                n * n
            )));
        }
        for i in 0..n {
            if bonds[i * n + i] != 0 {
                return Err(Error::invalid(format!("self bond on atom {i}")));
            }
            for j in (i + 1)..n {
                let b = bonds[i * n + j];
                if b != bonds[j * n + i] {
                    return Err(Error::invalid(format!("bond matrix asymmetric at ({i}, {j})")));
                }
                if b as usize >= N_BOND_CLASSES {
                    return Err(Error::invalid(format!("bond class {b} out of range")));
                }
            }
        }
        Ok(Self { atom_types, bonds })
    }

    /// Graph with the given atoms and no bonds.
    pub fn empty(atom_types: Vec<usize>) -> Result<Self> {
        let n = atom_types.len();
        Self::new(atom_types, vec![0; n * n])
    }

    pub fn from_bond_list(atom_types: Vec<usize>, bonds: &[(usize, usize, u8)]) -> Result<Self> {
        let mut g = Self::empty(atom_types)?;
        for &(i, j, t) in bonds {
            if i == j || i >= g.n_atoms() || j >= g.n_atoms() {
                return Err(Error::invalid(format!("bad bond endpoints ({i}, {j})")));
            }
            if t as usize >= N_BOND_CLASSES {
                return Err(Error::invalid(format!("bond class {t} out of range")));
            }
            g.set_bond(i, j, t);
        }
        Ok(g)
    }

    pub fn n_atoms(&self) -> usize {
        self.atom_types.len()
    }

    pub fn atom_types(&self) -> &[usize] {
        &self.atom_types
    }

    pub fn atom_type(&self, i: usize) -> usize {
        self.atom_types[i]
    }

    /// Dense row-major bond class matrix.
    pub fn bond_matrix(&self) -> &[u8] {
        &self.bonds
    }

    pub fn bond(&self, i: usize, j: usize) -> u8 {
        self.bonds[i * self.n_atoms() + j]
    }

    pub fn bond_type(&self, i: usize, j: usize) -> BondType {
        BondType::from_class(self.bond(i, j)).expect("bond classes validated on construction")
    }

    /// Sets both `(i, j)` and `(j, i)`. Panics on a diagonal write.
    pub fn set_bond(&mut self, i: usize, j: usize, class: u8) {
        assert_ne!(i, j, "diagonal bonds are not representable");
        assert!((class as usize) < N_BOND_CLASSES);
        let n = self.n_atoms();
        self.bonds[i * n + j] = class;
        self.bonds[j * n + i] = class;
    }

    /// Actual bonds `(i, j, class)` with `i < j` in lexicographic order.
    pub fn bond_list(&self) -> Vec<(usize, usize, u8)> {
        let n = self.n_atoms();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let b = self.bond(i, j);
                if b > 0 {
                    out.push((i, j, b));
                }
            }
        }
        out
    }

    pub fn n_bonds(&self) -> usize {
        let n = self.n_atoms();
        (0..n).map(|i| ((i + 1)..n).filter(|&j| self.bond(i, j) > 0).count()).sum()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.n_atoms();
        (0..n).filter(move |&j| self.bonds[i * n + j] > 0)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_atoms();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for w in self.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Relabels atoms so that old atom `i` becomes new atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_atoms();
        if perm.len() != n {
            return Err(Error::invalid("permutation length differs from atom count"));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::invalid("not a permutation"));
            }
            seen[p] = true;
        }
        let mut types = vec![0; n];
        let mut bonds = vec![0u8; n * n];
        for i in 0..n {
            types[perm[i]] = self.atom_types[i];
            for j in 0..n {
                bonds[perm[i] * n + perm[j]] = self.bonds[i * n + j];
            }
        }
        Ok(Self { atom_types: types, bonds })
    }
}
