use crate::error::{Error, Result};

/// Index of pair `(i, j)`, `i < j`, in lexicographic pair order over `n` atoms.
#[inline]
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// Complete line graph over all `N(N-1)/2` atom pairs plus the atom/pair
/// incidence structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineGraphIndex {
    n_atoms: usize,
    pairs: Vec<(usize, usize)>,
    /// Row-major `M x M`.
    adjacency: Vec<bool>,
    /// Row-major `N x M`.
    incidence: Vec<bool>,
    incident: Vec<Vec<usize>>,
}

pub fn build_line_graph(n_atoms: usize) -> Result<LineGraphIndex> {
    LineGraphIndex::new(n_atoms)
}

impl LineGraphIndex {
    pub fn new(n_atoms: usize) -> Result<Self> {
        if n_atoms < 2 {
            return Err(Error::invalid(format!(
                "line graph needs at least 2 atoms, got {n_atoms}"
            )));
        }
        let n = n_atoms;
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j));
            }
        }
        let m = pairs.len();
        let mut incidence = vec![false; n * m];
        let mut incident = vec![Vec::with_capacity(n - 1); n];
        for (u, &(i, j)) in pairs.iter().enumerate() {
            incidence[i * m + u] = true;
            incidence[j * m + u] = true;
            incident[i].push(u);
            incident[j].push(u);
        }
        let mut adjacency = vec![false; m * m];
        for list in &incident {
            for &u in list {
                for &v in list {
                    if u != v {
                        adjacency[u * m + v] = true;
                    }
                }
            }
        }
        Ok(Self { n_atoms, pairs, adjacency, incidence, incident })
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair(&self, u: usize) -> (usize, usize) {
        self.pairs[u]
    }

    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        (a != b && b < self.n_atoms).then(|| pair_index(self.n_atoms, a, b))
    }

    pub fn adjacent(&self, u: usize, v: usize) -> bool {
        self.adjacency[u * self.n_pairs() + v]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn incidence(&self) -> &[bool] {
        &self.incidence
    }

    pub fn is_incident(&self, atom: usize, u: usize) -> bool {
        self.incidence[atom * self.n_pairs() + u]
    }

    /// Line nodes containing `atom`, ascending.
    pub fn incident_pairs(&self, atom: usize) -> &[usize] {
        &self.incident[atom]
    }
}
