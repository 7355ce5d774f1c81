//! Non-overlapping community detection by modularity optimisation.
//!
//! Both the configuration-model modularity and the RMT-filtered modularity
//! are expressed as an explicit matrix `B` with
//! `Q(η) = (1/norm) Σ_ij B_ij δ(η_i, η_j)`, and a single Louvain-style
//! optimiser (local moves, then aggregation) works on either.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::spectral::RmtDecomposition;

/// Minimum modularity gain for a move to count as an improvement.
pub const MOVE_TOLERANCE: f64 = 1e-12;
/// Upper bound on local-move/aggregation rounds.
pub const MAX_PASSES: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum CommunityError {
    #[error("matrix must be square, got {0} × {1}")]
    NotSquare(usize, usize),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("adjacency has a negative entry {value} at ({row}, {col})")]
    Negative { row: usize, col: usize, value: f64 },
    #[error("adjacency has a non-zero diagonal entry at {0}")]
    NonZeroDiagonal(usize),
    #[error("total weight is zero")]
    ZeroWeight,
    #[error("normaliser {0} must be positive and finite")]
    BadNorm(f64),
    #[error("non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
}

/// Which modularity the matrix encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModularityKind {
    /// `B_ij = A_ij − k_i k_j / 2l`.
    Configuration,
    /// `B = C^(g)` with the diagonal removed.
    RmtFiltered,
    /// `B = A` without any null model.
    Plain,
}

#[derive(Debug, Clone)]
pub struct ModularityMatrix {
    pub b_matrix: Array2<f64>,
    pub norm: f64,
    pub kind: ModularityKind,
}

impl ModularityMatrix {
    pub fn n(&self) -> usize {
        self.b_matrix.nrows()
    }

    /// `Q` of an arbitrary labelling.
    pub fn modularity(&self, assignment: &[usize]) -> f64 {
        let n = self.n();
        assert_eq!(assignment.len(), n);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if assignment[i] == assignment[j] {
                    total += self.b_matrix[[i, j]];
                }
            }
        }
        total / self.norm
    }
}

/// A community label per node, labels `0..n_communities` in order of first
/// appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub n_communities: usize,
    pub modularity: f64,
}

impl Partition {
    /// Canonicalise labels and score them under `matrix`.
    pub fn new(assignment: &[usize], matrix: &ModularityMatrix) -> Self {
        let (assignment, n_communities) = canonical_labels(assignment);
        let modularity = matrix.modularity(&assignment);
        Self {
            assignment,
            n_communities,
            modularity,
        }
    }

    /// Node indices of each community, communities in label order.
    pub fn communities(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_communities];
        for (node, &c) in self.assignment.iter().enumerate() {
            out[c].push(node);
        }
        out
    }
}

/// Relabel so that labels appear as 0, 1, 2, … scanning nodes in order.
pub fn canonical_labels(assignment: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let labels = assignment
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect();
    (labels, map.len())
}

fn check_square_symmetric(a: &Array2<f64>) -> Result<(), CommunityError> {
    let (n, m) = a.dim();
    if n != m {
        return Err(CommunityError::NotSquare(n, m));
    }
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !a[[i, j]].is_finite() {
                return Err(CommunityError::NonFinite(i, j));
            }
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if worst > 1e-10 {
        return Err(CommunityError::NotSymmetric(worst));
    }
    Ok(())
}

fn check_adjacency(a: &Array2<f64>) -> Result<f64, CommunityError> {
    check_square_symmetric(a)?;
    for ((row, col), &value) in a.indexed_iter() {
        if value < 0.0 {
            return Err(CommunityError::Negative { row, col, value });
        }
        if row == col && value != 0.0 {
            return Err(CommunityError::NonZeroDiagonal(row));
        }
    }
    let total = a.sum();
    if total <= 0.0 {
        return Err(CommunityError::ZeroWeight);
    }
    Ok(total)
}

/// Configuration-model modularity of a weighted undirected graph.
pub fn build_modularity_configuration(adjacency: &Array2<f64>) -> Result<ModularityMatrix, CommunityError> {
    let two_l = check_adjacency(adjacency)?;
    let k: Vec<f64> = adjacency.rows().into_iter().map(|r| r.sum()).collect();
    let n = k.len();
    let b = Array2::from_shape_fn((n, n), |(i, j)| adjacency[[i, j]] - k[i] * k[j] / two_l);
    Ok(ModularityMatrix {
        b_matrix: b,
        norm: two_l,
        kind: ModularityKind::Configuration,
    })
}

/// Modularity without a null model: `B = A`, normalised by its total.
pub fn build_modularity_plain(adjacency: &Array2<f64>) -> Result<ModularityMatrix, CommunityError> {
    let total = check_adjacency(adjacency)?;
    Ok(ModularityMatrix {
        b_matrix: adjacency.clone(),
        norm: total,
        kind: ModularityKind::Plain,
    })
}

/// RMT-filtered modularity: `B = C^(g)` (zero diagonal), normalised by
/// `c_norm = Σ_ij C_ij` of the unfiltered correlation matrix.
pub fn build_modularity_filtered(
    structural: &Array2<f64>,
    c_norm: f64,
) -> Result<ModularityMatrix, CommunityError> {
    check_square_symmetric(structural)?;
    if !(c_norm > 0.0) || !c_norm.is_finite() {
        return Err(CommunityError::BadNorm(c_norm));
    }
    let mut b = structural.clone();
    b.diag_mut().fill(0.0);
    Ok(ModularityMatrix {
        b_matrix: b,
        norm: c_norm,
        kind: ModularityKind::RmtFiltered,
    })
}

/// [`build_modularity_filtered`] from a decomposition, with `C` rebuilt from
/// its three parts.
pub fn modularity_from_rmt(decomposition: &RmtDecomposition) -> Result<ModularityMatrix, CommunityError> {
    let c_norm = decomposition.noise_part.sum()
        + decomposition.market_part.sum()
        + decomposition.structural_part.sum();
    build_modularity_filtered(&decomposition.structural_part, c_norm)
}

/// `(A + Aᵀ)/2` with the diagonal zeroed.
pub fn symmetrize_attention(attention: &Array2<f64>) -> Array2<f64> {
    let mut out = (attention + &attention.t()) * 0.5;
    out.diag_mut().fill(0.0);
    out
}

/// Louvain-style optimisation of `matrix`; node visit order comes from `seed`.
pub fn detect_communities(matrix: &ModularityMatrix, seed: u64) -> Partition {
    let n = matrix.n();
    if n == 0 {
        return Partition {
            assignment: Vec::new(),
            n_communities: 0,
            modularity: 0.0,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Rows with no weight at all carry no signal and stay singletons.
    let mut frozen: Vec<bool> = matrix
        .b_matrix
        .rows()
        .into_iter()
        .map(|r| r.iter().all(|&x| x == 0.0))
        .collect();

    let mut membership: Vec<usize> = (0..n).collect();
    let mut weights = matrix.b_matrix.clone();
    for _ in 0..MAX_PASSES {
        let comm = local_moves(&weights, &frozen, matrix.norm, &mut rng);
        let (comm, k) = canonical_labels(&comm);
        for m in membership.iter_mut() {
            *m = comm[*m];
        }
        if k == weights.nrows() {
            break;
        }
        let mut next = Array2::zeros((k, k));
        for i in 0..weights.nrows() {
            for j in 0..weights.nrows() {
                next[[comm[i], comm[j]]] += weights[[i, j]];
            }
        }
        let mut next_frozen = vec![false; k];
        for (i, &c) in comm.iter().enumerate() {
            if frozen[i] {
                next_frozen[c] = true;
            }
        }
        weights = next;
        frozen = next_frozen;
    }

    // Final node-level sweep from the aggregated solution.
    let node_frozen: Vec<bool> = matrix
        .b_matrix
        .rows()
        .into_iter()
        .map(|r| r.iter().all(|&x| x == 0.0))
        .collect();
    let refined = refine(&matrix.b_matrix, &node_frozen, matrix.norm, membership, &mut rng);
    Partition::new(&refined, matrix)
}

fn local_moves(w: &Array2<f64>, frozen: &[bool], norm: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let start: Vec<usize> = (0..w.nrows()).collect();
    refine(w, frozen, norm, start, rng)
}

/// Greedy single-node moves from `comm` until no move gains more than
/// [`MOVE_TOLERANCE`].
fn refine(
    w: &Array2<f64>,
    frozen: &[bool],
    norm: f64,
    mut comm: Vec<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let k = w.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut size = vec![0usize; k];
    for &c in &comm {
        size[c] += 1;
    }
    // Communities that hold a frozen node accept no one else.
    let mut closed = vec![false; k];
    for i in 0..k {
        if frozen[i] {
            closed[comm[i]] = true;
        }
    }
    let mut acc = vec![0.0; k];
    let mut touched: Vec<usize> = Vec::with_capacity(k);
    let scale = 2.0 / norm;
    // Each accepted move raises Q by more than the tolerance, so this ends;
    // the cap only guards against pathological floating-point cycling.
    for _ in 0..10_000 {
        let mut moved = false;
        for &i in &order {
            if frozen[i] {
                continue;
            }
            touched.clear();
            for j in 0..k {
                let wij = w[[i, j]];
                if j == i || wij == 0.0 {
                    continue;
                }
                let c = comm[j];
                if acc[c] == 0.0 && !touched.contains(&c) {
                    touched.push(c);
                }
                acc[c] += wij;
            }
            let current = comm[i];
            let stay = acc[current];
            let mut best = current;
            let mut best_gain = MOVE_TOLERANCE;
            touched.sort_unstable();
            for &c in &touched {
                if c == current || closed[c] {
                    continue;
                }
                let gain = scale * (acc[c] - stay);
                if gain > best_gain {
                    best_gain = gain;
                    best = c;
                }
            }
            if size[current] > 1 && scale * -stay > best_gain {
                if let Some(empty) = size.iter().position(|&s| s == 0) {
                    best = empty;
                }
            }
            for &c in &touched {
                acc[c] = 0.0;
            }
            acc[current] = 0.0;
            if best != current {
                size[current] -= 1;
                size[best] += 1;
                comm[i] = best;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    comm
}

/// Adjusted Rand index between two labellings of the same nodes.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let (a, ka) = canonical_labels(a);
    let (b, kb) = canonical_labels(b);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(&b) {
        table[x][y] += 1;
    }
    let comb2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| comb2(c)).sum();
    let rows: f64 = table.iter().map(|r| comb2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| comb2(table.iter().map(|r| r[j]).sum())).sum();
    let total = comb2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return if a == b { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// One `window_end, node_name, community_label` line per node.
pub fn partition_lines(window_end: usize, names: &[String], assignment: &[usize]) -> String {
    assert_eq!(names.len(), assignment.len());
    let mut out = String::new();
    for (name, label) in names.iter().zip(assignment) {
        out.push_str(&format!("{window_end}, {name}, {label}\n"));
    }
    out
}
