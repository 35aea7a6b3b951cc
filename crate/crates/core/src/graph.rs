//! Per-subject networks, sparsification rules and graph feature curves.
//!
//! Adjacency weights live in `[0, 1]`. Sparsified graphs are binary: an edge
//! either survives the threshold or it does not, and the features are
//! computed on that topology only.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used for symmetry checks on input matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Tolerance when matching a threshold value against grid points.
pub const GRID_TOL: f64 = 1e-9;

/// How negative correlations are mapped into edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NegativePolicy {
    /// `max(c, 0)`
    #[default]
    Zero,
    /// `|c|`
    Absolute,
}

impl FromStr for NegativePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" => Ok(NegativePolicy::Zero),
            "absolute" | "abs" => Ok(NegativePolicy::Absolute),
            other => Err(Error::InvalidInput(format!(
                "unknown negative policy '{other}' (expected zero|absolute)"
            ))),
        }
    }
}

impl fmt::Display for NegativePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativePolicy::Zero => "zero",
            NegativePolicy::Absolute => "absolute",
        })
    }
}

/// Graph feature evaluated on a sparsified network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Mean local clustering coefficient.
    #[default]
    Cc,
    /// Characteristic path length over connected pairs.
    Cpl,
}

impl FeatureKind {
    pub fn evaluate(self, graph: &BinaryGraph) -> Result<f64> {
        match self {
            FeatureKind::Cc => clustering_coefficient(graph),
            FeatureKind::Cpl => Ok(characteristic_path_length(graph)),
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cc" => Ok(FeatureKind::Cc),
            "cpl" => Ok(FeatureKind::Cpl),
            other => Err(Error::InvalidInput(format!(
                "unknown feature '{other}' (expected cc|cpl)"
            ))),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Cc => "cc",
            FeatureKind::Cpl => "cpl",
        })
    }
}

/// Sparsification rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Keep edges with weight `>= t`.
    #[default]
    Weight,
    /// Keep the `round((1 - t) * p(p-1)/2)` strongest edges (`t` is sparsity).
    Density,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weight" => Ok(Strategy::Weight),
            "density" => Ok(Strategy::Density),
            other => Err(Error::InvalidInput(format!(
                "unknown strategy '{other}' (expected weight|density)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Weight => "weight",
            Strategy::Density => "density",
        })
    }
}

/// Strictly increasing threshold values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdGrid {
    values: Vec<f64>,
}

impl ThresholdGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("threshold grid is empty".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!(
                    "grid value {v} at index {i} is outside [0, 1]"
                )));
            }
            if i > 0 && v <= values[i - 1] {
                return Err(Error::InvalidInput(format!(
                    "grid is not strictly increasing at index {i}"
                )));
            }
        }
        Ok(Self { values })
    }

    /// `{0, 1/n, 2/n, ..., 1}`, computed as `i / n` so grid points are exact
    /// decimal neighbours (0.07 rather than 7 * 0.01).
    pub fn uniform(intervals: usize) -> Self {
        let n = intervals.max(1);
        Self {
            values: (0..=n).map(|i| i as f64 / n as f64).collect(),
        }
    }

    /// Uniform grid with the given step; `1 / step` must be an integer.
    pub fn from_step(step: f64) -> Result<Self> {
        if !(step > 0.0 && step <= 1.0) {
            return Err(Error::Domain(format!("grid step {step} not in (0, 1]")));
        }
        let n = (1.0 / step).round();
        if ((1.0 / step) - n).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "grid step {step} does not divide [0, 1] evenly"
            )));
        }
        Ok(Self::uniform(n as usize))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the grid point equal to `t` (within [`GRID_TOL`]).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.nearest_index(t);
        ((self.values[i] - t).abs() <= GRID_TOL).then_some(i)
    }

    /// Index of the closest grid point; ties go to the smaller value.
    pub fn nearest_index(&self, t: f64) -> usize {
        let pos = self.values.partition_point(|&v| v < t);
        if pos == 0 {
            0
        } else if pos == self.values.len() {
            pos - 1
        } else if (self.values[pos] - t) < (t - self.values[pos - 1]) {
            pos
        } else {
            pos - 1
        }
    }

    /// Grid values in the closed interval `[lo, hi]`.
    pub fn between(&self, lo: f64, hi: f64) -> Vec<f64> {
        self.values
            .iter()
            .copied()
            .filter(|&v| v >= lo - GRID_TOL && v <= hi + GRID_TOL)
            .collect()
    }

    /// Map each value of `subset` to its grid index.
    pub fn indices_of(&self, subset: &[f64]) -> Result<Vec<usize>> {
        subset
            .iter()
            .map(|&t| {
                self.index_of(t).ok_or_else(|| {
                    Error::GridMismatch(format!("threshold {t} is not a grid point"))
                })
            })
            .collect()
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self::uniform(100)
    }
}

impl TryFrom<Vec<f64>> for ThresholdGrid {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ThresholdGrid> for Vec<f64> {
    fn from(grid: ThresholdGrid) -> Self {
        grid.values
    }
}

/// Symmetric `p x p` edge weights in `[0, 1]` for one subject. The diagonal is
/// stored as zero and never consulted.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub subject_id: String,
    weights: DMatrix<f64>,
}

impl AdjacencyMatrix {
    pub fn new(subject_id: impl Into<String>, mut weights: DMatrix<f64>) -> Result<Self> {
        check_square(&weights)?;
        let p = weights.nrows();
        for r in 0..p {
            for s in 0..p {
                let w = weights[(r, s)];
                if !w.is_finite() {
                    return Err(Error::NonFinite { row: r, col: s });
                }
                if r != s && !(0.0..=1.0).contains(&w) {
                    return Err(Error::OutOfRange {
                        row: r,
                        col: s,
                        value: w,
                        lo: 0.0,
                        hi: 1.0,
                    });
                }
            }
        }
        check_symmetric(&weights)?;
        for r in 0..p {
            weights[(r, r)] = 0.0;
            for s in (r + 1)..p {
                weights[(s, r)] = weights[(r, s)];
            }
        }
        Ok(Self {
            subject_id: subject_id.into(),
            weights,
        })
    }

    /// Map a correlation matrix to edge weights under `policy`.
    pub fn from_correlation(
        subject_id: impl Into<String>,
        corr: &DMatrix<f64>,
        policy: NegativePolicy,
    ) -> Result<Self> {
        check_square(corr)?;
        let p = corr.nrows();
        for r in 0..p {
            for s in 0..p {
                let c = corr[(r, s)];
                if c.is_nan() || c.is_infinite() {
                    return Err(Error::NonFinite { row: r, col: s });
                }
                if r != s && !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&c) {
                    return Err(Error::OutOfRange {
                        row: r,
                        col: s,
                        value: c,
                        lo: -1.0,
                        hi: 1.0,
                    });
                }
            }
        }
        check_symmetric(corr)?;
        let mut weights = DMatrix::zeros(p, p);
        for r in 0..p {
            for s in (r + 1)..p {
                let c = corr[(r, s)].clamp(-1.0, 1.0);
                let w = match policy {
                    NegativePolicy::Zero => c.max(0.0),
                    NegativePolicy::Absolute => c.abs(),
                };
                weights[(r, s)] = w;
                weights[(s, r)] = w;
            }
        }
        Ok(Self {
            subject_id: subject_id.into(),
            weights,
        })
    }

    pub fn p(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weight(&self, r: usize, s: usize) -> f64 {
        self.weights[(r, s)]
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Upper-triangle pairs ordered by weight (descending), then `(r, s)`
    /// lexicographically. Both thresholding rules keep a prefix of this list.
    pub fn ranked_pairs(&self) -> Vec<RankedPair> {
        let p = self.p();
        let mut pairs = Vec::with_capacity(p * p.saturating_sub(1) / 2);
        for r in 0..p {
            for s in (r + 1)..p {
                pairs.push(RankedPair {
                    weight: self.weights[(r, s)],
                    r,
                    s,
                });
            }
        }
        pairs.sort_by(|a, b| {
            b.weight
                .total_cmp(&a.weight)
                .then(a.r.cmp(&b.r))
                .then(a.s.cmp(&b.s))
        });
        pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedPair {
    pub weight: f64,
    pub r: usize,
    pub s: usize,
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let p = m.nrows();
    for r in 0..p {
        for s in (r + 1)..p {
            let (a, b) = (m[(r, s)], m[(s, r)]);
            if (a - b).abs() > SYMMETRY_TOL {
                return Err(Error::NotSymmetric { row: r, col: s, a, b });
            }
        }
    }
    Ok(())
}

/// Undirected simple graph stored as one bitset row per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGraph {
    p: usize,
    words: usize,
    rows: Vec<u64>,
}

impl BinaryGraph {
    pub fn empty(p: usize) -> Self {
        let words = p.div_ceil(64).max(1);
        Self {
            p,
            words,
            rows: vec![0; p * words],
        }
    }

    pub fn complete(p: usize) -> Self {
        let mut g = Self::empty(p);
        for r in 0..p {
            for s in (r + 1)..p {
                g.insert(r, s);
            }
        }
        g
    }

    pub fn from_edges<I>(p: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut g = Self::empty(p);
        for (r, s) in edges {
            if r >= p || s >= p {
                return Err(Error::InvalidInput(format!(
                    "edge ({r}, {s}) out of range for {p} nodes"
                )));
            }
            if r == s {
                return Err(Error::InvalidInput(format!("self-loop at node {r}")));
            }
            g.insert(r, s);
        }
        Ok(g)
    }

    fn insert(&mut self, r: usize, s: usize) {
        self.rows[r * self.words + s / 64] |= 1 << (s % 64);
        self.rows[s * self.words + r / 64] |= 1 << (r % 64);
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn has_edge(&self, r: usize, s: usize) -> bool {
        r != s && self.rows[r * self.words + s / 64] >> (s % 64) & 1 == 1
    }

    fn row(&self, v: usize) -> &[u64] {
        &self.rows[v * self.words..(v + 1) * self.words]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.row(v).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn edge_count(&self) -> usize {
        (0..self.p).map(|v| self.degree(v)).sum::<usize>() / 2
    }

    /// `|E| / (p(p-1)/2)`; zero for graphs with fewer than two nodes.
    pub fn density(&self) -> f64 {
        let pairs = self.p * self.p.saturating_sub(1) / 2;
        if pairs == 0 {
            0.0
        } else {
            self.edge_count() as f64 / pairs as f64
        }
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        bits(self.row(v))
    }

    /// Edges as `(r, s)` with `r < s`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for r in 0..self.p {
            out.extend(self.neighbors(r).filter(|&s| s > r).map(|s| (r, s)));
        }
        out
    }
}

fn bits(words: &[u64]) -> impl Iterator<Item = usize> + '_ {
    words.iter().enumerate().flat_map(|(wi, &w)| {
        let mut w = w;
        std::iter::from_fn(move || {
            if w == 0 {
                return None;
            }
            let b = w.trailing_zeros() as usize;
            w &= w - 1;
            Some(wi * 64 + b)
        })
    })
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("threshold {t} is outside [0, 1]")));
    }
    Ok(())
}

/// Keep every pair with weight `>= t`; `t = 0` gives the complete graph.
pub fn threshold_weight(adj: &AdjacencyMatrix, t: f64) -> Result<BinaryGraph> {
    check_threshold(t)?;
    let p = adj.p();
    let mut g = BinaryGraph::empty(p);
    for r in 0..p {
        for s in (r + 1)..p {
            if adj.weight(r, s) >= t {
                g.insert(r, s);
            }
        }
    }
    Ok(g)
}

/// Number of edges retained at sparsity `t` on `p` nodes.
pub fn density_edge_count(p: usize, t: f64) -> usize {
    let pairs = (p * p.saturating_sub(1) / 2) as f64;
    ((1.0 - t) * pairs).round().clamp(0.0, pairs) as usize
}

/// Keep the `round((1 - t) * p(p-1)/2)` strongest pairs.
pub fn threshold_density(adj: &AdjacencyMatrix, t: f64) -> Result<BinaryGraph> {
    check_threshold(t)?;
    let k = density_edge_count(adj.p(), t);
    let mut g = BinaryGraph::empty(adj.p());
    for pair in adj.ranked_pairs().into_iter().take(k) {
        g.insert(pair.r, pair.s);
    }
    Ok(g)
}

/// Mean local clustering coefficient; nodes with degree < 2 contribute 0.
pub fn clustering_coefficient(g: &BinaryGraph) -> Result<f64> {
    if g.p < 3 {
        return Err(Error::Domain(format!(
            "clustering coefficient needs at least 3 nodes, got {}",
            g.p
        )));
    }
    let mut total = 0.0;
    for v in 0..g.p {
        let d = g.degree(v);
        if d < 2 {
            continue;
        }
        let nv = g.row(v);
        // each neighbour-neighbour link is seen from both ends
        let twice_links: u32 = g
            .neighbors(v)
            .map(|u| {
                g.row(u)
                    .iter()
                    .zip(nv)
                    .map(|(a, b)| (a & b).count_ones())
                    .sum::<u32>()
            })
            .sum();
        total += twice_links as f64 / (d * (d - 1)) as f64;
    }
    Ok(total / g.p as f64)
}

/// Mean shortest-path length over connected unordered pairs; 0 when no pair
/// is connected.
pub fn characteristic_path_length(g: &BinaryGraph) -> f64 {
    let w = g.words;
    let mut dist_sum: u64 = 0;
    let mut pairs: u64 = 0;
    let mut visited = vec![0u64; w];
    let mut frontier = vec![0u64; w];
    let mut next = vec![0u64; w];
    for src in 0..g.p {
        visited.fill(0);
        frontier.fill(0);
        visited[src / 64] |= 1 << (src % 64);
        frontier[src / 64] |= 1 << (src % 64);
        let mut depth = 0u64;
        loop {
            next.fill(0);
            for v in bits(&frontier) {
                for (n, r) in next.iter_mut().zip(g.row(v)) {
                    *n |= r;
                }
            }
            let mut found = 0u64;
            for (n, vis) in next.iter_mut().zip(visited.iter_mut()) {
                *n &= !*vis;
                *vis |= *n;
                found += n.count_ones() as u64;
            }
            if found == 0 {
                break;
            }
            depth += 1;
            dist_sum += depth * found;
            pairs += found;
            std::mem::swap(&mut frontier, &mut next);
        }
    }
    if pairs == 0 {
        0.0
    } else {
        // ordered pairs: both sums are doubled, so the ratio is unchanged
        dist_sum as f64 / pairs as f64
    }
}

/// A graph feature evaluated at every point of a threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCurve {
    pub grid: ThresholdGrid,
    pub values: Vec<f64>,
    pub feature: FeatureKind,
    pub strategy: Strategy,
}

impl FeatureCurve {
    pub fn new(
        grid: ThresholdGrid,
        values: Vec<f64>,
        feature: FeatureKind,
        strategy: Strategy,
    ) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "curve has {} values for a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!(
                "curve value {} at index {i} is not a finite non-negative number",
                values[i]
            )));
        }
        Ok(Self {
            grid,
            values,
            feature,
            strategy,
        })
    }

    pub fn at(&self, t: f64) -> Option<f64> {
        self.grid.index_of(t).map(|i| self.values[i])
    }
}

/// Evaluate `feature` on the sparsified graph at every grid point.
///
/// Both rules keep a prefix of [`AdjacencyMatrix::ranked_pairs`], so the sweep
/// walks the grid from the largest threshold down and only adds edges.
pub fn feature_curve(
    adj: &AdjacencyMatrix,
    feature: FeatureKind,
    strategy: Strategy,
    grid: &ThresholdGrid,
) -> Result<FeatureCurve> {
    let ranked = adj.ranked_pairs();
    let p = adj.p();
    let mut g = BinaryGraph::empty(p);
    let mut added = 0usize;
    let mut values = vec![0.0; grid.len()];
    for (j, &t) in grid.values().iter().enumerate().rev() {
        let k = match strategy {
            Strategy::Weight => ranked.partition_point(|e| e.weight >= t),
            Strategy::Density => density_edge_count(p, t),
        };
        debug_assert!(k >= added);
        for e in &ranked[added..k] {
            g.insert(e.r, e.s);
        }
        added = k;
        values[j] = feature.evaluate(&g)?;
    }
    FeatureCurve::new(grid.clone(), values, feature, strategy)
}
