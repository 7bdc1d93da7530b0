//! Reverse-maximin ordering, nearest-neighbor sparsity patterns, ancestor
//! sets, and the conditional ordering used for prediction points.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::par;

/// Distance metric: Euclidean, optionally in length-scale-transformed space.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    /// Per-dimension length-scales dividing the coordinates; `None` means
    /// plain Euclidean distance.
    pub scales: Option<Vec<f64>>,
}

impl Metric {
    pub fn euclidean() -> Self {
        Metric { scales: None }
    }

    pub fn scaled(scales: Vec<f64>) -> Self {
        Metric {
            scales: Some(scales),
        }
    }

    pub fn dist(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        match &self.scales {
            None => {
                for k in 0..x.len() {
                    let d = x[k] - y[k];
                    s += d * d;
                }
            }
            Some(lam) => {
                for k in 0..x.len() {
                    let d = (x[k] - y[k]) / lam[k];
                    s += d * d;
                }
            }
        }
        s.sqrt()
    }
}

/// Input points in reverse-maximin order together with their scale lengths.
///
/// `scales[i]` is the distance from the `i`th ordered point to its nearest
/// subsequently ordered point; it is non-decreasing in `i` and infinite for
/// the last point. `perm[i]` is the original row of the `i`th ordered point.
#[derive(Debug, Clone)]
pub struct OrderedDesign {
    pub points: Vec<Vec<f64>>,
    pub perm: Vec<usize>,
    pub scales: Vec<f64>,
    pub metric: Metric,
}

impl OrderedDesign {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }
}

/// Test points in conditional reverse-maximin order. Unlike a training
/// design, the last scale is finite whenever training points exist.
#[derive(Debug, Clone)]
pub struct PredictionOrdering {
    pub points: Vec<Vec<f64>>,
    pub perm: Vec<usize>,
    pub scales: Vec<f64>,
}

/// Role tag of a sparsity pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    Prior,
    Posterior,
    ReducedAncestor,
    FullAncestor,
    Prediction,
    PredictionReducedAncestor,
}

/// Lower-triangular column-wise index sets.
///
/// `cols[i]` is strictly increasing and starts at `i`. For prediction
/// patterns the index space (`dim`) is larger than the number of columns:
/// test indices come first, then training indices offset by the number of
/// test points.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    dim: usize,
    cols: Vec<Vec<usize>>,
    pub kind: PatternKind,
}

impl SparsityPattern {
    pub fn new(dim: usize, cols: Vec<Vec<usize>>, kind: PatternKind) -> Result<Self> {
        for (i, c) in cols.iter().enumerate() {
            if c.first() != Some(&i) {
                return Err(Error::ShapeMismatch(format!(
                    "pattern column {i} must start at its own index"
                )));
            }
            if !c.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::ShapeMismatch(format!(
                    "pattern column {i} not strictly increasing"
                )));
            }
            if *c.last().unwrap() >= dim {
                return Err(Error::ShapeMismatch(format!(
                    "pattern column {i} exceeds dimension {dim}"
                )));
            }
        }
        Ok(SparsityPattern { dim, cols, kind })
    }

    /// Diagonal-only pattern (the DKL-D posterior structure).
    pub fn diagonal(n: usize) -> Self {
        SparsityPattern {
            dim: n,
            cols: (0..n).map(|i| vec![i]).collect(),
            kind: PatternKind::Posterior,
        }
    }

    /// Full lower triangle.
    pub fn full(n: usize, kind: PatternKind) -> Self {
        SparsityPattern {
            dim: n,
            cols: (0..n).map(|i| (i..n).collect()).collect(),
            kind,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn col(&self, i: usize) -> &[usize] {
        &self.cols[i]
    }

    /// Off-diagonal members of column `i`, matching the presentation used in
    /// diagnostics (the diagonal element is implied).
    pub fn col_off_diagonal(&self, i: usize) -> &[usize] {
        &self.cols[i][1..]
    }

    pub fn mean_col_size(&self) -> f64 {
        let total: usize = self.cols.iter().map(|c| c.len()).sum();
        total as f64 / self.cols.len() as f64
    }

    /// Write one line per column: space-separated ascending 1-based indices.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for c in &self.cols {
            let line: Vec<String> = c.iter().map(|&j| (j + 1).to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// Read the text format written by `write_text`.
    pub fn read_text<R: BufRead>(r: R, dim: usize, kind: PatternKind) -> Result<Self> {
        let mut cols = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let col: Vec<usize> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| Error::Config(format!("bad pattern index {t:?}: {e}")))
                        .and_then(|v| {
                            if v == 0 {
                                Err(Error::Config("pattern indices are 1-based".into()))
                            } else {
                                Ok(v - 1)
                            }
                        })
                })
                .collect::<Result<_>>()?;
            cols.push(col);
        }
        SparsityPattern::new(dim, cols, kind)
    }
}

/// Pattern variant selecting the approximation structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatternVariant {
    /// Nearest-neighbor prior and posterior patterns at scale factor `rho`.
    NearestNeighbor { rho: f64 },
    /// Nearest-neighbor prior, diagonal (mean-field) posterior.
    Diagonal { rho: f64 },
    /// Every column conditions on the `m` last-ordered (coarsest) points.
    Global { m: usize },
}

impl PatternVariant {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PatternVariant::NearestNeighbor { rho } | PatternVariant::Diagonal { rho } => {
                if !(rho >= 1.0) {
                    return Err(Error::Config(format!("rho must be >= 1, got {rho}")));
                }
            }
            PatternVariant::Global { m } => {
                if m < 1 {
                    return Err(Error::Config("global pattern needs m >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// The scale factor used for geometric sets, if the variant has one.
    pub fn rho(&self) -> Option<f64> {
        match *self {
            PatternVariant::NearestNeighbor { rho } | PatternVariant::Diagonal { rho } => Some(rho),
            PatternVariant::Global { .. } => None,
        }
    }
}

fn midrange_anchor(points: &[Vec<f64>], metric: &Metric) -> usize {
    let d = points[0].len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in points {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mid: Vec<f64> = (0..d).map(|k| 0.5 * (lo[k] + hi[k])).collect();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let dd = metric.dist(p, &mid);
        if dd < best_d {
            best_d = dd;
            best = i;
        }
    }
    best
}

/// Reverse-maximin ordering of `points` under `metric`.
///
/// The last index is `anchor` if given, otherwise the point nearest the
/// coordinate-wise midrange of the design. Earlier indices are selected
/// greedily to maximize the minimum distance to all later indices; ties go to
/// the smallest original row index.
pub fn reverse_maximin_order(
    points: &[Vec<f64>],
    metric: &Metric,
    anchor: Option<usize>,
) -> Result<OrderedDesign> {
    let n = points.len();
    if n == 0 {
        return Err(Error::ShapeMismatch("empty design".into()));
    }
    let anchor = anchor.unwrap_or_else(|| midrange_anchor(points, metric));
    let mut order = vec![usize::MAX; n];
    let mut scales = vec![0.0f64; n];
    let mut selected = vec![false; n];
    let mut mind = vec![f64::INFINITY; n];

    order[n - 1] = anchor;
    scales[n - 1] = f64::INFINITY;
    selected[anchor] = true;
    for i in 0..n {
        if !selected[i] {
            mind[i] = metric.dist(&points[i], &points[anchor]);
        }
    }
    for k in (0..n.saturating_sub(1)).rev() {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !selected[i] && mind[i] > best_d {
                best_d = mind[i];
                best = i;
            }
        }
        if best_d <= 0.0 {
            // A remaining point coincides with a selected one.
            let partner = order[(k + 1)..]
                .iter()
                .copied()
                .find(|&j| metric.dist(&points[best], &points[j]) == 0.0)
                .unwrap_or(best);
            return Err(Error::DuplicatePoints(best.min(partner), best.max(partner)));
        }
        order[k] = best;
        scales[k] = best_d;
        selected[best] = true;
        for i in 0..n {
            if !selected[i] {
                let d = metric.dist(&points[i], &points[best]);
                if d < mind[i] {
                    mind[i] = d;
                }
            }
        }
    }
    let ordered: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    Ok(OrderedDesign {
        points: ordered,
        perm: order,
        scales,
        metric: metric.clone(),
    })
}

/// Nearest-neighbor sparsity pattern: column `i` holds the later-ordered
/// points within `rho * scales[i]` of point `i`.
pub fn neighbor_pattern(design: &OrderedDesign, rho: f64) -> SparsityPattern {
    let n = design.len();
    let cols = par::map_indexed(n, |i| {
        let radius = rho * design.scales[i];
        let mut col = vec![i];
        for j in (i + 1)..n {
            if design.metric.dist(&design.points[i], &design.points[j]) <= radius {
                col.push(j);
            }
        }
        col
    });
    SparsityPattern {
        dim: n,
        cols,
        kind: PatternKind::Prior,
    }
}

/// Reduced ancestor sets: column `i` holds the later-ordered points `j` with
/// `dist(x_i, x_j) <= rho * scales[j]` (the radius grows with the ancestor's
/// own scale, so these are supersets of the neighbor-pattern columns).
pub fn reduced_ancestors(design: &OrderedDesign, rho: f64) -> SparsityPattern {
    let n = design.len();
    let cols = par::map_indexed(n, |i| {
        let mut col = vec![i];
        for j in (i + 1)..n {
            if design.metric.dist(&design.points[i], &design.points[j]) <= rho * design.scales[j] {
                col.push(j);
            }
        }
        col
    });
    SparsityPattern {
        dim: n,
        cols,
        kind: PatternKind::ReducedAncestor,
    }
}

/// Full ancestor set of column `i`: everything that reaches `sp.col(i)` along
/// edges of the DAG given by the off-diagonal entries of `sq`, plus
/// `sp.col(i)` itself. Computed by reverse breadth-first reachability.
pub fn full_ancestors(sp: &SparsityPattern, sq: &SparsityPattern) -> Result<SparsityPattern> {
    if sp.dim() != sq.dim() || sp.num_cols() != sq.num_cols() {
        return Err(Error::ShapeMismatch(
            "prior and posterior patterns must share a dimension".into(),
        ));
    }
    let n = sp.dim();
    let cols = par::map_indexed(n, |i| full_ancestor_column(sp, sq, i));
    Ok(SparsityPattern {
        dim: n,
        cols,
        kind: PatternKind::FullAncestor,
    })
}

/// The full ancestor set of a single column; used directly when only a sample
/// of columns is needed.
pub fn full_ancestor_column(sp: &SparsityPattern, sq: &SparsityPattern, i: usize) -> Vec<usize> {
    let n = sq.dim();
    let mut seen = vec![false; n];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for &l in sp.col(i) {
        if !seen[l] {
            seen[l] = true;
            queue.push_back(l);
        }
    }
    while let Some(l) = queue.pop_front() {
        for &j in sq.col_off_diagonal(l) {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    (0..n).filter(|&j| seen[j]).collect()
}

/// Conditional reverse-maximin ordering of test points given a training
/// design. Each scale is the minimum of the distance to later-ordered test
/// points and the distance to the nearest training point.
pub fn prediction_ordering(
    design: &OrderedDesign,
    test_points: &[Vec<f64>],
    metric: &Metric,
) -> Result<PredictionOrdering> {
    let m = test_points.len();
    if m == 0 {
        return Err(Error::ShapeMismatch("no test points".into()));
    }
    if design.is_empty() {
        let d = reverse_maximin_order(test_points, metric, None)?;
        return Ok(PredictionOrdering {
            points: d.points,
            perm: d.perm,
            scales: d.scales,
        });
    }
    let mut mind = vec![f64::INFINITY; m];
    for (i, t) in test_points.iter().enumerate() {
        for x in &design.points {
            let d = metric.dist(t, x);
            if d < mind[i] {
                mind[i] = d;
            }
        }
        if mind[i] == 0.0 {
            return Err(Error::DuplicatePoints(i, i));
        }
    }
    let mut order = vec![usize::MAX; m];
    let mut scales = vec![0.0f64; m];
    let mut selected = vec![false; m];
    for k in (0..m).rev() {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..m {
            if !selected[i] && mind[i] > best_d {
                best_d = mind[i];
                best = i;
            }
        }
        if best_d <= 0.0 {
            let partner = order[(k + 1)..]
                .iter()
                .copied()
                .find(|&j| metric.dist(&test_points[best], &test_points[j]) == 0.0)
                .unwrap_or(best);
            return Err(Error::DuplicatePoints(best.min(partner), best.max(partner)));
        }
        order[k] = best;
        scales[k] = best_d;
        selected[best] = true;
        for i in 0..m {
            if !selected[i] {
                let d = metric.dist(&test_points[i], &test_points[best]);
                if d < mind[i] {
                    mind[i] = d;
                }
            }
        }
    }
    let points: Vec<Vec<f64>> = order.iter().map(|&i| test_points[i].clone()).collect();
    Ok(PredictionOrdering {
        points,
        perm: order,
        scales,
    })
}

/// Sparsity pattern and reduced ancestor sets for prediction columns over the
/// joint index space (test indices first, then training indices offset by the
/// number of test points).
pub fn prediction_patterns(
    test: &PredictionOrdering,
    design: &OrderedDesign,
    rho: f64,
) -> (SparsityPattern, SparsityPattern) {
    let m = test.points.len();
    let n = design.len();
    let metric = &design.metric;
    let s_cols = par::map_indexed(m, |i| {
        let radius = rho * test.scales[i];
        let mut col = vec![i];
        for j in (i + 1)..m {
            if metric.dist(&test.points[i], &test.points[j]) <= radius {
                col.push(j);
            }
        }
        for j in 0..n {
            if metric.dist(&test.points[i], &design.points[j]) <= radius {
                col.push(m + j);
            }
        }
        col
    });
    let a_cols = par::map_indexed(m, |i| {
        let mut col = vec![i];
        for j in (i + 1)..m {
            if metric.dist(&test.points[i], &test.points[j]) <= rho * test.scales[j] {
                col.push(j);
            }
        }
        for j in 0..n {
            if metric.dist(&test.points[i], &design.points[j]) <= rho * design.scales[j] {
                col.push(m + j);
            }
        }
        col
    });
    (
        SparsityPattern {
            dim: m + n,
            cols: s_cols,
            kind: PatternKind::Prediction,
        },
        SparsityPattern {
            dim: m + n,
            cols: a_cols,
            kind: PatternKind::PredictionReducedAncestor,
        },
    )
}

/// Build the prior/posterior pattern pair for a variant.
pub fn variant_patterns(
    design: &OrderedDesign,
    variant: PatternVariant,
) -> (SparsityPattern, SparsityPattern) {
    let n = design.len();
    match variant {
        PatternVariant::NearestNeighbor { rho } => {
            let sp = neighbor_pattern(design, rho);
            let mut sq = sp.clone();
            sq.kind = PatternKind::Posterior;
            (sp, sq)
        }
        PatternVariant::Diagonal { rho } => {
            let sp = neighbor_pattern(design, rho);
            (sp, SparsityPattern::diagonal(n))
        }
        PatternVariant::Global { m } => {
            let first_coarse = n.saturating_sub(m);
            let cols: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut col = vec![i];
                    col.extend((first_coarse.max(i + 1)..n).filter(|&j| j > i));
                    col
                })
                .collect();
            let sp = SparsityPattern {
                dim: n,
                cols,
                kind: PatternKind::Prior,
            };
            let mut sq = sp.clone();
            sq.kind = PatternKind::Posterior;
            (sp, sq)
        }
    }
}
