//! Discrete probability objects: densities on uniform 1-D grids, categorical
//! PMFs, and labeled tabular datasets.
//!
//! Grid densities carry probability *density* values at the grid nodes, so
//! every mass computation weights by the cell width `dx`. The kernel density
//! estimator normalizes each sample's kernel over the grid, which makes the
//! estimate integrate to exactly one on the grid no matter how much kernel
//! mass would fall outside it.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Relative bandwidth below which the KDE kernel is treated as degenerate.
const MIN_RELATIVE_BANDWIDTH: f64 = 1e-12;

/// Uniform grid of `n >= 2` points covering `[lo, hi]` inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    lo: f64,
    hi: f64,
    n: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidInput("grid endpoints must be finite".into()));
        }
        if hi <= lo {
            return Err(Error::InvalidInput(format!(
                "grid needs hi > lo, got [{lo}, {hi}]"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidInput(format!("grid needs n >= 2 points, got {n}")));
        }
        Ok(Grid { lo, hi, n })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cell width `(hi - lo) / (n - 1)`.
    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        debug_assert!(k < self.n);
        self.lo + k as f64 * self.dx()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.point(k)).collect()
    }
}

/// Probability density sampled on a [`Grid`]; `sum(values) * dx == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: Grid,
    values: Vec<f64>,
}

impl GridDensity {
    /// Mass tolerance accepted by the constructor.
    pub const MASS_TOL: f64 = 1e-9;

    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} points but {} values were given",
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "grid density values must be finite and non-negative".into(),
            ));
        }
        let mass: f64 = values.iter().sum::<f64>() * grid.dx();
        if (mass - 1.0).abs() > Self::MASS_TOL {
            return Err(Error::InvalidInput(format!(
                "grid density mass is {mass}, expected 1 within {}",
                Self::MASS_TOL
            )));
        }
        Ok(GridDensity { grid, values })
    }

    /// Normalizes arbitrary non-negative values into a unit-mass density.
    pub fn from_unnormalized(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} points but {} values were given",
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "grid density values must be finite and non-negative".into(),
            ));
        }
        let mass: f64 = values.iter().sum::<f64>() * grid.dx();
        if mass <= 0.0 {
            return Err(Error::InvalidInput("cannot normalize an all-zero density".into()));
        }
        let values = values.iter().map(|v| v / mass).collect();
        Ok(GridDensity { grid, values })
    }

    /// Uniform density: constant `1 / (n * dx)` at every node.
    pub fn uniform(grid: Grid) -> Self {
        let v = 1.0 / (grid.len() as f64 * grid.dx());
        GridDensity { grid, values: vec![v; grid.len()] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Writes the `x,value` CSV form.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,value")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", self.grid.point(k), v)?;
        }
        Ok(())
    }

    /// Reads the `x,value` CSV form, reconstructing the grid from the x
    /// column (which must be uniformly spaced and increasing).
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut xs = Vec::new();
        let mut vs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let line = line.trim();
            if i == 0 {
                if line != "x,value" {
                    return Err(Error::Data {
                        line: lineno,
                        message: format!("expected header 'x,value', got '{line}'"),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let (Some(x), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Data {
                    line: lineno,
                    message: "expected exactly two comma-separated fields".into(),
                });
            };
            let x: f64 = x.trim().parse().map_err(|_| Error::Data {
                line: lineno,
                message: format!("bad x value '{x}'"),
            })?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Data {
                line: lineno,
                message: format!("bad density value '{v}'"),
            })?;
            xs.push(x);
            vs.push(v);
        }
        if xs.len() < 2 {
            return Err(Error::Data { line: 0, message: "need at least two grid rows".into() });
        }
        let n = xs.len();
        let grid = Grid::new(xs[0], xs[n - 1], n)?;
        let dx = grid.dx();
        for (k, &x) in xs.iter().enumerate() {
            if (x - grid.point(k)).abs() > 1e-9 * dx.max(1.0) {
                return Err(Error::Data {
                    line: k + 2,
                    message: "x values are not uniformly spaced".into(),
                });
            }
        }
        GridDensity::new(grid, vs)
    }
}

/// Categorical PMF over `K >= 2` outcomes; entries sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPMF {
    probs: Vec<f64>,
}

impl CategoricalPMF {
    /// Sum tolerance accepted by the constructor.
    pub const MASS_TOL: f64 = 1e-12;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "pmf needs at least 2 outcomes, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("pmf entries must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::MASS_TOL {
            return Err(Error::InvalidInput(format!(
                "pmf sums to {sum}, expected 1 within {}",
                Self::MASS_TOL
            )));
        }
        Ok(CategoricalPMF { probs })
    }

    /// Normalizes non-negative weights with positive total into a PMF.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "pmf needs at least 2 outcomes, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidInput("weights must have positive total".into()));
        }
        Ok(CategoricalPMF { probs: weights.iter().map(|w| w / sum).collect() })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput(format!("pmf needs at least 2 outcomes, got {k}")));
        }
        Ok(CategoricalPMF { probs: vec![1.0 / k as f64; k] })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Common access used by the divergence and mixture routines: a vector of
/// non-negative masses plus the cell width that converts node values into
/// probabilities (`dx` for grid densities, `1` for PMFs).
pub trait DiscreteDensity: Sized + Clone {
    fn masses(&self) -> &[f64];
    fn cell(&self) -> f64;
    fn same_support(&self, other: &Self) -> bool;
    /// Describes the support for error messages.
    fn support_label(&self) -> String;
    /// Builds a new density on the same support from raw node values that
    /// already satisfy the unit-mass invariant (up to rounding).
    fn with_masses(&self, masses: Vec<f64>) -> Result<Self>;
}

impl DiscreteDensity for GridDensity {
    fn masses(&self) -> &[f64] {
        &self.values
    }

    fn cell(&self) -> f64 {
        self.grid.dx()
    }

    fn same_support(&self, other: &Self) -> bool {
        self.grid == other.grid
    }

    fn support_label(&self) -> String {
        format!("grid [{}, {}] with {} points", self.grid.lo, self.grid.hi, self.grid.n)
    }

    fn with_masses(&self, masses: Vec<f64>) -> Result<Self> {
        GridDensity::new(self.grid, masses)
    }
}

impl DiscreteDensity for CategoricalPMF {
    fn masses(&self) -> &[f64] {
        &self.probs
    }

    fn cell(&self) -> f64 {
        1.0
    }

    fn same_support(&self, other: &Self) -> bool {
        self.probs.len() == other.probs.len()
    }

    fn support_label(&self) -> String {
        format!("pmf over {} outcomes", self.probs.len())
    }

    fn with_masses(&self, masses: Vec<f64>) -> Result<Self> {
        CategoricalPMF::new(masses)
    }
}

pub(crate) fn check_same_support<D: DiscreteDensity>(p: &D, q: &D) -> Result<()> {
    if !p.same_support(q) {
        return Err(Error::SupportMismatch(format!(
            "{} vs {}",
            p.support_label(),
            q.support_label()
        )));
    }
    Ok(())
}

/// Gaussian KDE with per-sample grid normalization:
/// each sample's kernel is renormalized to unit mass *on the grid*, so the
/// returned density integrates to one exactly.
///
/// Bandwidths below `1e-12 * (hi - lo)` are clamped up to that floor with a
/// warning; the kernel then acts as a nearest-node indicator.
pub fn kde_on_grid(samples: &[f64], grid: &Grid, bandwidth: f64) -> Result<GridDensity> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("kde needs at least one sample".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("kde samples must be finite".into()));
    }
    if !bandwidth.is_finite() || bandwidth <= 0.0 {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let h = effective_bandwidth(grid, bandwidth);
    let n = grid.len();
    let dx = grid.dx();
    let mut values = vec![0.0; n];
    let mut kernel = vec![0.0; n];
    let scale = 1.0 / (samples.len() as f64 * dx);
    for &s in samples {
        kernel_weights_into(s, grid, h, &mut kernel);
        for (v, &w) in values.iter_mut().zip(kernel.iter()) {
            *v += scale * w;
        }
    }
    GridDensity::new(*grid, values)
}

/// Fills `buf` with one sample's normalized kernel weights (summing to 1 on
/// the grid). Shared by the KDE and its gradient adjoint so both see the
/// identical weights. `h` must already be the effective bandwidth.
pub(crate) fn kernel_weights_into(s: f64, grid: &Grid, h: f64, buf: &mut [f64]) {
    debug_assert_eq!(buf.len(), grid.len());
    // Max-shifted exponentials: the shift cancels in the ratio, so tiny
    // bandwidths stay finite.
    let mut max_t = f64::NEG_INFINITY;
    for (k, t) in buf.iter_mut().enumerate() {
        let d = grid.point(k) - s;
        *t = -d * d / (2.0 * h * h);
        if *t > max_t {
            max_t = *t;
        }
    }
    let mut denom = 0.0;
    for t in buf.iter_mut() {
        *t = (*t - max_t).exp();
        denom += *t;
    }
    for t in buf.iter_mut() {
        *t /= denom;
    }
}

/// The bandwidth actually used by [`kde_on_grid`] after the degeneracy clamp.
pub fn effective_bandwidth(grid: &Grid, bandwidth: f64) -> f64 {
    let floor = MIN_RELATIVE_BANDWIDTH * (grid.hi() - grid.lo());
    if bandwidth < floor {
        log::warn!("bandwidth {bandwidth} is degenerate for this grid; clamping to {floor}");
        floor
    } else {
        bandwidth
    }
}

/// Convex mixture of densities on a shared support.
pub fn mixture<D: DiscreteDensity>(components: &[&D], weights: &[f64]) -> Result<D> {
    if components.is_empty() {
        return Err(Error::InvalidInput("mixture needs at least one component".into()));
    }
    if components.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} components but {} weights",
            components.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput("mixture weights must be finite and non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "mixture weights sum to {sum}, expected 1 within 1e-12"
        )));
    }
    let first = components[0];
    for c in &components[1..] {
        check_same_support(first, *c)?;
    }
    let n = first.masses().len();
    let mut out = vec![0.0; n];
    for (c, &w) in components.iter().zip(weights) {
        for (o, &m) in out.iter_mut().zip(c.masses()) {
            *o += w * m;
        }
    }
    first.with_masses(out)
}

/// Total variation distance `0.5 * sum |p - q| * cell`.
pub fn tv_distance<D: DiscreteDensity>(p: &D, q: &D) -> Result<f64> {
    check_same_support(p, q)?;
    let cell = p.cell();
    let sum: f64 = p
        .masses()
        .iter()
        .zip(q.masses())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * sum * cell)
}

/// Empirical PMF of integer labels over the alphabet `0..k`.
pub fn empirical_pmf(labels: &[usize], k: usize) -> Result<CategoricalPMF> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("empirical pmf needs at least one label".into()));
    }
    if k < 2 {
        return Err(Error::InvalidInput(format!("pmf needs at least 2 outcomes, got {k}")));
    }
    let mut counts = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidInput(format!(
                "label {y} at position {i} is outside the alphabet 0..{k}"
            )));
        }
        counts[y] += 1;
    }
    let total = labels.len() as f64;
    CategoricalPMF::new(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Rows of real features with an integer class label `y` and group label `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    features: Matrix,
    labels: Vec<usize>,
    groups: Vec<usize>,
}

impl TabularDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, groups: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() || features.rows() != groups.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows, {} labels, {} groups",
                features.rows(),
                labels.len(),
                groups.len()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::InvalidInput("dataset needs at least one row".into()));
        }
        if !features.is_finite() {
            return Err(Error::InvalidInput("dataset features must be finite".into()));
        }
        Ok(TabularDataset { features, labels, groups })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// Number of classes implied by the largest label.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) + 1
    }

    /// Number of groups implied by the largest group label.
    pub fn n_groups(&self) -> usize {
        self.groups.iter().copied().max().unwrap_or(0) + 1
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("subset needs at least one row".into()));
        }
        let features = self.features.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let groups = indices.iter().map(|&i| self.groups[i]).collect();
        Ok(TabularDataset { features, labels, groups })
    }

    /// Expected CSV header for `d` feature columns: `f0,...,f{d-1},y,z`.
    pub fn csv_header(d: usize) -> String {
        let mut cols: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        cols.push("y".into());
        cols.push("z".into());
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::csv_header(self.dim()))?;
        for i in 0..self.len() {
            for v in self.features.row(i) {
                write!(w, "{v},")?;
            }
            writeln!(w, "{},{}", self.labels[i], self.groups[i])?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(Error::Data { line: 0, message: "empty file".into() });
        };
        let header = header?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 3 || cols[cols.len() - 2] != "y" || cols[cols.len() - 1] != "z" {
            return Err(Error::Data {
                line: 1,
                message: format!(
                    "expected header 'f0,...,y,z', got '{}'",
                    header.trim()
                ),
            });
        }
        let d = cols.len() - 2;
        for (j, c) in cols[..d].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::Data {
                    line: 1,
                    message: format!("feature column {j} is named '{c}', expected 'f{j}'"),
                });
            }
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(Error::Data {
                    line: lineno,
                    message: format!("expected {} fields, got {}", d + 2, fields.len()),
                });
            }
            let mut feats = Vec::with_capacity(d);
            for (j, f) in fields[..d].iter().enumerate() {
                let v: f64 = f.trim().parse().map_err(|_| Error::Data {
                    line: lineno,
                    message: format!("bad value '{f}' in column f{j}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Data {
                        line: lineno,
                        message: format!("non-finite value in column f{j}"),
                    });
                }
                feats.push(v);
            }
            let y: usize = fields[d].trim().parse().map_err(|_| Error::Data {
                line: lineno,
                message: format!("bad label '{}' in column y", fields[d]),
            })?;
            let z: usize = fields[d + 1].trim().parse().map_err(|_| Error::Data {
                line: lineno,
                message: format!("bad group '{}' in column z", fields[d + 1]),
            })?;
            rows.push(feats);
            labels.push(y);
            groups.push(z);
        }
        if rows.is_empty() {
            return Err(Error::Data { line: 0, message: "no data rows".into() });
        }
        TabularDataset::new(Matrix::from_rows(&rows)?, labels, groups)
    }
}
