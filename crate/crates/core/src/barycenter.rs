//! Wasserstein-2 barycenters over small point clouds: exact 1D optimal
//! transport, entropic transport plans for low-dimensional clouds, the
//! fixed-point barycenter iteration, and feature neutralization that replaces
//! each group's rows by their transport images into the common barycenter.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::densities::TabularDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Weighted point cloud: `m x d` points with a simplex weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Matrix,
    weights: Vec<f64>,
}

impl PointCloud {
    /// Tolerance on the weight sum.
    pub const WEIGHT_TOL: f64 = 1e-12;

    pub fn new(points: Matrix, weights: Vec<f64>) -> Result<Self> {
        if points.rows() == 0 || points.cols() == 0 {
            return Err(Error::InvalidInput("point cloud needs at least one point".into()));
        }
        if weights.len() != points.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} points",
                weights.len(),
                points.rows()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::WEIGHT_TOL {
            return Err(Error::InvalidInput(format!(
                "weights sum to {sum}, expected 1 within {}",
                Self::WEIGHT_TOL
            )));
        }
        if !points.is_finite() {
            return Err(Error::InvalidInput("points must be finite".into()));
        }
        Ok(PointCloud { points, weights })
    }

    pub fn uniform(points: Matrix) -> Result<Self> {
        let m = points.rows();
        if m == 0 {
            return Err(Error::InvalidInput("point cloud needs at least one point".into()));
        }
        PointCloud::new(points, vec![1.0 / m as f64; m])
    }

    /// One-dimensional uniform cloud from raw values.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        PointCloud::uniform(Matrix::from_rows(&rows)?)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Values of a one-dimensional cloud, in row order.
    pub fn scalars(&self) -> Result<Vec<f64>> {
        if self.dim() != 1 {
            return Err(Error::InvalidInput(format!(
                "expected a 1-dimensional cloud, got {} dimensions",
                self.dim()
            )));
        }
        Ok(self.points.as_slice().to_vec())
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|&w| (w - u).abs() <= Self::WEIGHT_TOL)
    }

    /// Weighted mean point.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for (row, &w) in self.points.iter_rows().zip(&self.weights) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += w * x;
            }
        }
        mean
    }
}

/// How a transport map was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    /// Monotone 1D rearrangement (order statistics / quantile pairing).
    Sorted1D,
    /// Row-normalized image of an entropic coupling.
    Barycentric,
}

/// Empirical transport map: the image of each source point, row-aligned with
/// the source support it was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap {
    kind: MapKind,
    source: Matrix,
    image: Matrix,
}

impl TransportMap {
    pub fn new(kind: MapKind, source: Matrix, image: Matrix) -> Result<Self> {
        if source.rows() != image.rows() || source.cols() != image.cols() {
            return Err(Error::ShapeMismatch(format!(
                "source is {}x{} but image is {}x{}",
                source.rows(),
                source.cols(),
                image.rows(),
                image.cols()
            )));
        }
        if source.rows() == 0 {
            return Err(Error::InvalidInput("transport map needs at least one point".into()));
        }
        Ok(TransportMap { kind, source, image })
    }

    /// The map that fixes every point of the cloud.
    pub fn identity(cloud: &PointCloud) -> Self {
        TransportMap {
            kind: MapKind::Sorted1D,
            source: cloud.points().clone(),
            image: cloud.points().clone(),
        }
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn source(&self) -> &Matrix {
        &self.source
    }

    /// Images of the source points, row-aligned with the source.
    pub fn image(&self) -> &Matrix {
        &self.image
    }

    /// Images of a cloud that must coincide row-by-row with the map's source
    /// support; empirical maps are defined nowhere else.
    pub fn apply(&self, x: &PointCloud) -> Result<Matrix> {
        if x.len() != self.source.rows() || x.dim() != self.source.cols() {
            return Err(Error::InvalidInput(format!(
                "map domain has {} points in {} dimensions, cloud has {} in {}",
                self.source.rows(),
                self.source.cols(),
                x.len(),
                x.dim()
            )));
        }
        for (i, row) in x.points().iter_rows().enumerate() {
            if row != self.source.row(i) {
                return Err(Error::InvalidInput(format!(
                    "point at row {i} is not in the map's domain"
                )));
            }
        }
        Ok(self.image.clone())
    }
}

/// Transport plan between two clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    plan: Matrix,
}

impl Coupling {
    /// Marginal tolerance for a valid plan.
    pub const MARGINAL_TOL: f64 = 1e-8;

    pub fn new(plan: Matrix) -> Result<Self> {
        if plan.as_slice().iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidInput("plan entries must be finite and non-negative".into()));
        }
        Ok(Coupling { plan })
    }

    pub fn plan(&self) -> &Matrix {
        &self.plan
    }

    /// Largest deviation of the plan's marginals from the given weights.
    pub fn marginal_violation(&self, source_w: &[f64], target_w: &[f64]) -> Result<f64> {
        if source_w.len() != self.plan.rows() || target_w.len() != self.plan.cols() {
            return Err(Error::ShapeMismatch(format!(
                "plan is {}x{} but weights are {} and {}",
                self.plan.rows(),
                self.plan.cols(),
                source_w.len(),
                target_w.len()
            )));
        }
        let mut worst: f64 = 0.0;
        for (i, &a) in source_w.iter().enumerate() {
            let row_sum: f64 = self.plan.row(i).iter().sum();
            worst = worst.max((row_sum - a).abs());
        }
        for (j, &b) in target_w.iter().enumerate() {
            let col_sum: f64 = (0..self.plan.rows()).map(|i| self.plan.get(i, j)).sum();
            worst = worst.max((col_sum - b).abs());
        }
        Ok(worst)
    }
}

/// Squared Euclidean cost matrix between two clouds of equal dimension.
fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Matrix {
    let mut c = Matrix::zeros(a.len(), b.len());
    for (i, x) in a.points().iter_rows().enumerate() {
        for (j, y) in b.points().iter_rows().enumerate() {
            let d2: f64 = x.iter().zip(y).map(|(&u, &v)| (u - v) * (u - v)).sum();
            c.set(i, j, d2);
        }
    }
    c
}

fn check_same_dim(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "clouds have dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Indices that sort a 1D cloud by value.
fn sorted_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    idx
}

/// Monotone 1D optimal transport from a uniform source cloud. With equal
/// sizes and a uniform target this pairs the i-th order statistic of the
/// source with the i-th of the target, which realizes the squared distance
/// `(1/m) sum (x_(i) - y_(i))^2`; otherwise each source order statistic is
/// sent to the target's empirical quantile at `(i + 1/2) / m`.
pub fn ot_map_1d(source: &PointCloud, target: &PointCloud) -> Result<TransportMap> {
    check_same_dim(source, target)?;
    if source.dim() != 1 {
        return Err(Error::InvalidInput(format!(
            "monotone transport needs 1-dimensional clouds, got {}",
            source.dim()
        )));
    }
    if !source.is_uniform() {
        return Err(Error::InvalidInput(
            "monotone transport needs a uniformly weighted source".into(),
        ));
    }
    let src = source.scalars()?;
    let tgt = target.scalars()?;
    let src_order = sorted_order(&src);
    let tgt_order = sorted_order(&tgt);

    // Cumulative target weights in sorted order.
    let mut cum = Vec::with_capacity(tgt.len());
    let mut acc = 0.0;
    for &j in &tgt_order {
        acc += target.weights()[j];
        cum.push(acc);
    }

    let m = src.len();
    let mut image = vec![0.0; m];
    let mut j = 0usize;
    for (rank, &i) in src_order.iter().enumerate() {
        let q = (rank as f64 + 0.5) / m as f64;
        while j + 1 < cum.len() && cum[j] < q - 1e-15 {
            j += 1;
        }
        image[i] = tgt[tgt_order[j]];
    }
    TransportMap::new(
        MapKind::Sorted1D,
        source.points().clone(),
        Matrix::from_rows(&image.iter().map(|&v| vec![v]).collect::<Vec<_>>())?,
    )
}

/// Exact squared Wasserstein-2 distance between weighted 1D clouds via the
/// quantile-function integral.
fn w2_squared_1d(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let av = a.scalars()?;
    let bv = b.scalars()?;
    let ao = sorted_order(&av);
    let bo = sorted_order(&bv);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut q = 0.0;
    let mut qa = a.weights()[ao[0]];
    let mut qb = b.weights()[bo[0]];
    let mut total = 0.0;
    loop {
        let q_next = qa.min(qb).min(1.0);
        let d = av[ao[i]] - bv[bo[j]];
        total += (q_next - q).max(0.0) * d * d;
        q = q_next;
        if q >= 1.0 - 1e-15 {
            break;
        }
        if qa <= qb {
            i += 1;
            if i >= ao.len() {
                break;
            }
            qa += a.weights()[ao[i]];
        } else {
            j += 1;
            if j >= bo.len() {
                break;
            }
            qb += b.weights()[bo[j]];
        }
    }
    Ok(total)
}

/// Regularization for distance estimates, relative to the cost scale: small
/// enough that the entropic bias stays well under the advertised accuracy.
const W2_REG_RATIO: f64 = 2e-3;
/// Coarser regularization for barycenter map extraction, where speed matters
/// more than the residual entropic blur.
const MAP_REG_RATIO: f64 = 5e-2;
const SINKHORN_MAX_ITER: usize = 500_000;
const W2_TOL: f64 = 1e-7;
const MAP_TOL: f64 = 1e-9;

fn mean_cost(c: &Matrix) -> f64 {
    let total: f64 = c.as_slice().iter().sum();
    (total / c.as_slice().len() as f64).max(1e-12)
}

/// Wasserstein-2 distance. Exact in one dimension via sorted quantile
/// functions; in higher dimension an entropic plan with a small fixed
/// regularization estimates it, so the value is approximate (biased high by
/// the entropy term).
pub fn w2_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_same_dim(a, b)?;
    if a.dim() == 1 {
        return Ok(w2_squared_1d(a, b)?.sqrt());
    }
    let c = cost_matrix(a, b);
    let reg = W2_REG_RATIO * mean_cost(&c);
    w2_distance_entropic(a, b, reg, SINKHORN_MAX_ITER, W2_TOL)
}

/// Entropic Wasserstein-2 estimate with explicit solver parameters.
pub fn w2_distance_entropic(
    a: &PointCloud,
    b: &PointCloud,
    reg: f64,
    max_iter: usize,
    tol: f64,
) -> Result<f64> {
    let coupling = sinkhorn_plan(a, b, reg, max_iter, tol)?;
    let c = cost_matrix(a, b);
    let cost: f64 = coupling
        .plan()
        .as_slice()
        .iter()
        .zip(c.as_slice())
        .map(|(&p, &d2)| p * d2)
        .sum();
    Ok(cost.max(0.0).sqrt())
}

/// Log-sum-exp that tolerates empty and all-`-inf` inputs.
fn lse(terms: &[f64]) -> f64 {
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let sum: f64 = terms.iter().map(|&t| (t - mx).exp()).sum();
    mx + sum.ln()
}

/// Entropic optimal transport in the log domain. The returned plan satisfies
/// both marginal constraints within `tol` in the sup norm; if `max_iter`
/// sweeps cannot get there the error carries the final violation.
pub fn sinkhorn_plan(
    source: &PointCloud,
    target: &PointCloud,
    reg: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Coupling> {
    check_same_dim(source, target)?;
    if !(reg > 0.0) || !reg.is_finite() {
        return Err(Error::InvalidInput(format!("regularization must be positive, got {reg}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be at least 1".into()));
    }
    let c = cost_matrix(source, target);
    let m = source.len();
    let n = target.len();
    let ln_a: Vec<f64> = source.weights().iter().map(|&w| w.ln()).collect();
    let ln_b: Vec<f64> = target.weights().iter().map(|&w| w.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut buf = vec![0.0; m.max(n)];

    // One alternating sweep at regularization `eps`. Each g-update makes the
    // column sums exact, so the returned violation is the row error.
    let sweep = |eps: f64, f: &mut [f64], g: &mut [f64], buf: &mut [f64]| -> f64 {
        for i in 0..m {
            for j in 0..n {
                buf[j] = (g[j] - c.get(i, j)) / eps;
            }
            f[i] = if ln_a[i].is_finite() {
                eps * (ln_a[i] - lse(&buf[..n]))
            } else {
                f64::NEG_INFINITY
            };
        }
        for j in 0..n {
            for i in 0..m {
                buf[i] = (f[i] - c.get(i, j)) / eps;
            }
            g[j] = if ln_b[j].is_finite() {
                eps * (ln_b[j] - lse(&buf[..m]))
            } else {
                f64::NEG_INFINITY
            };
        }
        let mut worst: f64 = 0.0;
        for i in 0..m {
            let row: f64 = (0..n).map(|j| ((f[i] + g[j] - c.get(i, j)) / eps).exp()).sum();
            worst = worst.max((row - source.weights()[i]).abs());
        }
        worst
    };

    // Annealing from the cost scale down to the requested regularization
    // warm-starts the potentials; the final level is plain alternating
    // projection at `reg`, so the returned plan is the one the caller asked
    // for. All sweeps count against the iteration budget.
    let mut levels = Vec::new();
    let mut eps = mean_cost(&c).max(reg);
    while eps > reg * 1.0001 {
        levels.push(eps);
        eps *= 0.5;
    }
    // Reserve at least one sweep for the final level so the reported
    // violation always refers to the requested regularization.
    let mut used = 0usize;
    'anneal: for &eps in &levels {
        for _ in 0..50 {
            if used + 1 >= max_iter {
                break 'anneal;
            }
            used += 1;
            if sweep(eps, &mut f, &mut g, &mut buf) <= tol.max(1e-3) {
                break;
            }
        }
    }

    let mut last_violation = f64::INFINITY;
    while used < max_iter {
        used += 1;
        last_violation = sweep(reg, &mut f, &mut g, &mut buf);
        if last_violation <= tol {
            let mut p = Matrix::zeros(m, n);
            for i in 0..m {
                for j in 0..n {
                    p.set(i, j, ((f[i] + g[j] - c.get(i, j)) / reg).exp());
                }
            }
            return Coupling::new(p);
        }
    }
    Err(Error::NonConvergence {
        what: format!("entropic transport after {max_iter} sweeps"),
        residual: last_violation,
    })
}

/// Map extraction from a coupling: each source point goes to the plan-weighted
/// mean of the target points, `T(x_i) = sum_j plan_ij y_j / sum_j plan_ij`.
pub fn barycentric_projection(
    coupling: &Coupling,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<TransportMap> {
    let plan = coupling.plan();
    if plan.rows() != source.len() || plan.cols() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "plan is {}x{} but clouds have {} and {} points",
            plan.rows(),
            plan.cols(),
            source.len(),
            target.len()
        )));
    }
    check_same_dim(source, target)?;
    let mut image = Matrix::zeros(source.len(), source.dim());
    for i in 0..plan.rows() {
        let mass: f64 = plan.row(i).iter().sum();
        if !(mass > 0.0) {
            return Err(Error::InvalidInput(format!(
                "coupling row {i} carries no mass; its projection is undefined"
            )));
        }
        for (j, y) in target.points().iter_rows().enumerate() {
            let w = plan.get(i, j) / mass;
            for (k, &v) in y.iter().enumerate() {
                image.add_at(i, k, w * v);
            }
        }
    }
    TransportMap::new(MapKind::Barycentric, source.points().clone(), image)
}

/// Outcome of the fixed-point barycenter iteration: the last iterate, whether
/// the residual fell under the tolerance, and the final residual.
#[derive(Debug, Clone)]
pub struct BarycenterResult {
    pub cloud: PointCloud,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

/// Fixed-point Wasserstein-2 barycenter: starting from a seeded subsample of
/// the weighted group mixture, repeatedly replace the iterate by the weighted
/// average of its transport images into each group, stopping when consecutive
/// iterates are within `tol` in W2. Non-convergence is flagged, not an error;
/// the last iterate is still returned.
pub fn fixed_point_barycenter(
    groups: &[PointCloud],
    weights: &[f64],
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<BarycenterResult> {
    if groups.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "barycenter needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    if weights.len() != groups.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} groups",
            weights.len(),
            groups.len()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (wsum - 1.0).abs() > PointCloud::WEIGHT_TOL {
        return Err(Error::InvalidInput(format!(
            "group weights must be a simplex vector, sum is {wsum}"
        )));
    }
    let d = groups[0].dim();
    for g in groups {
        if g.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "groups mix dimensions {} and {}",
                d,
                g.dim()
            )));
        }
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be at least 1".into()));
    }

    // Barycenter support size: the weighted average of the group sizes.
    let m_bar = (groups
        .iter()
        .zip(weights)
        .map(|(g, &w)| w * g.len() as f64)
        .sum::<f64>()
        .round() as usize)
        .max(1);

    // Initialization: a seeded subsample of the weighted mixture keeps the
    // start inside the data's convex hull.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init_rows = Vec::with_capacity(m_bar);
    for _ in 0..m_bar {
        let uz: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut z = groups.len() - 1;
        for (k, &w) in weights.iter().enumerate() {
            acc += w;
            if uz < acc {
                z = k;
                break;
            }
        }
        let ui: f64 = rng.random_range(0.0..1.0);
        let mut acc_i = 0.0;
        let mut pick = groups[z].len() - 1;
        for (i, &w) in groups[z].weights().iter().enumerate() {
            acc_i += w;
            if ui < acc_i {
                pick = i;
                break;
            }
        }
        init_rows.push(groups[z].points().row(pick).to_vec());
    }
    let mut bary = PointCloud::uniform(Matrix::from_rows(&init_rows)?)?;

    // Fixed entropic regularization for the whole run, set from the initial
    // cost scale, so the d>1 surrogate is comparable across iterations.
    let reg = if d > 1 {
        let scale: f64 = groups.iter().map(|g| mean_cost(&cost_matrix(&bary, g))).sum::<f64>()
            / groups.len() as f64;
        MAP_REG_RATIO * scale
    } else {
        0.0
    };

    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for t in 1..=max_iter {
        iterations = t;
        let mut new_points = Matrix::zeros(m_bar, d);
        for (g, &w) in groups.iter().zip(weights) {
            let image = if d == 1 {
                ot_map_1d(&bary, g)?.image().clone()
            } else {
                let plan = sinkhorn_plan(&bary, g, reg, SINKHORN_MAX_ITER, MAP_TOL)?;
                barycentric_projection(&plan, &bary, g)?.image().clone()
            };
            for i in 0..m_bar {
                for k in 0..d {
                    new_points.add_at(i, k, w * image.get(i, k));
                }
            }
        }
        let new_bary = PointCloud::uniform(new_points)?;
        residual = if d == 1 {
            w2_distance(&bary, &new_bary)?
        } else {
            w2_distance_entropic(&bary, &new_bary, reg, SINKHORN_MAX_ITER, W2_TOL)?
        };
        bary = new_bary;
        if residual < tol {
            return Ok(BarycenterResult { cloud: bary, converged: true, iterations, residual });
        }
    }
    Ok(BarycenterResult { cloud: bary, converged: false, iterations, residual })
}

/// Displacement midpoint: each point averaged with its transport image,
/// `x_mid = x/2 + T(x)/2`.
pub fn mccann_midpoint(x: &PointCloud, map: &TransportMap) -> Result<PointCloud> {
    let image = map.apply(x)?;
    let mut mid = Matrix::zeros(x.len(), x.dim());
    for i in 0..x.len() {
        for k in 0..x.dim() {
            mid.set(i, k, 0.5 * x.points().get(i, k) + 0.5 * image.get(i, k));
        }
    }
    PointCloud::new(mid, x.weights().to_vec())
}

/// Largest 1D-marginal Wasserstein-2 distance between any two groups of the
/// dataset, maximized over feature dimensions. Zero means the per-group
/// feature distributions agree in every marginal.
pub fn group_marginal_w2(data: &TabularDataset) -> Result<f64> {
    let n_groups = data.n_groups();
    if n_groups < 2 {
        return Err(Error::MissingGroup(format!(
            "need at least 2 groups, got {n_groups}"
        )));
    }
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in data.groups().iter().enumerate() {
        by_group[g].push(i);
    }
    let mut worst: f64 = 0.0;
    for a in 0..n_groups {
        for b in (a + 1)..n_groups {
            if by_group[a].is_empty() || by_group[b].is_empty() {
                return Err(Error::MissingGroup(format!("group {} has no rows", if by_group[a].is_empty() { a } else { b })));
            }
            for k in 0..data.dim() {
                let col = |rows: &[usize]| -> Result<PointCloud> {
                    let vals: Vec<f64> =
                        rows.iter().map(|&i| data.features().get(i, k)).collect();
                    PointCloud::from_scalars(&vals)
                };
                let w2 = w2_distance(&col(&by_group[a])?, &col(&by_group[b])?)?;
                worst = worst.max(w2);
            }
        }
    }
    Ok(worst)
}

/// Replaces each row's features by its group's transport image into the
/// estimated barycenter of all groups. Labels, groups, and row order are
/// preserved; the group column stays for auditing. When the barycenter
/// iteration does not converge within budget the last iterate is still used;
/// callers judge the output by its residual group separation.
pub fn neutralize_dataset(
    data: &TabularDataset,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<TabularDataset> {
    let n_groups = data.n_groups();
    if n_groups < 2 {
        return Err(Error::MissingGroup(format!(
            "neutralization needs at least 2 groups, got {n_groups}"
        )));
    }
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in data.groups().iter().enumerate() {
        by_group[g].push(i);
    }
    for (g, rows) in by_group.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "group {g} has {} rows; need at least 2 per group",
                rows.len()
            )));
        }
    }

    let d = data.dim();
    let clouds: Vec<PointCloud> = by_group
        .iter()
        .map(|rows| {
            let feats = data.features().select_rows(rows)?;
            PointCloud::uniform(feats)
        })
        .collect::<Result<_>>()?;
    let weights: Vec<f64> =
        by_group.iter().map(|rows| rows.len() as f64 / data.len() as f64).collect();

    let bary = fixed_point_barycenter(&clouds, &weights, tol, max_iter, seed)?;

    let mut new_feats = data.features().clone();
    for (cloud, rows) in clouds.iter().zip(&by_group) {
        let map = if d == 1 {
            ot_map_1d(cloud, &bary.cloud)?
        } else {
            let c = cost_matrix(cloud, &bary.cloud);
            let reg = MAP_REG_RATIO * mean_cost(&c);
            let plan = sinkhorn_plan(cloud, &bary.cloud, reg, SINKHORN_MAX_ITER, MAP_TOL)?;
            barycentric_projection(&plan, cloud, &bary.cloud)?
        };
        let image = map.image();
        for (local, &orig) in rows.iter().enumerate() {
            for k in 0..d {
                new_feats.set(orig, k, image.get(local, k));
            }
        }
    }
    TabularDataset::new(new_feats, data.labels().to_vec(), data.groups().to_vec())
}
