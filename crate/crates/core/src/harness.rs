//! Experiment drivers behind the command-line interface: flat `key = value`
//! configuration, dataset and artifact I/O, and the five commands
//! (`forget-gaussian`, `unlearn`, `feature-unlearn`, `barycenter`, `audit`).
//!
//! Every run is a pure function of its configuration, input files, and seed:
//! artifacts are byte-identical across reruns on one platform, and every
//! number in a run report can be recomputed from the persisted artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write as IoWrite};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::barycenter::{neutralize_dataset, w2_distance, PointCloud};
use crate::certificates::{empirical_sup_log_odds, UnlearningCertificate};
use crate::densities::{
    empirical_pmf, kde_on_grid, mixture, tv_distance, CategoricalPMF, Grid, GridDensity,
    TabularDataset,
};
use crate::error::{Error, Result};
use crate::infotheory::{mutual_info_mixture, InfoValue};
use crate::matrix::Matrix;
use crate::smallnet::{
    adam_step, backward, forward, kde_loss_gradient, KdeLoss, ModelParams, OptimizerState,
};
use crate::unlearner::{
    acc_rand, accuracy, argmax_bins, auto_alpha, dp_gap, scalar_grad_diff_loss,
    scalar_kl_anchor_loss, scalar_marginal_loss, train_feature, train_unlearn,
    unlearn_validation_indices, EarlyStopRule, Method, ScalarLossEval, StopKind, UnlearnConfig,
};

/// Flat `key = value` experiment configuration. Lines starting with `#` and
/// blank lines are ignored; keys may not repeat. Every command validates its
/// key set, so a misspelled key fails instead of silently using a default.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    entries: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    idx + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", idx + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    idx + 1
                )));
            }
        }
        Ok(ExperimentConfig { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Sets or overrides one key (used for the `--seed` flag).
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Errors on any key outside the command's vocabulary.
    pub fn check_allowed(&self, allowed: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (allowed: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// Reads typed values out of a config while echoing every resolved setting,
/// defaults included, for the run report.
struct Resolver<'a> {
    cfg: &'a ExperimentConfig,
    echo: BTreeMap<String, String>,
}

impl<'a> Resolver<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Resolver { cfg, echo: BTreeMap::new() }
    }

    fn record<T: std::fmt::Display>(&mut self, key: &str, value: T) -> T {
        self.echo.insert(key.to_string(), value.to_string());
        value
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        let v = match self.cfg.raw(key) {
            None => default,
            Some(s) => s.parse::<f64>().map_err(|_| {
                Error::Config(format!("key `{key}`: expected a number, got `{s}`"))
            })?,
        };
        Ok(self.record(key, v))
    }

    fn f64_opt(&mut self, key: &str) -> Result<Option<f64>> {
        match self.cfg.raw(key) {
            None => Ok(None),
            Some(s) => {
                let v = s.parse::<f64>().map_err(|_| {
                    Error::Config(format!("key `{key}`: expected a number, got `{s}`"))
                })?;
                Ok(Some(self.record(key, v)))
            }
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        let v = match self.cfg.raw(key) {
            None => default,
            Some(s) => s.parse::<usize>().map_err(|_| {
                Error::Config(format!("key `{key}`: expected a non-negative integer, got `{s}`"))
            })?,
        };
        Ok(self.record(key, v))
    }

    fn usize_opt(&mut self, key: &str) -> Result<Option<usize>> {
        match self.cfg.raw(key) {
            None => Ok(None),
            Some(s) => {
                let v = s.parse::<usize>().map_err(|_| {
                    Error::Config(format!(
                        "key `{key}`: expected a non-negative integer, got `{s}`"
                    ))
                })?;
                Ok(Some(self.record(key, v)))
            }
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        let v = match self.cfg.raw(key) {
            None => default,
            Some(s) => s.parse::<u64>().map_err(|_| {
                Error::Config(format!("key `{key}`: expected a non-negative integer, got `{s}`"))
            })?,
        };
        Ok(self.record(key, v))
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        let v = self.cfg.raw(key).unwrap_or(default).to_string();
        self.record(key, v)
    }

    fn required(&mut self, key: &str) -> Result<String> {
        match self.cfg.raw(key) {
            Some(s) => Ok(self.record(key, s.to_string())),
            None => Err(Error::Config(format!("missing required key `{key}`"))),
        }
    }

    fn f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        let list = match self.cfg.raw(key) {
            None => default.to_vec(),
            Some(s) => s
                .split(',')
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|_| {
                        Error::Config(format!(
                            "key `{key}`: expected comma-separated numbers, got `{t}`"
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?,
        };
        if list.is_empty() {
            return Err(Error::Config(format!("key `{key}`: the list is empty")));
        }
        let shown: Vec<String> = list.iter().map(f64::to_string).collect();
        self.echo.insert(key.to_string(), shown.join(","));
        Ok(list)
    }

    fn finish(self) -> BTreeMap<String, String> {
        self.echo
    }
}

/// What a command produced: the resolved settings, the artifact file names
/// (relative to the output directory, so the report stays valid when the
/// directory moves), the headline numbers, and the certificate when the
/// command issues one. `wall_time` is in-memory only; persisting it would
/// make reruns differ.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub settings: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<UnlearningCertificate>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunReport {
    fn new(command: &str, settings: BTreeMap<String, String>) -> Self {
        RunReport {
            command: command.to_string(),
            settings,
            artifacts: BTreeMap::new(),
            metrics: BTreeMap::new(),
            certificate: None,
            wall_time: Duration::ZERO,
        }
    }

    fn add_artifact(&mut self, name: &str, path: &Path) {
        let file = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned());
        self.artifacts.insert(name.to_string(), file);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Opens an input dataset; a missing path is a configuration problem, a
/// malformed file a data problem.
fn load_dataset(path: &str) -> Result<TabularDataset> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open dataset `{path}`: {e}")))?;
    TabularDataset::read_csv(BufReader::new(file))
}

/// Finishes a report: stamps the wall time and persists `report.json`.
fn seal_report(mut report: RunReport, out: &Path, started: Instant) -> Result<RunReport> {
    report.wall_time = started.elapsed();
    let path = out.join("report.json");
    write_json(&path, &report)?;
    report.add_artifact("report", &path);
    Ok(report)
}

/// Group PMFs, mixture mutual information (equal slot prior), and empirical
/// sup log-odds of binned outputs labeled by a binary slot. The unlearn run
/// and the audit command share this, so both compute identical numbers from
/// identical rows.
pub fn binned_audit_stats(bins: &[usize], z: &[usize]) -> Result<(InfoValue, f64)> {
    if bins.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} bins for {} slot labels",
            bins.len(),
            z.len()
        )));
    }
    if let Some(&bad) = z.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidInput(format!("slot labels must be 0 or 1, got {bad}")));
    }
    // A collapsed predictor uses one bin; pad the support so the PMFs stay
    // well formed (a bin empty on both sides changes nothing downstream).
    let k = bins.iter().max().map_or(0, |&b| b + 1).max(2);
    let split = |side: usize| -> Vec<usize> {
        bins.iter().zip(z).filter(|&(_, &g)| g == side).map(|(&b, _)| b).collect()
    };
    let bins0 = split(0);
    let bins1 = split(1);
    if bins0.is_empty() || bins1.is_empty() {
        return Err(Error::MissingGroup(format!(
            "slot {} has no rows",
            if bins0.is_empty() { 0 } else { 1 }
        )));
    }
    let p0 = empirical_pmf(&bins0, k)?;
    let p1 = empirical_pmf(&bins1, k)?;
    let mi = mutual_info_mixture(&p0, &p1, 0.5)?;
    let sup = empirical_sup_log_odds(&p0, &p1)?;
    Ok((mi, sup))
}

// ---------------------------------------------------------------------------
// forget-gaussian
// ---------------------------------------------------------------------------

const FORGET_GAUSSIAN_KEYS: &[&str] = &[
    "method",
    "grid_bound",
    "grid_points",
    "n_retain",
    "n_unlearn",
    "gauss_mean",
    "gauss_std",
    "bandwidth_x",
    "bandwidth_y",
    "pretrain_alpha",
    "pretrain_epochs",
    "epochs",
    "lambda",
    "alpha",
    "prior",
    "c_max",
    "learning_rate",
    "hidden",
    "tv_threshold",
    "seed",
];

/// Everything the scalar objectives need besides the current outputs.
struct ScalarLossContext {
    method: Method,
    retain_target: GridDensity,
    unlearn_target: GridDensity,
    teacher: GridDensity,
    bandwidth: f64,
    lambda: f64,
    alpha: f64,
    prior: f64,
    c_max: f64,
}

fn eval_scalar_loss(
    ctx: &ScalarLossContext,
    out_r: &[f64],
    out_u: &[f64],
) -> Result<ScalarLossEval> {
    match ctx.method {
        Method::MarginalMi => scalar_marginal_loss(
            out_r,
            out_u,
            &ctx.retain_target,
            ctx.bandwidth,
            ctx.lambda,
            ctx.alpha,
            ctx.prior,
        ),
        Method::GradDiff => scalar_grad_diff_loss(
            out_r,
            out_u,
            &ctx.retain_target,
            &ctx.unlearn_target,
            ctx.bandwidth,
            ctx.lambda,
            ctx.c_max,
        ),
        Method::KlAnchor => scalar_kl_anchor_loss(
            out_r,
            out_u,
            &ctx.teacher,
            &ctx.unlearn_target,
            ctx.bandwidth,
            ctx.lambda,
        ),
        Method::FeatureMi => Err(Error::Config(
            "the forget-gaussian experiment runs marginal_mi, grad_diff, or kl_anchor".into(),
        )),
    }
}

/// Mixture mutual information between the unlearn-output density and the
/// retain-output density through the coupled marginal pair.
fn scalar_mi_margin(
    p_r: &GridDensity,
    p_u: &GridDensity,
    alpha: f64,
    prior: f64,
) -> Result<InfoValue> {
    let p0 = mixture(&[p_r, p_u], &[alpha, 1.0 - alpha])?;
    mutual_info_mixture(&p0, p_r, prior)
}

fn scalars_column(outputs: &Matrix) -> Vec<f64> {
    outputs.as_slice().to_vec()
}

fn column_matrix(values: &[f64]) -> Result<Matrix> {
    Matrix::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>())
}

fn push_trace_row(buf: &mut String, epoch: usize, density: &GridDensity) {
    let _ = write!(buf, "{epoch}");
    for v in density.values() {
        let _ = write!(buf, ",{v}");
    }
    buf.push('\n');
}

/// Distribution-level unlearning on a scalar residual net: retain samples are
/// uniform on `[-L, L]`, unlearn samples a truncated Gaussian; the net is
/// pretrained until its retain-output density matches the weighted mixture of
/// the two input densities, then the configured objective unlearns the
/// Gaussian while per-epoch output densities are traced to CSV.
pub fn run_forget_gaussian(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let started = Instant::now();
    cfg.check_allowed(FORGET_GAUSSIAN_KEYS)?;
    let mut r = Resolver::new(cfg);

    let method = Method::from_str(&r.string("method", "marginal_mi"))?;
    if method == Method::FeatureMi {
        return Err(Error::Config(
            "the forget-gaussian experiment runs marginal_mi, grad_diff, or kl_anchor".into(),
        ));
    }
    let l = r.f64("grid_bound", 3.0)?;
    let grid_points = r.usize("grid_points", 101)?;
    let n_retain = r.usize("n_retain", 2000)?;
    let n_unlearn = r.usize("n_unlearn", 2000)?;
    let gauss_mean = r.f64("gauss_mean", 0.0)?;
    let gauss_std = r.f64("gauss_std", 0.5)?;
    // The output bandwidth sets the range of the density-matching force; at
    // 0.2 the mutual-information term cannot pull the concentrated unlearn
    // outputs apart and training stalls, at 0.4 it unlearns cleanly.
    let h_x = r.f64("bandwidth_x", 0.2)?;
    let h_y = r.f64("bandwidth_y", 0.4)?;
    let pretrain_alpha = r.f64("pretrain_alpha", 0.5)?;
    let pretrain_epochs = r.usize("pretrain_epochs", 1200)?;
    let epochs = r.usize("epochs", 800)?;
    let lambda = r.f64("lambda", 0.9)?;
    let default_alpha = auto_alpha(n_retain.max(1), n_unlearn.max(1))?;
    let alpha = match r.f64_opt("alpha")? {
        Some(v) => v,
        None => r.record("alpha", default_alpha),
    };
    let prior = r.f64("prior", 0.5)?;
    let c_max = r.f64("c_max", 20.0)?;
    let lr = r.f64("learning_rate", 1e-2)?;
    let hidden = r.usize("hidden", 32)?;
    let tv_threshold = r.f64("tv_threshold", 0.1)?;
    let seed = r.u64("seed", 0)?;

    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::Config(format!("grid_bound must be positive, got {l}")));
    }
    if n_retain == 0 || n_unlearn == 0 {
        return Err(Error::Config("n_retain and n_unlearn must be positive".into()));
    }
    if !(gauss_std > 0.0) {
        return Err(Error::Config(format!("gauss_std must be positive, got {gauss_std}")));
    }
    if gauss_mean.abs() >= l {
        return Err(Error::Config(format!(
            "gauss_mean must lie strictly inside [-{l}, {l}], got {gauss_mean}"
        )));
    }
    if !(pretrain_alpha > 0.0 && pretrain_alpha < 1.0) {
        return Err(Error::Config(format!(
            "pretrain_alpha must lie in (0, 1), got {pretrain_alpha}"
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
    }
    let grid = Grid::new(-l, l, grid_points)?;

    // Sampling order is fixed: retain first, then the rejection-sampled
    // truncated Gaussian.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let retain_x: Vec<f64> = (0..n_retain).map(|_| rng.random_range(-l..l)).collect();
    let normal = Normal::new(gauss_mean, gauss_std)
        .map_err(|e| Error::Config(format!("bad Gaussian parameters: {e}")))?;
    let unlearn_x: Vec<f64> = (0..n_unlearn)
        .map(|_| loop {
            let v = normal.sample(&mut rng);
            if (-l..=l).contains(&v) {
                break v;
            }
        })
        .collect();

    let retain_in = kde_on_grid(&retain_x, &grid, h_x)?;
    let unlearn_in = kde_on_grid(&unlearn_x, &grid, h_x)?;
    let pretrain_target =
        mixture(&[&retain_in, &unlearn_in], &[pretrain_alpha, 1.0 - pretrain_alpha])?;

    let retain_mat = column_matrix(&retain_x)?;
    let mut combined_rows: Vec<Vec<f64>> = retain_x.iter().map(|&v| vec![v]).collect();
    combined_rows.extend(unlearn_x.iter().map(|&v| vec![v]));
    let combined_mat = Matrix::from_rows(&combined_rows)?;

    let mut params = ModelParams::init_residual_scalar(hidden, seed)?;
    let mut opt = OptimizerState::with_hyperparams(&params, lr, 0.0);

    log::info!("forget-gaussian: pretraining {pretrain_epochs} epochs toward the mixture");
    let pretrain_loss = KdeLoss::CrossEntropy { target: pretrain_target.clone() };
    for _ in 0..pretrain_epochs {
        let (outputs, cache) = forward(&params, &retain_mat)?;
        let out_r = scalars_column(&outputs);
        let grad = kde_loss_gradient(&out_r, &grid, h_y, &pretrain_loss)?;
        let grads = backward(&params, &cache, &column_matrix(&grad)?)?;
        adam_step(&mut opt, &mut params, &grads)?;
    }

    let (outputs0, _) = forward(&params, &combined_mat)?;
    let all0 = scalars_column(&outputs0);
    let out_r0 = all0[..n_retain].to_vec();
    let teacher = kde_on_grid(&out_r0, &grid, h_y)?;
    let pretrain_tv = tv_distance(&teacher, &pretrain_target)?;
    log::info!("forget-gaussian: pretrain TV to mixture {pretrain_tv:.4}");

    let ctx = ScalarLossContext {
        method,
        retain_target: retain_in.clone(),
        unlearn_target: unlearn_in.clone(),
        teacher: teacher.clone(),
        bandwidth: h_y,
        lambda,
        alpha,
        prior,
        c_max,
    };
    let uniform = GridDensity::uniform(grid);

    // Optimizer state restarts for the unlearning phase so its schedule does
    // not depend on the pretraining budget.
    let mut opt = OptimizerState::with_hyperparams(&params, lr, 0.0);

    let mut trace_r = String::from("epoch");
    let mut trace_u = String::from("epoch");
    for k in 0..grid.len() {
        let _ = write!(trace_r, ",p{k}");
        let _ = write!(trace_u, ",p{k}");
    }
    trace_r.push('\n');
    trace_u.push('\n');
    let mut trajectory = String::from(
        "epoch,mi_margin_nats,tv_unlearn_retain,tv_retain_uniform,loss_total,loss_utility,loss_reg\n",
    );

    let mut mi_initial = InfoValue::from_nats(0.0);
    let mut mi_final = InfoValue::from_nats(0.0);
    let mut tv_ur_final = 0.0;
    let mut tv_r_uniform_final = 0.0;

    for epoch in 0..=epochs {
        let (outputs, cache) = forward(&params, &combined_mat)?;
        let all = scalars_column(&outputs);
        let out_r = &all[..n_retain];
        let out_u = &all[n_retain..];

        let p_r = kde_on_grid(out_r, &grid, h_y)?;
        let p_u = kde_on_grid(out_u, &grid, h_y)?;
        let mi = scalar_mi_margin(&p_r, &p_u, alpha, prior)?;
        let tv_ur = tv_distance(&p_u, &p_r)?;
        let tv_r_uniform = tv_distance(&p_r, &uniform)?;
        let eval = eval_scalar_loss(&ctx, out_r, out_u)?;

        push_trace_row(&mut trace_r, epoch, &p_r);
        push_trace_row(&mut trace_u, epoch, &p_u);
        let _ = writeln!(
            trajectory,
            "{epoch},{},{tv_ur},{tv_r_uniform},{},{},{}",
            mi.nats(),
            eval.total,
            eval.utility,
            eval.reg
        );

        if epoch == 0 {
            mi_initial = mi;
        }
        mi_final = mi;
        tv_ur_final = tv_ur;
        tv_r_uniform_final = tv_r_uniform;
        if epoch == epochs {
            break;
        }

        let mut grad_rows: Vec<Vec<f64>> = eval.grad_retain.iter().map(|&g| vec![g]).collect();
        grad_rows.extend(eval.grad_unlearn.iter().map(|&g| vec![g]));
        let grads = backward(&params, &cache, &Matrix::from_rows(&grad_rows)?)?;
        adam_step(&mut opt, &mut params, &grads)?;
        if epoch % 50 == 0 {
            log::debug!(
                "forget-gaussian epoch {epoch}: mi {:.4} nats, tv(u,r) {tv_ur:.4}",
                mi.nats()
            );
        }
    }

    let mut report = RunReport::new("forget-gaussian", r.finish());
    let grid_path = out.join("grid.csv");
    let mut grid_csv = String::from("x\n");
    for x in grid.points() {
        let _ = writeln!(grid_csv, "{x}");
    }
    write_text(&grid_path, &grid_csv)?;
    report.add_artifact("grid", &grid_path);

    let trace_r_path = out.join("kde_trace_retain.csv");
    write_text(&trace_r_path, &trace_r)?;
    report.add_artifact("kde_trace_retain", &trace_r_path);
    let trace_u_path = out.join("kde_trace_unlearn.csv");
    write_text(&trace_u_path, &trace_u)?;
    report.add_artifact("kde_trace_unlearn", &trace_u_path);
    let trajectory_path = out.join("trajectory.csv");
    write_text(&trajectory_path, &trajectory)?;
    report.add_artifact("trajectory", &trajectory_path);
    let model_path = out.join("model.json");
    write_json(&model_path, &params)?;
    report.add_artifact("model", &model_path);

    report.metrics.insert("pretrain_tv".into(), pretrain_tv);
    report.metrics.insert("mi_initial_nats".into(), mi_initial.nats());
    report.metrics.insert("mi_final_nats".into(), mi_final.nats());
    report.metrics.insert("tv_unlearn_retain_final".into(), tv_ur_final);
    report.metrics.insert("tv_retain_uniform_final".into(), tv_r_uniform_final);
    let report = seal_report(report, out, started)?;

    if method == Method::MarginalMi && !(tv_ur_final < tv_threshold) {
        return Err(Error::NonConvergence {
            what: "forget-gaussian unlearn-retain total variation".into(),
            residual: tv_ur_final,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// unlearn
// ---------------------------------------------------------------------------

const UNLEARN_KEYS: &[&str] = &[
    "retain",
    "unlearn",
    "method",
    "lambda",
    "epochs",
    "batch_size",
    "alpha",
    "prior",
    "c_max",
    "hidden",
    "finetune_epochs",
    "epsilon",
    "stop_threshold",
    "stop_margin",
    "stop_min_epochs",
    "stop_patience",
    "seed",
];

/// Applies the `stop_*` keys to the method's default rule.
fn resolve_stop_rule(r: &mut Resolver, method: Method) -> Result<EarlyStopRule> {
    let mut rule = match method {
        Method::MarginalMi | Method::FeatureMi => EarlyStopRule::mi_ratio(),
        Method::GradDiff => EarlyStopRule::chance_accuracy(),
        Method::KlAnchor => EarlyStopRule::kd_ratio(),
    };
    if let Some(threshold) = r.f64_opt("stop_threshold")? {
        rule.kind = match rule.kind {
            StopKind::MiRatio { .. } => StopKind::MiRatio { threshold },
            StopKind::KdRatio { .. } => StopKind::KdRatio { threshold },
            StopKind::ChanceAccuracy { .. } => {
                return Err(Error::Config(
                    "stop_threshold does not apply to the chance-accuracy rule; set stop_margin"
                        .into(),
                ))
            }
        };
    }
    if let Some(margin) = r.f64_opt("stop_margin")? {
        rule.kind = match rule.kind {
            StopKind::ChanceAccuracy { .. } => StopKind::ChanceAccuracy { margin },
            _ => {
                return Err(Error::Config(
                    "stop_margin applies only to the chance-accuracy rule".into(),
                ))
            }
        };
    }
    if let Some(min_epochs) = r.usize_opt("stop_min_epochs")? {
        rule.min_epochs = min_epochs;
    }
    if let Some(patience) = r.usize_opt("stop_patience")? {
        rule.patience = patience;
    }
    rule.validate()?;
    Ok(rule)
}

/// A stop rule that never fires within the budget, for plain fitting phases.
fn no_stop(epochs: usize) -> EarlyStopRule {
    EarlyStopRule {
        kind: StopKind::MiRatio { threshold: 0.85 },
        min_epochs: epochs + 1,
        patience: 1,
    }
}

fn concat_datasets(a: &TabularDataset, b: &TabularDataset) -> Result<TabularDataset> {
    let mut rows: Vec<Vec<f64>> = a.features().iter_rows().map(<[f64]>::to_vec).collect();
    rows.extend(b.features().iter_rows().map(<[f64]>::to_vec));
    let mut labels = a.labels().to_vec();
    labels.extend_from_slice(b.labels());
    let mut groups = a.groups().to_vec();
    groups.extend_from_slice(b.groups());
    TabularDataset::new(Matrix::from_rows(&rows)?, labels, groups)
}

fn write_trajectory(path: &Path, traj: &crate::unlearner::TrainTrajectory) -> Result<()> {
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Data-point unlearning on a small classifier: fine-tune on retain plus
/// unlearn, unlearn with the configured objective, then dump the trajectory,
/// the final model, the binned validation outputs, and a compression-rate
/// certificate at the configured odds tolerance. The certificate's
/// information budget is computed from the same binned rows the `audit`
/// command reads back, so re-auditing reproduces it exactly.
pub fn run_unlearn_classifier(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let started = Instant::now();
    cfg.check_allowed(UNLEARN_KEYS)?;
    let mut r = Resolver::new(cfg);

    let retain_path = r.required("retain")?;
    let unlearn_path = r.required("unlearn")?;
    let method = Method::from_str(&r.string("method", "marginal_mi"))?;
    if method == Method::FeatureMi {
        return Err(Error::Config(
            "the unlearn command removes data points; use feature-unlearn for feature_mi".into(),
        ));
    }
    let lambda = r.f64("lambda", 0.5)?;
    let epochs = r.usize("epochs", 30)?;
    let batch_size = r.usize("batch_size", 32)?;
    let prior = r.f64("prior", 0.5)?;
    let c_max = r.f64("c_max", 20.0)?;
    let hidden = r.usize("hidden", 16)?;
    let finetune_epochs = r.usize("finetune_epochs", 40)?;
    let epsilon = r.f64("epsilon", 0.25)?;
    let stop_rule = resolve_stop_rule(&mut r, method)?;
    let seed = r.u64("seed", 0)?;

    let retain = load_dataset(&retain_path)?;
    let unlearn = load_dataset(&unlearn_path)?;
    let alpha = match r.f64_opt("alpha")? {
        Some(v) => v,
        None => r.record("alpha", auto_alpha(retain.len(), unlearn.len())?),
    };

    let classes = retain.n_classes().max(unlearn.n_classes()).max(2);
    let init = ModelParams::init_mlp(&[retain.dim(), hidden, classes], seed)?;

    log::info!("unlearn: fine-tuning {finetune_epochs} epochs on {} rows", retain.len() + unlearn.len());
    let pooled = concat_datasets(&retain, &unlearn)?;
    let ft_cfg = UnlearnConfig {
        method: Method::GradDiff,
        lambda: 0.0,
        epochs: finetune_epochs,
        batch_size,
        alpha: 0.5,
        prior: 0.5,
        c_max: 20.0,
        stop_rule: no_stop(finetune_epochs),
        seed,
    };
    let (ft_params, ft_traj) = train_unlearn(&ft_cfg, &init, &pooled, &pooled)?;

    log::info!("unlearn: running {method} for up to {epochs} epochs");
    let cfg_run = UnlearnConfig {
        method,
        lambda,
        epochs,
        batch_size,
        alpha,
        prior,
        c_max,
        stop_rule,
        seed,
    };
    let (params, traj) = train_unlearn(&cfg_run, &ft_params, &retain, &unlearn)?;

    // Binned outputs for the audit: slot 1 is the retain validation rows,
    // slot 0 the pooled validation rows (retain first), so the mixture weight
    // is implicit in the row counts.
    let (r_val, u_val) = unlearn_validation_indices(seed, retain.labels(), unlearn.labels())?;
    let r_val_feats = retain.features().select_rows(&r_val)?;
    let u_val_feats = unlearn.features().select_rows(&u_val)?;
    let (r_probs, _) = forward(&params, &r_val_feats)?;
    let (u_probs, _) = forward(&params, &u_val_feats)?;
    let r_bins = argmax_bins(&r_probs);
    let u_bins = argmax_bins(&u_probs);

    let mut bins = Vec::with_capacity(2 * r_bins.len() + u_bins.len());
    let mut zs = Vec::with_capacity(bins.capacity());
    for &b in &r_bins {
        bins.push(b);
        zs.push(1);
    }
    for &b in r_bins.iter().chain(&u_bins) {
        bins.push(b);
        zs.push(0);
    }

    let mut report = RunReport::new("unlearn", r.finish());
    let ft_path = out.join("finetune_trajectory.csv");
    write_trajectory(&ft_path, &ft_traj)?;
    report.add_artifact("finetune_trajectory", &ft_path);
    let traj_path = out.join("trajectory.csv");
    write_trajectory(&traj_path, &traj)?;
    report.add_artifact("trajectory", &traj_path);
    let model_path = out.join("model.json");
    write_json(&model_path, &params)?;
    report.add_artifact("model", &model_path);

    let outputs_path = out.join("outputs.csv");
    let mut outputs_csv = String::from("output_bin,z\n");
    for (b, z) in bins.iter().zip(&zs) {
        let _ = writeln!(outputs_csv, "{b},{z}");
    }
    write_text(&outputs_path, &outputs_csv)?;
    report.add_artifact("outputs", &outputs_path);

    let (mi, sup) = binned_audit_stats(&bins, &zs)?;
    let certificate = UnlearningCertificate::compression_rate(mi, epsilon, 0.5)?;
    let cert_path = out.join("certificate.json");
    write_json(&cert_path, &certificate)?;
    report.add_artifact("certificate", &cert_path);

    let last = traj.last();
    report.metrics.insert("retain_acc".into(), last.retain_acc);
    report.metrics.insert("unlearn_acc".into(), last.unlearn_acc);
    report.metrics.insert("mi_margin_nats".into(), last.mi_margin.nats());
    report.metrics.insert("ft_retain_acc".into(), ft_traj.last().retain_acc);
    report
        .metrics
        .insert("stopped_epoch".into(), traj.stopped_epoch.map_or(-1.0, |e| e as f64));
    report.metrics.insert("epochs_run".into(), traj.records.len() as f64);
    report.metrics.insert("certificate_mu_nats".into(), mi.nats());
    report.metrics.insert("sup_log_odds".into(), sup);
    report.metrics.insert("confidence".into(), certificate.confidence);
    report.certificate = Some(certificate);
    seal_report(report, out, started)
}

// ---------------------------------------------------------------------------
// feature-unlearn
// ---------------------------------------------------------------------------

const FEATURE_KEYS: &[&str] = &[
    "data",
    "lambda_list",
    "epochs",
    "batch_size",
    "hidden",
    "stop_threshold",
    "stop_min_epochs",
    "stop_patience",
    "seed",
];

/// Feature unlearning across a trade-off list: each lambda trains the same
/// seeded initialization under the group-information regularizer, and the
/// frontier CSV records the randomized-policy accuracy, plain accuracy, and
/// demographic-parity gap of each final model over the full dataset. By
/// default every run uses its whole epoch budget so the frontier points are
/// comparable; `stop_min_epochs` re-enables early stopping.
pub fn run_feature_unlearn(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let started = Instant::now();
    cfg.check_allowed(FEATURE_KEYS)?;
    let mut r = Resolver::new(cfg);

    let data_path = r.required("data")?;
    let lambdas = r.f64_list("lambda_list", &[0.0, 0.3, 0.6, 0.9])?;
    let epochs = r.usize("epochs", 40)?;
    let batch_size = r.usize("batch_size", 32)?;
    let hidden = r.usize("hidden", 16)?;
    let stop_threshold = r.f64("stop_threshold", 0.85)?;
    let stop_min_epochs = r.usize("stop_min_epochs", epochs + 1)?;
    let stop_patience = r.usize("stop_patience", 1)?;
    let seed = r.u64("seed", 0)?;

    let data = load_dataset(&data_path)?;
    if data.n_groups() < 2 {
        return Err(Error::MissingGroup(format!(
            "feature unlearning needs at least 2 groups, got {}",
            data.n_groups()
        )));
    }
    let classes = data.n_classes().max(2);

    let mut report = RunReport::new("feature-unlearn", r.finish());
    let mut frontier = String::from("lambda,acc_rand,accuracy,dp_gap\n");

    for (idx, &lambda) in lambdas.iter().enumerate() {
        let cfg_run = UnlearnConfig {
            method: Method::FeatureMi,
            lambda,
            epochs,
            batch_size,
            alpha: 0.5,
            prior: 0.5,
            c_max: 20.0,
            stop_rule: EarlyStopRule {
                kind: StopKind::MiRatio { threshold: stop_threshold },
                min_epochs: stop_min_epochs,
                patience: stop_patience,
            },
            seed,
        };
        let init = ModelParams::init_mlp(&[data.dim(), hidden, classes], seed)?;
        log::info!("feature-unlearn: lambda {lambda}");
        let (params, traj) = train_feature(&cfg_run, &init, &data)?;

        let (probs, _) = forward(&params, data.features())?;
        let ar = acc_rand(&probs, data.labels())?;
        let acc = accuracy(&probs, data.labels())?;
        let class1: Vec<f64> = (0..probs.rows()).map(|i| probs.get(i, 1)).collect();
        let gap = dp_gap(&class1, data.groups())?;
        let _ = writeln!(frontier, "{lambda},{ar},{acc},{gap}");

        let model_path = out.join(format!("model_{idx:02}.json"));
        write_json(&model_path, &params)?;
        report.add_artifact(&format!("model_lambda_{lambda}"), &model_path);
        let traj_path = out.join(format!("trajectory_{idx:02}.csv"));
        write_trajectory(&traj_path, &traj)?;
        report.add_artifact(&format!("trajectory_lambda_{lambda}"), &traj_path);

        report.metrics.insert(format!("acc_rand_lambda_{lambda}"), ar);
        report.metrics.insert(format!("accuracy_lambda_{lambda}"), acc);
        report.metrics.insert(format!("dp_gap_lambda_{lambda}"), gap);
    }

    let frontier_path = out.join("frontier.csv");
    write_text(&frontier_path, &frontier)?;
    report.add_artifact("frontier", &frontier_path);
    seal_report(report, out, started)
}

// ---------------------------------------------------------------------------
// barycenter
// ---------------------------------------------------------------------------

const BARYCENTER_KEYS: &[&str] =
    &["data", "tol", "max_iter", "bins", "w2_threshold", "seed"];

/// Per-dimension, per-group-pair 1D marginal W2 distances, largest first in
/// the metric names so thresholds read naturally.
fn group_pair_w2(data: &TabularDataset) -> Result<Vec<(usize, usize, usize, f64)>> {
    let n_groups = data.n_groups();
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in data.groups().iter().enumerate() {
        by_group[g].push(i);
    }
    let mut rows = Vec::new();
    for a in 0..n_groups {
        for b in (a + 1)..n_groups {
            for k in 0..data.dim() {
                let col = |rowset: &[usize]| -> Result<PointCloud> {
                    let vals: Vec<f64> =
                        rowset.iter().map(|&i| data.features().get(i, k)).collect();
                    PointCloud::from_scalars(&vals)
                };
                let w2 = w2_distance(&col(&by_group[a])?, &col(&by_group[b])?)?;
                rows.push((a, b, k, w2));
            }
        }
    }
    Ok(rows)
}

/// Largest pairwise sup log-odds between per-group binned marginals, with
/// add-one smoothing so sparsely hit bins stay comparable across datasets.
fn binned_group_log_odds(data: &TabularDataset, bins: usize) -> Result<f64> {
    let n_groups = data.n_groups();
    let mut worst: f64 = 0.0;
    for k in 0..data.dim() {
        let vals: Vec<f64> = (0..data.len()).map(|i| data.features().get(i, k)).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![vec![0usize; bins]; n_groups];
        for (i, &v) in vals.iter().enumerate() {
            let b = if hi > lo {
                (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            counts[data.groups()[i]][b] += 1;
        }
        let pmfs: Vec<CategoricalPMF> = counts
            .iter()
            .map(|c| {
                let total: usize = c.iter().sum();
                let probs: Vec<f64> = c
                    .iter()
                    .map(|&n| (n as f64 + 1.0) / (total as f64 + bins as f64))
                    .collect();
                CategoricalPMF::from_weights(&probs)
            })
            .collect::<Result<_>>()?;
        for a in 0..n_groups {
            for b in (a + 1)..n_groups {
                worst = worst.max(empirical_sup_log_odds(&pmfs[a], &pmfs[b])?);
            }
        }
    }
    Ok(worst)
}

/// Feature neutralization: transports every group's rows onto the common
/// barycenter and reports how far apart the group marginals were before and
/// after. The neutralized CSV keeps the original schema and row order and
/// appends an `orig_row` column.
pub fn run_barycenter(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let started = Instant::now();
    cfg.check_allowed(BARYCENTER_KEYS)?;
    let mut r = Resolver::new(cfg);

    let data_path = r.required("data")?;
    let tol = r.f64("tol", 1e-7)?;
    let max_iter = r.usize("max_iter", 200)?;
    let bins = r.usize("bins", 10)?;
    let w2_threshold = r.f64_opt("w2_threshold")?;
    let seed = r.u64("seed", 0)?;
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }

    let data = load_dataset(&data_path)?;
    let pre_w2 = group_pair_w2(&data)?;
    let pre_odds = binned_group_log_odds(&data, bins)?;

    let neutralized = neutralize_dataset(&data, tol, max_iter, seed)?;
    let post_w2 = group_pair_w2(&neutralized)?;
    let post_odds = binned_group_log_odds(&neutralized, bins)?;

    let mut report = RunReport::new("barycenter", r.finish());
    let out_path = out.join("neutralized.csv");
    let mut csv = String::new();
    let _ = write!(csv, "{}", TabularDataset::csv_header(neutralized.dim()));
    csv.push_str(",orig_row\n");
    for i in 0..neutralized.len() {
        for v in neutralized.features().row(i) {
            let _ = write!(csv, "{v},");
        }
        let _ = writeln!(csv, "{},{},{i}", neutralized.labels()[i], neutralized.groups()[i]);
    }
    write_text(&out_path, &csv)?;
    report.add_artifact("neutralized", &out_path);

    let mut worst_post: f64 = 0.0;
    for &(a, b, k, w2) in &pre_w2 {
        report.metrics.insert(format!("w2_pre_g{a}g{b}_f{k}"), w2);
    }
    for &(a, b, k, w2) in &post_w2 {
        report.metrics.insert(format!("w2_post_g{a}g{b}_f{k}"), w2);
        worst_post = worst_post.max(w2);
    }
    report.metrics.insert("sup_log_odds_pre".into(), pre_odds);
    report.metrics.insert("sup_log_odds_post".into(), post_odds);
    let report = seal_report(report, out, started)?;

    if let Some(threshold) = w2_threshold {
        if !(worst_post <= threshold) {
            return Err(Error::NonConvergence {
                what: "post-neutralization group marginal W2".into(),
                residual: worst_post,
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

const AUDIT_KEYS: &[&str] = &["outputs", "epsilon"];

fn read_outputs_csv(path: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot open outputs `{path}`: {e}")))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Data { line: 0, message: "empty file".into() });
    };
    if header.trim() != "output_bin,z" {
        return Err(Error::Data {
            line: 1,
            message: format!("expected header `output_bin,z`, got `{}`", header.trim()),
        });
    }
    let mut bins = Vec::new();
    let mut zs = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((b, z)) = line.split_once(',') else {
            return Err(Error::Data {
                line: lineno,
                message: format!("expected `bin,z`, got `{line}`"),
            });
        };
        let bin: usize = b.trim().parse().map_err(|_| Error::Data {
            line: lineno,
            message: format!("bad bin `{b}`"),
        })?;
        let zv: usize = z.trim().parse().map_err(|_| Error::Data {
            line: lineno,
            message: format!("bad slot label `{z}`"),
        })?;
        if zv > 1 {
            return Err(Error::Data {
                line: lineno,
                message: format!("slot label must be 0 or 1, got {zv}"),
            });
        }
        bins.push(bin);
        zs.push(zv);
    }
    if bins.is_empty() {
        return Err(Error::Data { line: 0, message: "no data rows".into() });
    }
    Ok((bins, zs))
}

/// Independent audit of dumped outputs: recomputes the per-slot PMFs, the
/// mixture mutual information at equal slot prior, and the empirical sup
/// log-odds, then issues a compression-rate certificate at the configured
/// tolerance. The command fails (exit 4) when the measured log-odds exceed
/// the tolerance or the certificate is vacuous.
pub fn run_audit(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let started = Instant::now();
    cfg.check_allowed(AUDIT_KEYS)?;
    let mut r = Resolver::new(cfg);

    let outputs_path = r.required("outputs")?;
    let epsilon = r.f64("epsilon", 0.25)?;

    let (bins, zs) = read_outputs_csv(&outputs_path)?;
    let (mi, sup) = binned_audit_stats(&bins, &zs)?;
    log::info!("audit: mu {} nats, sup log-odds {sup}", mi.nats());

    let certificate = UnlearningCertificate::compression_rate(mi, epsilon, 0.5)?;
    let mut report = RunReport::new("audit", r.finish());
    let cert_path = out.join("certificate.json");
    write_json(&cert_path, &certificate)?;
    report.add_artifact("certificate", &cert_path);
    report.metrics.insert("mu_nats".into(), mi.nats());
    report.metrics.insert("sup_log_odds".into(), sup);
    report.metrics.insert("confidence".into(), certificate.confidence);
    report.metrics.insert("rows".into(), bins.len() as f64);
    report.certificate = Some(certificate);
    let report = seal_report(report, out, started)?;

    if sup > epsilon {
        return Err(Error::AuditFailed { sup_log_odds: sup, epsilon });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand_distr::Normal as TestNormal;
    use std::path::PathBuf;
    use tempfile::TempDir;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::parse(text).unwrap()
    }

    #[test]
    fn config_parses_comments_blanks_and_trimming() {
        let c = cfg("# a comment\n\n  lambda = 0.5 \nseed=3\n");
        assert_eq!(c.raw("lambda"), Some("0.5"));
        assert_eq!(c.raw("seed"), Some("3"));
        assert_eq!(c.raw("missing"), None);
    }

    #[test]
    fn config_rejects_duplicates_and_malformed_lines() {
        assert!(matches!(ExperimentConfig::parse("a = 1\na = 2\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("just words\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("= 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn config_unknown_key_is_rejected() {
        let c = cfg("epsilon = 0.1\ntypo_key = 4\n");
        assert!(matches!(c.check_allowed(&["epsilon"]), Err(Error::Config(_))));
        assert!(c.check_allowed(&["epsilon", "typo_key"]).is_ok());
    }

    #[test]
    fn resolver_reports_type_errors_and_echoes_defaults() {
        let c = cfg("epochs = many\n");
        let mut r = Resolver::new(&c);
        assert!(matches!(r.usize("epochs", 3), Err(Error::Config(_))));

        let c = cfg("");
        let mut r = Resolver::new(&c);
        assert_eq!(r.f64("lambda", 0.25).unwrap(), 0.25);
        assert_eq!(r.finish().get("lambda").map(String::as_str), Some("0.25"));
    }

    #[test]
    fn resolver_parses_lambda_lists() {
        let c = cfg("lambda_list = 0, 0.3 ,0.9\n");
        let mut r = Resolver::new(&c);
        assert_eq!(r.f64_list("lambda_list", &[]).unwrap(), vec![0.0, 0.3, 0.9]);
        let c = cfg("lambda_list = 0,oops\n");
        let mut r = Resolver::new(&c);
        assert!(r.f64_list("lambda_list", &[]).is_err());
    }

    fn write_outputs(dir: &Path, rows: &[(usize, usize)]) -> PathBuf {
        let path = dir.join("outputs.csv");
        let mut text = String::from("output_bin,z\n");
        for &(b, z) in rows {
            let _ = writeln!(text, "{b},{z}");
        }
        write_text(&path, &text).unwrap();
        path
    }

    #[test]
    fn audit_identical_slots_passes_with_full_confidence() {
        let dir = TempDir::new().unwrap();
        let rows: Vec<(usize, usize)> =
            (0..12).map(|i| (i % 3, i % 2)).collect();
        let outputs = write_outputs(dir.path(), &rows);
        let c = cfg(&format!("outputs = {}\nepsilon = 0.2\n", outputs.display()));
        let report = run_audit(&c, dir.path()).unwrap();
        assert_relative_eq!(report.metrics["mu_nats"], 0.0, epsilon = 1e-15);
        assert_relative_eq!(report.metrics["sup_log_odds"], 0.0, epsilon = 1e-15);
        assert_relative_eq!(report.metrics["confidence"], 1.0, epsilon = 1e-12);
        assert!(dir.path().join("certificate.json").exists());
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn audit_exclusive_bin_fails_at_any_epsilon() {
        let dir = TempDir::new().unwrap();
        // Bin 2 only ever appears with z = 0.
        let rows = [(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (1, 1)];
        let outputs = write_outputs(dir.path(), &rows);
        let c = cfg(&format!("outputs = {}\nepsilon = 50.0\n", outputs.display()));
        match run_audit(&c, dir.path()) {
            Err(Error::AuditFailed { sup_log_odds, .. }) => {
                assert!(sup_log_odds.is_infinite())
            }
            other => panic!("expected audit failure, got {other:?}"),
        }
    }

    #[test]
    fn audit_matches_hand_computed_three_bin_certificate() {
        let dir = TempDir::new().unwrap();
        // Slot 0: bins 0,0,1,2 -> (1/2, 1/4, 1/4); slot 1: 0,1,1,2 -> (1/4, 1/2, 1/4).
        let rows = [(0, 0), (0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (1, 1), (2, 1)];
        let outputs = write_outputs(dir.path(), &rows);
        let eps = 0.8;
        let c = cfg(&format!("outputs = {}\nepsilon = {eps}\n", outputs.display()));
        let report = run_audit(&c, dir.path()).unwrap();

        // Mixture (3/8, 3/8, 1/4); both conditionals are permutations of each
        // other so their KL terms to the mixture are equal.
        let kl = 0.25 * (0.25f64 / 0.375).ln()
            + 0.5 * (0.5f64 / 0.375).ln()
            + 0.25 * (0.25f64 / 0.25).ln();
        let mu = kl;
        assert_abs_diff_eq!(report.metrics["mu_nats"], mu, epsilon = 1e-15);
        assert_abs_diff_eq!(report.metrics["sup_log_odds"], 2.0f64.ln(), epsilon = 1e-15);
        let confidence = 1.0 - (mu / 2.0).sqrt() / (eps / 2.0f64).tanh();
        assert_abs_diff_eq!(report.metrics["confidence"], confidence, epsilon = 1e-12);
    }

    #[test]
    fn audit_rejects_missing_slot_and_bad_rows() {
        let dir = TempDir::new().unwrap();
        let outputs = write_outputs(dir.path(), &[(0, 0), (1, 0)]);
        let c = cfg(&format!("outputs = {}\n", outputs.display()));
        assert!(matches!(run_audit(&c, dir.path()), Err(Error::MissingGroup(_))));

        let bad = dir.path().join("bad.csv");
        write_text(&bad, "output_bin,z\n0,7\n").unwrap();
        let c = cfg(&format!("outputs = {}\n", bad.display()));
        match run_audit(&c, dir.path()) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected data error, got {other:?}"),
        }

        let worse = dir.path().join("worse.csv");
        write_text(&worse, "wrong,header\n0,0\n").unwrap();
        let c = cfg(&format!("outputs = {}\n", worse.display()));
        assert!(matches!(run_audit(&c, dir.path()), Err(Error::Data { line: 1, .. })));
    }

    /// Two Gaussian blobs per class, groups correlated with the class.
    fn blob_csv(dir: &Path, name: &str, n_per_class: usize, classes: usize, seed: u64) -> PathBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = TestNormal::new(0.0, 0.4).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for c in 0..classes {
            let angle = c as f64 * 2.0 * std::f64::consts::PI / classes as f64;
            for i in 0..n_per_class {
                rows.push(vec![
                    2.0 * angle.cos() + noise.sample(&mut rng),
                    2.0 * angle.sin() + noise.sample(&mut rng),
                ]);
                labels.push(c);
                groups.push(if i % 3 == 0 { 1 - c.min(1) } else { c.min(1) });
            }
        }
        let data =
            TabularDataset::new(Matrix::from_rows(&rows).unwrap(), labels, groups).unwrap();
        let path = dir.join(name);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        write_text(&path, std::str::from_utf8(&buf).unwrap()).unwrap();
        path
    }

    #[test]
    fn unlearn_run_emits_consistent_artifacts_and_certificate() {
        let dir = TempDir::new().unwrap();
        let retain = blob_csv(dir.path(), "retain.csv", 30, 2, 11);
        let unlearn = blob_csv(dir.path(), "unlearn.csv", 30, 2, 12);
        let c = cfg(&format!(
            "retain = {}\nunlearn = {}\nmethod = marginal_mi\nepochs = 4\nfinetune_epochs = 6\nhidden = 8\nepsilon = 2.0\nseed = 5\n",
            retain.display(),
            unlearn.display()
        ));
        let report = run_unlearn_classifier(&c, dir.path()).unwrap();
        for name in ["trajectory", "finetune_trajectory", "model", "outputs", "certificate"] {
            assert!(report.artifacts.contains_key(name), "missing artifact {name}");
        }
        let cert = report.certificate.as_ref().unwrap();
        assert_eq!(report.metrics["certificate_mu_nats"], cert.mu_nats);

        // Re-auditing the dumped outputs must rebuild the same certificate.
        let audit_dir = TempDir::new().unwrap();
        let c2 = cfg(&format!(
            "outputs = {}\nepsilon = 2.0\n",
            dir.path().join(&report.artifacts["outputs"]).display()
        ));
        let audit = run_audit(&c2, audit_dir.path()).unwrap();
        let recomputed = audit.certificate.as_ref().unwrap();
        assert_eq!(cert.mu_nats, recomputed.mu_nats);
        assert_eq!(cert.confidence, recomputed.confidence);
    }

    #[test]
    fn unlearn_duplicate_retain_rows_certify_with_high_confidence() {
        let dir = TempDir::new().unwrap();
        let retain = blob_csv(dir.path(), "retain.csv", 40, 2, 21);
        let c = cfg(&format!(
            "retain = {r}\nunlearn = {r}\nmethod = marginal_mi\nepochs = 2\nfinetune_epochs = 8\nhidden = 8\nepsilon = 1.0\nseed = 2\n",
            r = retain.display()
        ));
        let report = run_unlearn_classifier(&c, dir.path()).unwrap();
        // Identical datasets: the marginal mixture sits on the retain
        // distribution, so the measured budget is tiny.
        assert!(report.metrics["certificate_mu_nats"] < 0.05);
        assert!(report.metrics["confidence"] > 0.9);
    }

    #[test]
    fn unlearn_is_deterministic_across_reruns() {
        let base = TempDir::new().unwrap();
        let retain = blob_csv(base.path(), "retain.csv", 25, 2, 31);
        let unlearn = blob_csv(base.path(), "unlearn.csv", 25, 2, 32);
        let text = format!(
            "retain = {}\nunlearn = {}\nepochs = 3\nfinetune_epochs = 4\nhidden = 8\nepsilon = 2.0\nseed = 9\n",
            retain.display(),
            unlearn.display()
        );
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        run_unlearn_classifier(&cfg(&text), d1.path()).unwrap();
        run_unlearn_classifier(&cfg(&text), d2.path()).unwrap();
        for name in ["trajectory.csv", "model.json", "outputs.csv", "certificate.json", "report.json"]
        {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
    }

    #[test]
    fn feature_frontier_has_one_row_per_lambda() {
        let dir = TempDir::new().unwrap();
        let data = blob_csv(dir.path(), "data.csv", 30, 2, 41);
        let c = cfg(&format!(
            "data = {}\nlambda_list = 0,0.5\nepochs = 3\nhidden = 8\nseed = 4\n",
            data.display()
        ));
        let report = run_feature_unlearn(&c, dir.path()).unwrap();
        let frontier =
            std::fs::read_to_string(dir.path().join(&report.artifacts["frontier"])).unwrap();
        let lines: Vec<&str> = frontier.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "lambda,acc_rand,accuracy,dp_gap");
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("0.5,"));

        let single = cfg(&format!(
            "data = {}\nlambda_list = 0\nepochs = 2\nhidden = 8\nseed = 4\n",
            data.display()
        ));
        let dir2 = TempDir::new().unwrap();
        let report = run_feature_unlearn(&single, dir2.path()).unwrap();
        let frontier =
            std::fs::read_to_string(dir2.path().join(&report.artifacts["frontier"])).unwrap();
        assert_eq!(frontier.lines().count(), 2);
    }

    #[test]
    fn feature_unlearn_rejects_single_group_data() {
        let dir = TempDir::new().unwrap();
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5], vec![1.0, 1.0]];
        let data = TabularDataset::new(
            Matrix::from_rows(&rows).unwrap(),
            vec![0, 1, 0, 1],
            vec![0, 0, 0, 0],
        )
        .unwrap();
        let path = dir.path().join("single.csv");
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        write_text(&path, std::str::from_utf8(&buf).unwrap()).unwrap();
        let c = cfg(&format!("data = {}\nepochs = 2\n", path.display()));
        assert!(matches!(run_feature_unlearn(&c, dir.path()), Err(Error::MissingGroup(_))));
    }

    fn shifted_group_csv(dir: &Path, shift: f64, sizes: [usize; 2], seed: u64) -> PathBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = TestNormal::new(0.0, 0.7).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for z in 0..2usize {
            for i in 0..sizes[z] {
                let offset = if z == 0 { 0.0 } else { shift };
                rows.push(vec![offset + noise.sample(&mut rng)]);
                labels.push(i % 2);
                groups.push(z);
            }
        }
        let data =
            TabularDataset::new(Matrix::from_rows(&rows).unwrap(), labels, groups).unwrap();
        let path = dir.join("groups.csv");
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        write_text(&path, std::str::from_utf8(&buf).unwrap()).unwrap();
        path
    }

    #[test]
    fn barycenter_run_equalizes_group_means_and_reports_recomputable_fields() {
        let dir = TempDir::new().unwrap();
        let data_path = shifted_group_csv(dir.path(), 2.5, [30, 30], 51);
        let c = cfg(&format!("data = {}\nmax_iter = 100\nseed = 6\n", data_path.display()));
        let report = run_barycenter(&c, dir.path()).unwrap();

        // The neutralized file has an extra column, so read it by hand.
        let text = std::fs::read_to_string(dir.path().join("neutralized.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "f0,y,z,orig_row");
        let mut means = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4);
            assert_eq!(fields[3].parse::<usize>().unwrap(), i);
            let z: usize = fields[2].parse().unwrap();
            means[z] += fields[0].parse::<f64>().unwrap();
            counts[z] += 1;
        }
        let m0 = means[0] / counts[0] as f64;
        let m1 = means[1] / counts[1] as f64;
        assert_abs_diff_eq!(m0, m1, epsilon = 1e-6);

        assert!(report.metrics["w2_pre_g0g1_f0"] > 1.0);
        assert!(report.metrics["w2_post_g0g1_f0"] < 0.2);
        assert!(report.metrics["sup_log_odds_post"] < report.metrics["sup_log_odds_pre"]);
    }

    #[test]
    fn barycenter_identical_groups_change_little_and_threshold_fires() {
        let dir = TempDir::new().unwrap();
        let data_path = shifted_group_csv(dir.path(), 0.0, [25, 25], 61);
        let c = cfg(&format!("data = {}\nseed = 3\n", data_path.display()));
        let report = run_barycenter(&c, dir.path()).unwrap();
        assert!(report.metrics["w2_post_g0g1_f0"] <= report.metrics["w2_pre_g0g1_f0"] + 1e-9);

        // Unequal group sizes leave a small but nonzero residual: the two
        // quantile maps hit different subsets of the barycenter support.
        let strict = cfg(&format!(
            "data = {}\nseed = 3\nw2_threshold = 0.0\n",
            shifted_group_csv(dir.path(), 3.0, [25, 34], 62).display()
        ));
        let dir2 = TempDir::new().unwrap();
        assert!(matches!(
            run_barycenter(&strict, dir2.path()),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn forget_gaussian_smoke_run_is_deterministic() {
        let text = "n_retain = 120\nn_unlearn = 120\ngrid_points = 41\npretrain_epochs = 30\nepochs = 5\nhidden = 8\nseed = 7\ntv_threshold = 1.0\n";
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        run_forget_gaussian(&cfg(text), d1.path()).unwrap();
        run_forget_gaussian(&cfg(text), d2.path()).unwrap();
        for name in [
            "grid.csv",
            "kde_trace_retain.csv",
            "kde_trace_unlearn.csv",
            "trajectory.csv",
            "model.json",
            "report.json",
        ] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }

        // Trace rows: header plus epochs + 1 density rows.
        let trace = std::fs::read_to_string(d1.path().join("kde_trace_retain.csv")).unwrap();
        assert_eq!(trace.lines().count(), 7);
        assert_eq!(trace.lines().next().unwrap().split(',').count(), 42);
    }

    #[test]
    fn forget_gaussian_rejects_bad_settings() {
        let dir = TempDir::new().unwrap();
        for bad in [
            "gauss_mean = 9\n",
            "gauss_std = 0\n",
            "method = feature_mi\n",
            "grid_bound = -1\n",
            "nonsense = 1\n",
        ] {
            assert!(
                matches!(run_forget_gaussian(&cfg(bad), dir.path()), Err(Error::Config(_))),
                "expected config rejection for {bad:?}"
            );
        }
    }
}
