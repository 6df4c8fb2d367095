//! Unlearning objectives, marginal-pair construction, training loops with
//! early stopping, and the evaluation metrics they report.
//!
//! Classifier losses operate on batch softmax outputs and return exact
//! gradients with respect to those outputs; [`crate::smallnet::backward`]
//! pulls them through the network. Scalar losses operate on model outputs
//! through a grid KDE and return gradients with respect to the raw outputs.
//! Both families clamp logarithms at [`LOG_FLOOR`] and differentiate the
//! clamped expression, so finite differences of the reported value agree with
//! the gradient even where a floor binds.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densities::{kde_on_grid, CategoricalPMF, DiscreteDensity, GridDensity, TabularDataset};
use crate::error::{Error, Result};
use crate::infotheory::{mutual_info_mixture, InfoValue};
use crate::matrix::Matrix;
use crate::smallnet::{
    adam_step, backward, forward, kde_loss_gradient, kde_loss_value, kde_value_adjoint, Arch,
    KdeLoss, ModelParams, OptimizerState, LOG_FLOOR,
};

/// Which objective drives an unlearning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MarginalMi,
    GradDiff,
    KlAnchor,
    FeatureMi,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::MarginalMi => "marginal_mi",
            Method::GradDiff => "grad_diff",
            Method::KlAnchor => "kl_anchor",
            Method::FeatureMi => "feature_mi",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal_mi" => Ok(Method::MarginalMi),
            "grad_diff" => Ok(Method::GradDiff),
            "kl_anchor" => Ok(Method::KlAnchor),
            "feature_mi" => Ok(Method::FeatureMi),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected marginal_mi, grad_diff, kl_anchor, or feature_mi)"
            ))),
        }
    }
}

/// Early-stopping predicate family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopKind {
    /// Stop when the validation mutual information falls to `threshold`
    /// times its value before training.
    MiRatio { threshold: f64 },
    /// Stop when the teacher-to-student divergence on the retain validation
    /// split falls to `threshold` times its value before training.
    KdRatio { threshold: f64 },
    /// Stop when unlearn validation accuracy falls to `1/classes + margin`.
    ChanceAccuracy { margin: f64 },
}

/// Early-stopping rule: the predicate must hold for `patience` consecutive
/// epochs, and stopping never happens before `min_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopRule {
    pub kind: StopKind,
    pub min_epochs: usize,
    pub patience: usize,
}

impl EarlyStopRule {
    pub fn mi_ratio() -> Self {
        EarlyStopRule { kind: StopKind::MiRatio { threshold: 0.85 }, min_epochs: 1, patience: 1 }
    }

    pub fn kd_ratio() -> Self {
        EarlyStopRule { kind: StopKind::KdRatio { threshold: 0.85 }, min_epochs: 1, patience: 1 }
    }

    pub fn chance_accuracy() -> Self {
        EarlyStopRule {
            kind: StopKind::ChanceAccuracy { margin: 0.02 },
            min_epochs: 1,
            patience: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            StopKind::MiRatio { threshold } | StopKind::KdRatio { threshold } => {
                if !(threshold > 0.0 && threshold <= 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "stop threshold must lie in (0, 1], got {threshold}"
                    )));
                }
            }
            StopKind::ChanceAccuracy { margin } => {
                if !margin.is_finite() || margin < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "chance-accuracy margin must be finite and non-negative, got {margin}"
                    )));
                }
            }
        }
        if self.patience == 0 {
            return Err(Error::InvalidInput("stop patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Configuration for one unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: Method,
    /// Trade-off between the utility term and the regularizer, in [0, 1].
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Retain fraction |R| / (|R| + |U|) used by the marginal mixture, in (0, 1].
    pub alpha: f64,
    /// Mixture prior on the retain side of the marginal pair, in (0, 1).
    pub prior: f64,
    /// Cap, in nats per sample, on the repelled cross-entropy term.
    pub c_max: f64,
    pub stop_rule: EarlyStopRule,
    pub seed: u64,
}

impl UnlearnConfig {
    /// Defaults pair each objective with the stop rule that monitors it.
    pub fn new(method: Method) -> Self {
        let stop_rule = match method {
            Method::MarginalMi | Method::FeatureMi => EarlyStopRule::mi_ratio(),
            Method::GradDiff => EarlyStopRule::chance_accuracy(),
            Method::KlAnchor => EarlyStopRule::kd_ratio(),
        };
        UnlearnConfig {
            method,
            lambda: 0.5,
            epochs: 20,
            batch_size: 32,
            alpha: 0.5,
            prior: 0.5,
            c_max: 20.0,
            stop_rule,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::InvalidInput(format!(
                "prior must lie in (0, 1), got {}",
                self.prior
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be at least 1".into()));
        }
        if !(self.c_max > 0.0) {
            return Err(Error::InvalidInput(format!(
                "c_max must be positive, got {}",
                self.c_max
            )));
        }
        self.stop_rule.validate()
    }
}

/// The validation rows [`train_unlearn`] holds out, recomputed from the seed.
/// It must mirror that function's first two draws from the master generator.
pub fn unlearn_validation_indices(
    seed: u64,
    retain_labels: &[usize],
    unlearn_labels: &[usize],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, r_val) = stratified_split(retain_labels, 0.8, &mut rng)?;
    let (_, u_val) = stratified_split(unlearn_labels, 0.8, &mut rng)?;
    Ok((r_val, u_val))
}

/// Retain fraction |R| / (|R| + |U|) computed from dataset sizes.
pub fn auto_alpha(n_retain: usize, n_unlearn: usize) -> Result<f64> {
    if n_retain == 0 || n_unlearn == 0 {
        return Err(Error::InvalidInput("both datasets must be non-empty".into()));
    }
    Ok(n_retain as f64 / (n_retain + n_unlearn) as f64)
}

/// One evaluated epoch. `monitor` always carries the quantity the configured
/// stop rule reads: the validation mutual information for `mi_ratio`, the
/// teacher-to-student divergence for `kd_ratio`, and the unlearn validation
/// accuracy for `chance_accuracy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub retain_acc: f64,
    pub unlearn_acc: f64,
    pub mi_margin: InfoValue,
    pub loss_total: f64,
    pub loss_utility: f64,
    pub loss_reg: f64,
    pub monitor: f64,
}

impl EpochRecord {
    fn is_finite(&self) -> bool {
        self.retain_acc.is_finite()
            && self.unlearn_acc.is_finite()
            && self.mi_margin.is_finite()
            && self.loss_total.is_finite()
            && self.loss_utility.is_finite()
            && self.loss_reg.is_finite()
            && self.monitor.is_finite()
    }
}

/// Per-epoch evaluation log of a training run. The baseline row is evaluated
/// before the first optimizer step: its loss columns hold the objective over
/// the full training split, while later rows average over that epoch's
/// minibatches. Metric columns are always validation-split quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrajectory {
    pub baseline: EpochRecord,
    pub records: Vec<EpochRecord>,
    /// Epoch at which the stop rule fired, if it did.
    pub stopped_epoch: Option<usize>,
    /// Output classes of the trained model; the chance-accuracy rule needs it.
    pub classes: usize,
    /// True when some minibatch was missing a group and the feature
    /// regularizer renormalized over the groups present.
    pub group_skipped: bool,
}

impl TrainTrajectory {
    /// The last evaluated record (the baseline when no epoch ran).
    pub fn last(&self) -> &EpochRecord {
        self.records.last().unwrap_or(&self.baseline)
    }

    /// Re-applies a stop rule to the recorded trajectory.
    pub fn replay_stop(&self, rule: &EarlyStopRule) -> Option<usize> {
        early_stop_check(rule, self.classes, &self.baseline, &self.records)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "epoch,retain_acc,unlearn_acc,mi_margin_nats,loss_total,loss_utility,loss_reg,monitor"
        )?;
        for r in std::iter::once(&self.baseline).chain(self.records.iter()) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.retain_acc,
                r.unlearn_acc,
                r.mi_margin.nats(),
                r.loss_total,
                r.loss_utility,
                r.loss_reg,
                r.monitor
            )?;
        }
        Ok(())
    }
}

/// Stop decision over an evaluated trajectory: the first epoch at which the
/// rule's predicate has held for `patience` consecutive epochs, subject to
/// `min_epochs`. Ratio rules compare against the baseline row.
pub fn early_stop_check(
    rule: &EarlyStopRule,
    classes: usize,
    baseline: &EpochRecord,
    records: &[EpochRecord],
) -> Option<usize> {
    let holds = |r: &EpochRecord| -> bool {
        match rule.kind {
            StopKind::MiRatio { threshold } => {
                r.mi_margin.nats() <= threshold * baseline.mi_margin.nats()
            }
            StopKind::KdRatio { threshold } => r.monitor <= threshold * baseline.monitor,
            StopKind::ChanceAccuracy { margin } => {
                r.unlearn_acc <= 1.0 / classes as f64 + margin
            }
        }
    };
    let mut run = 0usize;
    for r in records {
        if holds(r) {
            run += 1;
        } else {
            run = 0;
        }
        if r.epoch >= rule.min_epochs && run >= rule.patience {
            return Some(r.epoch);
        }
    }
    None
}

/// Mixture pair for marginal unlearning: the retain side unchanged, and the
/// all-data side as the `alpha`-weighted mixture of retain and unlearn.
/// Returns `(P0, P1)` with `P1` the retain density.
pub fn build_marginal_pair<D: DiscreteDensity>(
    retain: &D,
    unlearn: &D,
    alpha: f64,
) -> Result<(D, D)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if !retain.same_support(unlearn) {
        return Err(Error::SupportMismatch(format!(
            "retain is {} but unlearn is {}",
            retain.support_label(),
            unlearn.support_label()
        )));
    }
    let masses: Vec<f64> = retain
        .masses()
        .iter()
        .zip(unlearn.masses())
        .map(|(&r, &u)| alpha * r + (1.0 - alpha) * u)
        .collect();
    let p0 = retain.with_masses(masses)?;
    Ok((p0, retain.clone()))
}

/// Mutual information between the marginal pair under the given prior on the
/// retain side.
pub fn marginal_mi_loss<D: DiscreteDensity>(p0: &D, p1: &D, prior: f64) -> Result<InfoValue> {
    mutual_info_mixture(p0, p1, prior)
}

/// Value and output-space gradients of a two-batch classifier objective.
/// `utility` and `reg` are the unweighted sub-terms; `total` combines them
/// with the configured trade-off.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub total: f64,
    pub utility: f64,
    pub reg: f64,
    pub grad_retain: Matrix,
    pub grad_unlearn: Matrix,
}

/// Value and output-space gradient of the single-batch feature objective.
#[derive(Debug, Clone)]
pub struct FeatureLossEval {
    pub total: f64,
    pub utility: f64,
    pub reg: f64,
    pub grad: Matrix,
    /// True when a declared group had no sample in this batch.
    pub group_skipped: bool,
}

/// Value and per-sample gradients of a scalar-output objective evaluated
/// through grid KDEs.
#[derive(Debug, Clone)]
pub struct ScalarLossEval {
    pub total: f64,
    pub utility: f64,
    pub reg: f64,
    pub grad_retain: Vec<f64>,
    pub grad_unlearn: Vec<f64>,
}

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

fn ind(x: f64) -> f64 {
    if x > LOG_FLOOR {
        1.0
    } else {
        0.0
    }
}

fn check_batch(probs: &Matrix, what: &str) -> Result<()> {
    if probs.rows() == 0 {
        return Err(Error::InvalidInput(format!("{what} batch is empty")));
    }
    if probs.cols() < 2 {
        return Err(Error::InvalidInput(format!(
            "{what} batch must have at least 2 output columns, got {}",
            probs.cols()
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, cols: usize, what: &str) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} labels for {} rows",
            labels.len(),
            rows
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::InvalidInput(format!(
            "{what}: label {l} out of range for {cols} classes"
        )));
    }
    Ok(())
}

/// Column means of a probability matrix.
fn column_means(probs: &Matrix) -> Vec<f64> {
    let mut means = vec![0.0; probs.cols()];
    for row in probs.iter_rows() {
        for (m, &p) in means.iter_mut().zip(row) {
            *m += p;
        }
    }
    let inv = 1.0 / probs.rows() as f64;
    for m in &mut means {
        *m *= inv;
    }
    means
}

/// Mean clamped cross-entropy of rows against integer labels, with the
/// gradient contribution `scale * dCE/dp` added into `grad`.
fn mean_label_ce(probs: &Matrix, labels: &[usize], scale: f64, grad: &mut Matrix) -> f64 {
    let n = probs.rows() as f64;
    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.get(i, y);
        ce -= clamped_ln(p);
        if scale != 0.0 {
            grad.add_at(i, y, -scale * ind(p) / (n * p.max(LOG_FLOOR)));
        }
    }
    ce / n
}

/// Marginal objective on one retain and one unlearn batch:
/// `(1 - lambda) * CE(retain) + lambda * MI(P0, P1)` where `P1` is the mean
/// retain softmax row, `Pu` the mean unlearn row, and
/// `P0 = alpha * P1 + (1 - alpha) * Pu`.
pub fn loss_marginal(
    retain_probs: &Matrix,
    unlearn_probs: &Matrix,
    retain_labels: &[usize],
    lambda: f64,
    alpha: f64,
    prior: f64,
) -> Result<LossEval> {
    check_batch(retain_probs, "retain")?;
    check_batch(unlearn_probs, "unlearn")?;
    if retain_probs.cols() != unlearn_probs.cols() {
        return Err(Error::ShapeMismatch(format!(
            "retain has {} classes but unlearn has {}",
            retain_probs.cols(),
            unlearn_probs.cols()
        )));
    }
    check_labels(retain_labels, retain_probs.rows(), retain_probs.cols(), "retain")?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::InvalidInput(format!("prior must lie in (0, 1), got {prior}")));
    }

    let n_r = retain_probs.rows() as f64;
    let n_u = unlearn_probs.rows() as f64;
    let mut grad_retain = Matrix::zeros(retain_probs.rows(), retain_probs.cols());
    let mut grad_unlearn = Matrix::zeros(unlearn_probs.rows(), unlearn_probs.cols());

    let utility = mean_label_ce(retain_probs, retain_labels, 1.0 - lambda, &mut grad_retain);

    let p1 = column_means(retain_probs);
    let pu = column_means(unlearn_probs);
    let mut reg = 0.0;
    // Per-class gradient of the clamped mixture information with respect to
    // the batch means; the indicator terms are the exact clamp derivatives.
    let mut d_p1 = vec![0.0; p1.len()];
    let mut d_p0 = vec![0.0; p1.len()];
    for k in 0..p1.len() {
        let p0 = alpha * p1[k] + (1.0 - alpha) * pu[k];
        let m = prior * p1[k] + (1.0 - prior) * p0;
        let l1 = clamped_ln(p1[k]);
        let l0 = clamped_ln(p0);
        let lm = clamped_ln(m);
        reg += prior * p1[k] * (l1 - lm) + (1.0 - prior) * p0 * (l0 - lm);
        d_p1[k] = prior * (l1 - lm + ind(p1[k]) - ind(m));
        d_p0[k] = (1.0 - prior) * (l0 - lm + ind(p0) - ind(m));
    }
    if lambda != 0.0 {
        for i in 0..retain_probs.rows() {
            for k in 0..p1.len() {
                grad_retain.add_at(i, k, lambda * (d_p1[k] + alpha * d_p0[k]) / n_r);
            }
        }
        for j in 0..unlearn_probs.rows() {
            for k in 0..p1.len() {
                grad_unlearn.add_at(j, k, lambda * (1.0 - alpha) * d_p0[k] / n_u);
            }
        }
    }

    Ok(LossEval {
        total: (1.0 - lambda) * utility + lambda * reg,
        utility,
        reg,
        grad_retain,
        grad_unlearn,
    })
}

/// Repulsion objective `(1 - lambda) * CE(retain) - lambda * CE(unlearn)`,
/// with each unlearn sample's cross-entropy capped at `c_max` nats so the
/// repelled term cannot diverge. Capped samples contribute no gradient.
pub fn loss_grad_diff(
    retain_probs: &Matrix,
    unlearn_probs: &Matrix,
    retain_labels: &[usize],
    unlearn_labels: &[usize],
    lambda: f64,
    c_max: f64,
) -> Result<LossEval> {
    check_batch(retain_probs, "retain")?;
    check_batch(unlearn_probs, "unlearn")?;
    if retain_probs.cols() != unlearn_probs.cols() {
        return Err(Error::ShapeMismatch(format!(
            "retain has {} classes but unlearn has {}",
            retain_probs.cols(),
            unlearn_probs.cols()
        )));
    }
    check_labels(retain_labels, retain_probs.rows(), retain_probs.cols(), "retain")?;
    check_labels(unlearn_labels, unlearn_probs.rows(), unlearn_probs.cols(), "unlearn")?;
    if !(c_max > 0.0) {
        return Err(Error::InvalidInput(format!("c_max must be positive, got {c_max}")));
    }

    let mut grad_retain = Matrix::zeros(retain_probs.rows(), retain_probs.cols());
    let mut grad_unlearn = Matrix::zeros(unlearn_probs.rows(), unlearn_probs.cols());
    let utility = mean_label_ce(retain_probs, retain_labels, 1.0 - lambda, &mut grad_retain);

    let n_u = unlearn_probs.rows() as f64;
    let mut reg = 0.0;
    for (j, &y) in unlearn_labels.iter().enumerate() {
        let p = unlearn_probs.get(j, y);
        let ce = -clamped_ln(p);
        if ce < c_max {
            reg += ce;
            // Total carries -lambda * reg, so the sample gradient flips sign.
            grad_unlearn.add_at(j, y, lambda * ind(p) / (n_u * p.max(LOG_FLOOR)));
        } else {
            reg += c_max;
        }
    }
    reg /= n_u;

    Ok(LossEval {
        total: (1.0 - lambda) * utility - lambda * reg,
        utility,
        reg,
        grad_retain,
        grad_unlearn,
    })
}

/// Mean row-wise divergence `KL(teacher_row || student_row)` with clamped
/// logarithms, as the anchoring utility of a frozen teacher.
pub fn distillation_divergence(teacher: &Matrix, student: &Matrix) -> Result<f64> {
    if teacher.rows() != student.rows() || teacher.cols() != student.cols() {
        return Err(Error::ShapeMismatch(format!(
            "teacher outputs are {}x{} but student outputs are {}x{}",
            teacher.rows(),
            teacher.cols(),
            student.rows(),
            student.cols()
        )));
    }
    if teacher.rows() == 0 {
        return Err(Error::InvalidInput("teacher batch is empty".into()));
    }
    let mut kd = 0.0;
    for (t_row, s_row) in teacher.iter_rows().zip(student.iter_rows()) {
        for (&t, &s) in t_row.iter().zip(s_row) {
            kd += t * (clamped_ln(t) - clamped_ln(s));
        }
    }
    Ok(kd / teacher.rows() as f64)
}

/// Anchored objective
/// `(1 - lambda) * mean KL(teacher || student) - lambda * CE(unlearn)`.
/// The teacher batch is fixed; gradients flow into the student and unlearn
/// outputs only.
pub fn loss_kl_anchor(
    teacher_probs: &Matrix,
    student_probs: &Matrix,
    unlearn_probs: &Matrix,
    unlearn_labels: &[usize],
    lambda: f64,
) -> Result<LossEval> {
    check_batch(student_probs, "retain")?;
    check_batch(unlearn_probs, "unlearn")?;
    if teacher_probs.rows() != student_probs.rows()
        || teacher_probs.cols() != student_probs.cols()
    {
        return Err(Error::ShapeMismatch(format!(
            "teacher outputs are {}x{} but student outputs are {}x{}",
            teacher_probs.rows(),
            teacher_probs.cols(),
            student_probs.rows(),
            student_probs.cols()
        )));
    }
    if student_probs.cols() != unlearn_probs.cols() {
        return Err(Error::ShapeMismatch(format!(
            "retain has {} classes but unlearn has {}",
            student_probs.cols(),
            unlearn_probs.cols()
        )));
    }
    check_labels(unlearn_labels, unlearn_probs.rows(), unlearn_probs.cols(), "unlearn")?;

    let n_r = student_probs.rows() as f64;
    let n_u = unlearn_probs.rows() as f64;
    let mut grad_retain = Matrix::zeros(student_probs.rows(), student_probs.cols());
    let mut grad_unlearn = Matrix::zeros(unlearn_probs.rows(), unlearn_probs.cols());

    let utility = distillation_divergence(teacher_probs, student_probs)?;
    if lambda != 1.0 {
        for i in 0..student_probs.rows() {
            for k in 0..student_probs.cols() {
                let t = teacher_probs.get(i, k);
                let s = student_probs.get(i, k);
                grad_retain.add_at(i, k, -(1.0 - lambda) * t * ind(s) / (n_r * s.max(LOG_FLOOR)));
            }
        }
    }

    let mut reg = 0.0;
    for (j, &y) in unlearn_labels.iter().enumerate() {
        let p = unlearn_probs.get(j, y);
        reg -= clamped_ln(p);
        grad_unlearn.add_at(j, y, lambda * ind(p) / (n_u * p.max(LOG_FLOOR)));
    }
    reg /= n_u;

    Ok(LossEval {
        total: (1.0 - lambda) * utility - lambda * reg,
        utility,
        reg,
        grad_retain,
        grad_unlearn,
    })
}

/// Group statistics shared by the feature information estimator and its
/// gradient: per-group softmax means, group weights, and the pooled mean.
struct GroupStats {
    counts: Vec<usize>,
    group_means: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    skipped: bool,
}

fn group_stats(probs: &Matrix, z: &[usize], n_groups: usize) -> Result<GroupStats> {
    check_batch(probs, "feature")?;
    if z.len() != probs.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} group labels for {} rows",
            z.len(),
            probs.rows()
        )));
    }
    if n_groups < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 groups, got {n_groups}"
        )));
    }
    if let Some(&g) = z.iter().find(|&&g| g >= n_groups) {
        return Err(Error::InvalidInput(format!(
            "group label {g} out of range for {n_groups} groups"
        )));
    }
    let cols = probs.cols();
    let mut counts = vec![0usize; n_groups];
    let mut sums = vec![vec![0.0; cols]; n_groups];
    for (i, &g) in z.iter().enumerate() {
        counts[g] += 1;
        for (s, &p) in sums[g].iter_mut().zip(probs.row(i)) {
            *s += p;
        }
    }
    let n = probs.rows() as f64;
    let mut pooled = vec![0.0; cols];
    let mut group_means = vec![vec![0.0; cols]; n_groups];
    for g in 0..n_groups {
        if counts[g] == 0 {
            continue;
        }
        for k in 0..cols {
            let mean = sums[g][k] / counts[g] as f64;
            group_means[g][k] = mean;
            // Weighting by empirical frequencies renormalizes over the
            // groups present automatically.
            pooled[k] += (counts[g] as f64 / n) * mean;
        }
    }
    let skipped = counts.iter().any(|&c| c == 0);
    Ok(GroupStats { counts, group_means, pooled, skipped })
}

/// Estimated information between the model output and the group label:
/// `sum_z p(z) KL(P_z || P)` over batch softmax group means, where `p(z)` is
/// the empirical group frequency and `P` the pooled mean. Groups absent from
/// the batch are skipped (the empirical weights renormalize over the groups
/// present); the flag reports whether that happened.
pub fn feature_mi_loss(probs: &Matrix, z: &[usize], n_groups: usize) -> Result<(InfoValue, bool)> {
    let stats = group_stats(probs, z, n_groups)?;
    let n = probs.rows() as f64;
    let mut mi = 0.0;
    for g in 0..n_groups {
        if stats.counts[g] == 0 {
            continue;
        }
        let w = stats.counts[g] as f64 / n;
        for k in 0..probs.cols() {
            let p = stats.group_means[g][k];
            if p > 0.0 {
                mi += w * p * (p.ln() - stats.pooled[k].ln());
            }
        }
    }
    Ok((InfoValue::from_nats(mi.max(0.0)), stats.skipped))
}

/// Feature objective `(1 - lambda) * CE + lambda * I(output; group)` on one
/// batch, with the information term computed from clamped logarithms so the
/// gradient is exact everywhere.
pub fn loss_feature(
    probs: &Matrix,
    labels: &[usize],
    z: &[usize],
    n_groups: usize,
    lambda: f64,
) -> Result<FeatureLossEval> {
    check_labels(labels, probs.rows(), probs.cols(), "feature")?;
    let stats = group_stats(probs, z, n_groups)?;

    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let utility = mean_label_ce(probs, labels, 1.0 - lambda, &mut grad);

    let n = probs.rows() as f64;
    let mut reg = 0.0;
    let mut d_group = vec![vec![0.0; probs.cols()]; n_groups];
    for g in 0..n_groups {
        if stats.counts[g] == 0 {
            continue;
        }
        let w = stats.counts[g] as f64 / n;
        for k in 0..probs.cols() {
            let p = stats.group_means[g][k];
            let m = stats.pooled[k];
            let lp = clamped_ln(p);
            let lm = clamped_ln(m);
            reg += w * p * (lp - lm);
            d_group[g][k] = w * (lp - lm + ind(p) - ind(m));
        }
    }
    if lambda != 0.0 {
        for (i, &g) in z.iter().enumerate() {
            let inv = 1.0 / stats.counts[g] as f64;
            for k in 0..probs.cols() {
                grad.add_at(i, k, lambda * d_group[g][k] * inv);
            }
        }
    }

    Ok(FeatureLossEval {
        total: (1.0 - lambda) * utility + lambda * reg,
        utility,
        reg,
        grad,
        group_skipped: stats.skipped,
    })
}

fn check_scalar_batch(samples: &[f64], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!("{what} batch is empty")));
    }
    Ok(())
}

/// Scalar-output marginal objective through grid KDEs:
/// `(1 - lambda) * CE(target || p_r) + lambda * MI(P0, P1)` with `P1` the
/// retain KDE and `P0 = alpha * P1 + (1 - alpha) * Pu` the mixture with the
/// unlearn KDE. Gradients are with respect to the raw model outputs.
pub fn scalar_marginal_loss(
    retain_out: &[f64],
    unlearn_out: &[f64],
    target: &GridDensity,
    bandwidth: f64,
    lambda: f64,
    alpha: f64,
    prior: f64,
) -> Result<ScalarLossEval> {
    check_scalar_batch(retain_out, "retain")?;
    check_scalar_batch(unlearn_out, "unlearn")?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::InvalidInput(format!("prior must lie in (0, 1), got {prior}")));
    }
    let grid = *target.grid();
    let dx = grid.dx();

    let ce_loss = KdeLoss::CrossEntropy { target: target.clone() };
    let utility = kde_loss_value(retain_out, &grid, bandwidth, &ce_loss)?;
    let util_grad = kde_loss_gradient(retain_out, &grid, bandwidth, &ce_loss)?;

    let p_r = kde_on_grid(retain_out, &grid, bandwidth)?;
    let p_u = kde_on_grid(unlearn_out, &grid, bandwidth)?;
    let mut reg = 0.0;
    let mut up_r = vec![0.0; grid.len()];
    let mut up_u = vec![0.0; grid.len()];
    for k in 0..grid.len() {
        let p1 = p_r.values()[k];
        let p0 = alpha * p1 + (1.0 - alpha) * p_u.values()[k];
        let m = prior * p1 + (1.0 - prior) * p0;
        let l1 = clamped_ln(p1);
        let l0 = clamped_ln(p0);
        let lm = clamped_ln(m);
        reg += dx * (prior * p1 * (l1 - lm) + (1.0 - prior) * p0 * (l0 - lm));
        let d1 = prior * (l1 - lm + ind(p1) - ind(m));
        let d0 = (1.0 - prior) * (l0 - lm + ind(p0) - ind(m));
        up_r[k] = lambda * dx * (d1 + alpha * d0);
        up_u[k] = lambda * dx * (1.0 - alpha) * d0;
    }
    let mi_grad_r = kde_value_adjoint(retain_out, &grid, bandwidth, &up_r)?;
    let mi_grad_u = kde_value_adjoint(unlearn_out, &grid, bandwidth, &up_u)?;

    let grad_retain: Vec<f64> = util_grad
        .iter()
        .zip(&mi_grad_r)
        .map(|(&u, &m)| (1.0 - lambda) * u + m)
        .collect();

    Ok(ScalarLossEval {
        total: (1.0 - lambda) * utility + lambda * reg,
        utility,
        reg,
        grad_retain,
        grad_unlearn: mi_grad_u,
    })
}

/// Scalar-output repulsion objective
/// `(1 - lambda) * CE(target_r || p_r) - lambda * min(CE(target_u || p_u), c_max)`.
/// The cap applies to the whole unlearn term; while it binds, that term
/// contributes no gradient.
pub fn scalar_grad_diff_loss(
    retain_out: &[f64],
    unlearn_out: &[f64],
    target_r: &GridDensity,
    target_u: &GridDensity,
    bandwidth: f64,
    lambda: f64,
    c_max: f64,
) -> Result<ScalarLossEval> {
    check_scalar_batch(retain_out, "retain")?;
    check_scalar_batch(unlearn_out, "unlearn")?;
    if !target_r.same_support(target_u) {
        return Err(Error::SupportMismatch(format!(
            "retain target is {} but unlearn target is {}",
            target_r.support_label(),
            target_u.support_label()
        )));
    }
    if !(c_max > 0.0) {
        return Err(Error::InvalidInput(format!("c_max must be positive, got {c_max}")));
    }
    let grid = *target_r.grid();

    let ce_r = KdeLoss::CrossEntropy { target: target_r.clone() };
    let utility = kde_loss_value(retain_out, &grid, bandwidth, &ce_r)?;
    let grad_retain: Vec<f64> = kde_loss_gradient(retain_out, &grid, bandwidth, &ce_r)?
        .into_iter()
        .map(|g| (1.0 - lambda) * g)
        .collect();

    let ce_u = KdeLoss::CrossEntropy { target: target_u.clone() };
    let raw = kde_loss_value(unlearn_out, &grid, bandwidth, &ce_u)?;
    let (reg, grad_unlearn) = if raw < c_max {
        let g = kde_loss_gradient(unlearn_out, &grid, bandwidth, &ce_u)?
            .into_iter()
            .map(|g| -lambda * g)
            .collect();
        (raw, g)
    } else {
        (c_max, vec![0.0; unlearn_out.len()])
    };

    Ok(ScalarLossEval {
        total: (1.0 - lambda) * utility - lambda * reg,
        utility,
        reg,
        grad_retain,
        grad_unlearn,
    })
}

/// Scalar-output anchored objective
/// `(1 - lambda) * KL(teacher || p_r) - lambda * CE(target_u || p_u)` with a
/// frozen teacher density on the retain side.
pub fn scalar_kl_anchor_loss(
    retain_out: &[f64],
    unlearn_out: &[f64],
    teacher: &GridDensity,
    target_u: &GridDensity,
    bandwidth: f64,
    lambda: f64,
) -> Result<ScalarLossEval> {
    check_scalar_batch(retain_out, "retain")?;
    check_scalar_batch(unlearn_out, "unlearn")?;
    if !teacher.same_support(target_u) {
        return Err(Error::SupportMismatch(format!(
            "teacher is {} but unlearn target is {}",
            teacher.support_label(),
            target_u.support_label()
        )));
    }
    let grid = *teacher.grid();

    let kl = KdeLoss::KlFrom { reference: teacher.clone() };
    let utility = kde_loss_value(retain_out, &grid, bandwidth, &kl)?;
    let grad_retain: Vec<f64> = kde_loss_gradient(retain_out, &grid, bandwidth, &kl)?
        .into_iter()
        .map(|g| (1.0 - lambda) * g)
        .collect();

    let ce_u = KdeLoss::CrossEntropy { target: target_u.clone() };
    let reg = kde_loss_value(unlearn_out, &grid, bandwidth, &ce_u)?;
    let grad_unlearn: Vec<f64> = kde_loss_gradient(unlearn_out, &grid, bandwidth, &ce_u)?
        .into_iter()
        .map(|g| -lambda * g)
        .collect();

    Ok(ScalarLossEval {
        total: (1.0 - lambda) * utility - lambda * reg,
        utility,
        reg,
        grad_retain,
        grad_unlearn,
    })
}

/// Value and per-sample gradient of the scalar feature objective, aligned
/// with the input sample order.
#[derive(Debug, Clone)]
pub struct ScalarFeatureLossEval {
    pub total: f64,
    pub utility: f64,
    pub reg: f64,
    pub grad: Vec<f64>,
    pub group_skipped: bool,
}

/// Scalar-output feature objective through per-group KDEs:
/// `(1 - lambda) * CE(target || pooled) + lambda * sum_z w_z KL(p_z || pooled)`
/// where `pooled = sum_z w_z p_z` with empirical group weights.
pub fn scalar_feature_loss(
    outputs: &[f64],
    z: &[usize],
    n_groups: usize,
    target: &GridDensity,
    bandwidth: f64,
    lambda: f64,
) -> Result<ScalarFeatureLossEval> {
    check_scalar_batch(outputs, "feature")?;
    if z.len() != outputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} group labels for {} outputs",
            z.len(),
            outputs.len()
        )));
    }
    if n_groups < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 groups, got {n_groups}")));
    }
    if let Some(&g) = z.iter().find(|&&g| g >= n_groups) {
        return Err(Error::InvalidInput(format!(
            "group label {g} out of range for {n_groups} groups"
        )));
    }
    let grid = *target.grid();
    let dx = grid.dx();
    let n = outputs.len() as f64;

    // Positions of each group's samples in the input order.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in z.iter().enumerate() {
        members[g].push(i);
    }
    let skipped = members.iter().any(|m| m.is_empty());

    let mut group_samples: Vec<Vec<f64>> = Vec::with_capacity(n_groups);
    let mut group_kde: Vec<Option<GridDensity>> = Vec::with_capacity(n_groups);
    let mut pooled = vec![0.0; grid.len()];
    for m in &members {
        let samples: Vec<f64> = m.iter().map(|&i| outputs[i]).collect();
        if samples.is_empty() {
            group_samples.push(samples);
            group_kde.push(None);
            continue;
        }
        let kde = kde_on_grid(&samples, &grid, bandwidth)?;
        let w = samples.len() as f64 / n;
        for (p, &v) in pooled.iter_mut().zip(kde.values()) {
            *p += w * v;
        }
        group_samples.push(samples);
        group_kde.push(Some(kde));
    }

    // Clamped cross-entropy of the target against the pooled density.
    let mut utility = 0.0;
    for (t, &m) in target.values().iter().zip(&pooled) {
        utility -= t * clamped_ln(m) * dx;
    }

    let mut reg = 0.0;
    let mut grad = vec![0.0; outputs.len()];
    for g in 0..n_groups {
        let Some(kde) = &group_kde[g] else { continue };
        let w = group_samples[g].len() as f64 / n;
        let mut upstream = vec![0.0; grid.len()];
        for k in 0..grid.len() {
            let p = kde.values()[k];
            let m = pooled[k];
            let lp = clamped_ln(p);
            let lm = clamped_ln(m);
            reg += w * dx * p * (lp - lm);
            let d_util = -(1.0 - lambda) * target.values()[k] * dx * ind(m) / m.max(LOG_FLOOR);
            let d_reg = lambda * dx * (lp - lm + ind(p) - ind(m));
            upstream[k] = w * (d_util + d_reg);
        }
        let g_grad = kde_value_adjoint(&group_samples[g], &grid, bandwidth, &upstream)?;
        for (pos, val) in members[g].iter().zip(g_grad) {
            grad[*pos] = val;
        }
    }

    Ok(ScalarFeatureLossEval {
        total: (1.0 - lambda) * utility + lambda * reg,
        utility,
        reg,
        grad,
        group_skipped: skipped,
    })
}

/// Fraction of rows whose highest-probability class matches the label; ties
/// resolve to the lowest class index.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_batch(probs, "accuracy")?;
    check_labels(labels, probs.rows(), probs.cols(), "accuracy")?;
    let hits = argmax_bins(probs)
        .iter()
        .zip(labels)
        .filter(|(b, l)| b == l)
        .count();
    Ok(hits as f64 / probs.rows() as f64)
}

/// Accuracy of the randomized policy that samples the predicted class from
/// each row: the mean probability assigned to the true label.
pub fn acc_rand(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_batch(probs, "acc_rand")?;
    check_labels(labels, probs.rows(), probs.cols(), "acc_rand")?;
    let sum: f64 = labels.iter().enumerate().map(|(i, &y)| probs.get(i, y)).sum();
    Ok(sum / probs.rows() as f64)
}

/// Demographic-parity gap: the absolute difference between the mean class-1
/// probability in group 1 and in group 0.
pub fn dp_gap(class1_probs: &[f64], z: &[usize]) -> Result<f64> {
    if class1_probs.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities for {} group labels",
            class1_probs.len(),
            z.len()
        )));
    }
    if let Some(&g) = z.iter().find(|&&g| g > 1) {
        return Err(Error::InvalidInput(format!("dp_gap expects binary groups, got label {g}")));
    }
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (&p, &g) in class1_probs.iter().zip(z) {
        sums[g] += p;
        counts[g] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::MissingGroup(format!(
            "dp_gap needs both groups, got {} in group 0 and {} in group 1",
            counts[0], counts[1]
        )));
    }
    Ok((sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64).abs())
}

/// Index of each row's highest-probability class; ties resolve to the lowest
/// class index.
pub fn argmax_bins(probs: &Matrix) -> Vec<usize> {
    probs
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Label-stratified index split: within each class, a seeded shuffle sends
/// `train_frac` of the rows (rounded, but at least one, and never all when
/// the class has two or more) to the training side. Both outputs come back
/// sorted so downstream reduction order is fixed.
pub fn stratified_split(
    labels: &[usize],
    train_frac: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction must lie in (0, 1), got {train_frac}"
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut idx) in by_label {
        idx.shuffle(rng);
        let n = idx.len();
        let n_train = if n == 1 {
            1
        } else {
            ((n as f64 * train_frac).round() as usize).clamp(1, n - 1)
        };
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Rows of `a` stacked over rows of `b`.
fn vstack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "cannot stack {} columns over {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut data = Vec::with_capacity((a.rows() + b.rows()) * a.cols());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data)
}

fn classifier_classes(params: &ModelParams) -> Result<usize> {
    match params.arch {
        Arch::Mlp { classes } if classes >= 2 => Ok(classes),
        _ => Err(Error::InvalidInput(
            "training loops need a softmax classifier with at least 2 classes".into(),
        )),
    }
}

/// Validation-split quantities evaluated after each epoch.
struct ValEval {
    retain_acc: f64,
    unlearn_acc: f64,
    mi_margin: InfoValue,
    kd: f64,
}

fn eval_marginal_val(
    params: &ModelParams,
    teacher_val: &Matrix,
    retain_feats: &Matrix,
    retain_labels: &[usize],
    unlearn_feats: &Matrix,
    unlearn_labels: &[usize],
    alpha: f64,
    prior: f64,
) -> Result<ValEval> {
    let (probs_r, _) = forward(params, retain_feats)?;
    let (probs_u, _) = forward(params, unlearn_feats)?;
    let p1 = CategoricalPMF::from_weights(&column_means(&probs_r))?;
    let pu = CategoricalPMF::from_weights(&column_means(&probs_u))?;
    let (p0, p1) = build_marginal_pair(&p1, &pu, alpha)?;
    Ok(ValEval {
        retain_acc: accuracy(&probs_r, retain_labels)?,
        unlearn_acc: accuracy(&probs_u, unlearn_labels)?,
        mi_margin: marginal_mi_loss(&p0, &p1, prior)?,
        kd: distillation_divergence(teacher_val, &probs_r)?,
    })
}

fn monitor_value(kind: StopKind, eval: &ValEval) -> f64 {
    match kind {
        StopKind::MiRatio { .. } => eval.mi_margin.nats(),
        StopKind::KdRatio { .. } => eval.kd,
        StopKind::ChanceAccuracy { .. } => eval.unlearn_acc,
    }
}

fn record_from_eval(
    epoch: usize,
    eval: ValEval,
    losses: (f64, f64, f64),
    kind: StopKind,
) -> Result<EpochRecord> {
    let record = EpochRecord {
        epoch,
        retain_acc: eval.retain_acc,
        unlearn_acc: eval.unlearn_acc,
        mi_margin: eval.mi_margin,
        loss_total: losses.0,
        loss_utility: losses.1,
        loss_reg: losses.2,
        monitor: monitor_value(kind, &eval),
    };
    if !record.is_finite() {
        return Err(Error::NonConvergence {
            what: format!("epoch {epoch} produced a non-finite evaluation"),
            residual: record.loss_total,
        });
    }
    Ok(record)
}

/// Marginal-pair loss dispatch for one retain/unlearn batch pair.
fn unlearn_batch_loss(
    config: &UnlearnConfig,
    probs_r: &Matrix,
    labels_r: &[usize],
    probs_u: &Matrix,
    labels_u: &[usize],
    teacher_r: Option<&Matrix>,
) -> Result<LossEval> {
    match config.method {
        Method::MarginalMi => loss_marginal(
            probs_r,
            probs_u,
            labels_r,
            config.lambda,
            config.alpha,
            config.prior,
        ),
        Method::GradDiff => loss_grad_diff(
            probs_r,
            probs_u,
            labels_r,
            labels_u,
            config.lambda,
            config.c_max,
        ),
        Method::KlAnchor => loss_kl_anchor(
            teacher_r.expect("teacher outputs prepared for the anchored method"),
            probs_r,
            probs_u,
            labels_u,
            config.lambda,
        ),
        Method::FeatureMi => Err(Error::InvalidInput(
            "the feature objective trains on a single dataset; use train_feature".into(),
        )),
    }
}

/// Two-dataset unlearning loop: seeded stratified 80/20 validation splits,
/// seeded per-epoch shuffling, each retain minibatch paired with an unlearn
/// minibatch drawn cyclically, one optimizer step per pair, and a stop-rule
/// check on the validation metrics after every epoch. The anchored method
/// freezes the initial parameters as the teacher.
pub fn train_unlearn(
    config: &UnlearnConfig,
    init: &ModelParams,
    retain: &TabularDataset,
    unlearn: &TabularDataset,
) -> Result<(ModelParams, TrainTrajectory)> {
    config.validate()?;
    init.validate()?;
    if config.method == Method::FeatureMi {
        return Err(Error::InvalidInput(
            "the feature objective trains on a single dataset; use train_feature".into(),
        ));
    }
    let classes = classifier_classes(init)?;
    for (ds, what) in [(retain, "retain"), (unlearn, "unlearn")] {
        if ds.is_empty() {
            return Err(Error::InvalidInput(format!("{what} dataset is empty")));
        }
        if ds.dim() != init.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{what} dataset has {} features but the model expects {}",
                ds.dim(),
                init.input_dim()
            )));
        }
        if ds.n_classes() > classes {
            return Err(Error::InvalidInput(format!(
                "{what} dataset uses {} classes but the model has {}",
                ds.n_classes(),
                classes
            )));
        }
    }

    // These two splits stay the first draws from the master generator, in
    // this order; `unlearn_validation_indices` reproduces them.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (r_train_idx, r_val_idx) = stratified_split(retain.labels(), 0.8, &mut rng)?;
    let (u_train_idx, u_val_idx) = stratified_split(unlearn.labels(), 0.8, &mut rng)?;
    if r_val_idx.is_empty() || u_val_idx.is_empty() {
        return Err(Error::InvalidInput(
            "validation split is empty; provide at least two samples per dataset".into(),
        ));
    }

    let r_train = retain.subset(&r_train_idx)?;
    let u_train = unlearn.subset(&u_train_idx)?;
    let r_val_feats = retain.features().select_rows(&r_val_idx)?;
    let u_val_feats = unlearn.features().select_rows(&u_val_idx)?;
    let r_val_labels: Vec<usize> = r_val_idx.iter().map(|&i| retain.labels()[i]).collect();
    let u_val_labels: Vec<usize> = u_val_idx.iter().map(|&i| unlearn.labels()[i]).collect();

    // The initial parameters double as the frozen teacher.
    let (teacher_train, _) = forward(init, r_train.features())?;
    let (teacher_val, _) = forward(init, &r_val_feats)?;

    let mut params = init.clone();
    let mut opt = OptimizerState::new(&params);

    // Baseline row: objective over the full training split, metrics on the
    // validation split, all before the first step.
    let baseline = {
        let (probs_r, _) = forward(&params, r_train.features())?;
        let (probs_u, _) = forward(&params, u_train.features())?;
        let eval = unlearn_batch_loss(
            config,
            &probs_r,
            r_train.labels(),
            &probs_u,
            u_train.labels(),
            Some(&teacher_train),
        )?;
        let val = eval_marginal_val(
            &params,
            &teacher_val,
            &r_val_feats,
            &r_val_labels,
            &u_val_feats,
            &u_val_labels,
            config.alpha,
            config.prior,
        )?;
        record_from_eval(0, val, (eval.total, eval.utility, eval.reg), config.stop_rule.kind)?
    };

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut stopped_epoch = None;
    let n_rtr = r_train.len();
    let n_utr = u_train.len();
    let mut r_order: Vec<usize> = (0..n_rtr).collect();
    let mut u_order: Vec<usize> = (0..n_utr).collect();
    let mut u_cursor = 0usize;

    for epoch in 1..=config.epochs {
        r_order.shuffle(&mut rng);
        u_order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in r_order.chunks(config.batch_size) {
            let u_take = config.batch_size.min(n_utr);
            let u_batch_idx: Vec<usize> =
                (0..u_take).map(|t| u_order[(u_cursor + t) % n_utr]).collect();
            u_cursor = (u_cursor + u_take) % n_utr;

            let r_feats = r_train.features().select_rows(chunk)?;
            let u_feats = u_train.features().select_rows(&u_batch_idx)?;
            let r_labels: Vec<usize> = chunk.iter().map(|&i| r_train.labels()[i]).collect();
            let u_labels: Vec<usize> =
                u_batch_idx.iter().map(|&i| u_train.labels()[i]).collect();
            let teacher_r = teacher_train.select_rows(chunk)?;

            let combined = vstack(&r_feats, &u_feats)?;
            let (probs, cache) = forward(&params, &combined)?;
            let r_rows: Vec<usize> = (0..chunk.len()).collect();
            let u_rows: Vec<usize> = (chunk.len()..chunk.len() + u_batch_idx.len()).collect();
            let probs_r = probs.select_rows(&r_rows)?;
            let probs_u = probs.select_rows(&u_rows)?;

            let eval = unlearn_batch_loss(
                config,
                &probs_r,
                &r_labels,
                &probs_u,
                &u_labels,
                Some(&teacher_r),
            )?;
            let grad_out = vstack(&eval.grad_retain, &eval.grad_unlearn)?;
            let grads = backward(&params, &cache, &grad_out)?;
            adam_step(&mut opt, &mut params, &grads)?;

            sums.0 += eval.total;
            sums.1 += eval.utility;
            sums.2 += eval.reg;
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        let losses = (sums.0 * inv, sums.1 * inv, sums.2 * inv);

        let val = eval_marginal_val(
            &params,
            &teacher_val,
            &r_val_feats,
            &r_val_labels,
            &u_val_feats,
            &u_val_labels,
            config.alpha,
            config.prior,
        )?;
        records.push(record_from_eval(epoch, val, losses, config.stop_rule.kind)?);

        if let Some(e) = early_stop_check(&config.stop_rule, classes, &baseline, &records) {
            if e == epoch {
                stopped_epoch = Some(e);
                break;
            }
        }
    }

    let trajectory = TrainTrajectory {
        baseline,
        records,
        stopped_epoch,
        classes,
        group_skipped: false,
    };
    Ok((params, trajectory))
}

/// Single-dataset feature-unlearning loop with the group-information
/// regularizer. Trajectory semantics: `retain_acc` and `unlearn_acc` both
/// come from the validation split of the one dataset, the latter as the
/// randomized-policy accuracy, and `mi_margin` is the estimated information
/// between outputs and groups.
pub fn train_feature(
    config: &UnlearnConfig,
    init: &ModelParams,
    dataset: &TabularDataset,
) -> Result<(ModelParams, TrainTrajectory)> {
    config.validate()?;
    init.validate()?;
    if config.method != Method::FeatureMi {
        return Err(Error::InvalidInput(format!(
            "train_feature runs the feature objective, got method {}",
            config.method
        )));
    }
    let classes = classifier_classes(init)?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    if dataset.dim() != init.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} features but the model expects {}",
            dataset.dim(),
            init.input_dim()
        )));
    }
    if dataset.n_classes() > classes {
        return Err(Error::InvalidInput(format!(
            "dataset uses {} classes but the model has {}",
            dataset.n_classes(),
            classes
        )));
    }
    let n_groups = dataset.n_groups().max(2);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, val_idx) = stratified_split(dataset.labels(), 0.8, &mut rng)?;
    if val_idx.is_empty() {
        return Err(Error::InvalidInput(
            "validation split is empty; provide at least two samples".into(),
        ));
    }
    let train = dataset.subset(&train_idx)?;
    let val_feats = dataset.features().select_rows(&val_idx)?;
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| dataset.labels()[i]).collect();
    let val_groups: Vec<usize> = val_idx.iter().map(|&i| dataset.groups()[i]).collect();

    let mut params = init.clone();
    let mut opt = OptimizerState::new(&params);
    let mut group_skipped = false;

    let eval_val = |params: &ModelParams, skipped: &mut bool| -> Result<ValEval> {
        let (probs, _) = forward(params, &val_feats)?;
        let (mi, s) = feature_mi_loss(&probs, &val_groups, n_groups)?;
        *skipped |= s;
        Ok(ValEval {
            retain_acc: accuracy(&probs, &val_labels)?,
            unlearn_acc: acc_rand(&probs, &val_labels)?,
            mi_margin: mi,
            kd: 0.0,
        })
    };

    let baseline = {
        let (probs, _) = forward(&params, train.features())?;
        let eval = loss_feature(&probs, train.labels(), train.groups(), n_groups, config.lambda)?;
        group_skipped |= eval.group_skipped;
        let val = eval_val(&params, &mut group_skipped)?;
        record_from_eval(0, val, (eval.total, eval.utility, eval.reg), config.stop_rule.kind)?
    };

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut stopped_epoch = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let feats = train.features().select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let groups: Vec<usize> = chunk.iter().map(|&i| train.groups()[i]).collect();

            let (probs, cache) = forward(&params, &feats)?;
            let eval = loss_feature(&probs, &labels, &groups, n_groups, config.lambda)?;
            group_skipped |= eval.group_skipped;
            let grads = backward(&params, &cache, &eval.grad)?;
            adam_step(&mut opt, &mut params, &grads)?;

            sums.0 += eval.total;
            sums.1 += eval.utility;
            sums.2 += eval.reg;
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        let losses = (sums.0 * inv, sums.1 * inv, sums.2 * inv);

        let val = eval_val(&params, &mut group_skipped)?;
        records.push(record_from_eval(epoch, val, losses, config.stop_rule.kind)?);

        if let Some(e) = early_stop_check(&config.stop_rule, classes, &baseline, &records) {
            if e == epoch {
                stopped_epoch = Some(e);
                break;
            }
        }
    }

    let trajectory = TrainTrajectory {
        baseline,
        records,
        stopped_epoch,
        classes,
        group_skipped,
    };
    Ok((params, trajectory))
}
