//! Closed-form unlearning guarantees and the empirical log-odds audit.
//!
//! Every routine here is a deterministic pure function of its inputs: given a
//! measured mutual-information budget it produces a bound an auditor can
//! recompute. Bounds that live in `[0, 1]` are reported clamped with the raw
//! value retained where the raw value carries information.

use serde::{Deserialize, Serialize};

use crate::densities::CategoricalPMF;
use crate::error::{Error, Result};
use crate::infotheory::InfoValue;

/// A bound together with its `[0, 1]`-clamped form for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundValue {
    pub raw: f64,
    pub clamped: f64,
}

impl BoundValue {
    fn new(raw: f64) -> Self {
        BoundValue { raw, clamped: raw.clamp(0.0, 1.0) }
    }
}

/// Output drift bound: `TV(p1, p0) <= sqrt(mi / (2 * prior * (1 - prior)))`,
/// capped at 1 since it bounds a total variation.
pub fn tv_from_mi_bound(mi: InfoValue, prior: f64) -> Result<f64> {
    check_prior(prior)?;
    check_nonneg(mi, "mi")?;
    Ok((mi.nats() / (2.0 * prior * (1.0 - prior))).sqrt().min(1.0))
}

/// The largest information budget for which a compression-rate certificate at
/// tolerance `epsilon` is non-vacuous: `2 * ((e^eps - 1) / (e^eps + 1))^2`.
pub fn max_admissible_mu(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    // (e^eps - 1) / (e^eps + 1) = tanh(eps / 2), stable for tiny and huge eps.
    let r = (0.5 * epsilon).tanh();
    Ok(2.0 * r * r)
}

/// Compression-rate confidence `1 - ((e^eps + 1) / (e^eps - 1)) * sqrt(mu/2)`.
///
/// Admissible up to `mu = max_admissible_mu(epsilon)`, where the confidence
/// hits exactly zero; beyond that the certificate is vacuous and an error
/// carrying the admissible ceiling is returned.
pub fn compression_rate_confidence(mu: InfoValue, epsilon: f64) -> Result<f64> {
    check_nonneg(mu, "mu")?;
    let max_mu = max_admissible_mu(epsilon)?;
    if !(mu.nats() <= max_mu) {
        return Err(Error::VacuousCertificate { mu: mu.nats(), epsilon, max_mu });
    }
    let r = (0.5 * epsilon).tanh();
    Ok(1.0 - (mu.nats() / 2.0).sqrt() / r)
}

/// What an odds-inference certificate promises: with probability at least
/// `probability` over the output, the adversary's posterior log-odds stay
/// within `log_odds_cap` of even.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OddsInferenceBound {
    pub probability: f64,
    pub log_odds_cap: f64,
}

/// Odds-inference bound: probability `max(0, 1 - sqrt(mi/2) / eps)` that the
/// posterior log-odds are capped by `ln((1 + eps) / (1 - eps))`.
pub fn odds_inference_probability(mi: InfoValue, eps: f64) -> Result<OddsInferenceBound> {
    check_nonneg(mi, "mi")?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidInput(format!("odds tolerance must lie in (0, 1), got {eps}")));
    }
    let probability = (1.0 - (mi.nats() / 2.0).sqrt() / eps).max(0.0);
    let log_odds_cap = eps.ln_1p() - (-eps).ln_1p();
    Ok(OddsInferenceBound { probability, log_odds_cap })
}

/// Distance-to-anchor bound: how far (in TV) the unlearned model's marginal
/// output law can sit from a retrained-from-scratch anchor, given utility
/// alignment `delta` / `delta_g`, membership-independence budget `eps_u`, and
/// the anchor's own generalization gap `anchor_tv`.
pub fn anchor_distance_bound(
    delta: InfoValue,
    delta_g: InfoValue,
    eps_u: InfoValue,
    prior: f64,
    anchor_tv: f64,
) -> Result<BoundValue> {
    check_prior(prior)?;
    check_nonneg(delta, "delta")?;
    check_nonneg(delta_g, "delta_g")?;
    check_nonneg(eps_u, "eps_u")?;
    if !(0.0..=1.0).contains(&anchor_tv) {
        return Err(Error::InvalidInput(format!("anchor_tv must lie in [0, 1], got {anchor_tv}")));
    }
    let raw = 0.5f64.sqrt() * (delta.nats().sqrt() + delta_g.nats().sqrt())
        + (eps_u.nats() / (2.0 * prior * (1.0 - prior))).sqrt()
        + anchor_tv;
    Ok(BoundValue::new(raw))
}

/// Per-group drift ceilings implied by a mutual-information budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupBound {
    pub kl_bound: f64,
    pub tv_bound: f64,
}

/// For each group `z`: `KL(P_z || P) <= mi / p(z)` and
/// `TV(P_z, P) <= sqrt(mi / (2 p(z)))`.
pub fn groupwise_bounds(mi: InfoValue, group_probs: &[f64]) -> Result<Vec<GroupBound>> {
    check_nonneg(mi, "mi")?;
    if group_probs.is_empty() {
        return Err(Error::InvalidInput("group_probs must be nonempty".into()));
    }
    let sum: f64 = group_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("group_probs must sum to 1, got {sum}")));
    }
    group_probs
        .iter()
        .map(|&p| {
            if !(p > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "group probabilities must be strictly positive, got {p}"
                )));
            }
            Ok(GroupBound {
                kl_bound: mi.nats() / p,
                tv_bound: (mi.nats() / (2.0 * p)).sqrt(),
            })
        })
        .collect()
}

/// Tail probabilities over a random group draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailBounds {
    /// Bound on `P(KL(P_Z || P) >= tau^2)`.
    pub kl_tail: f64,
    /// Bound on `P(TV(P_Z, P) >= tau)`.
    pub tv_tail: f64,
}

/// Markov tails: `kl_tail = min(1, mi / tau^2)`, `tv_tail = min(1, mi / (2 tau^2))`.
pub fn tail_bounds(mi: InfoValue, tau: f64) -> Result<TailBounds> {
    check_nonneg(mi, "mi")?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    Ok(TailBounds {
        kl_tail: (mi.nats() / (tau * tau)).min(1.0),
        tv_tail: (mi.nats() / (2.0 * tau * tau)).min(1.0),
    })
}

/// The exact supremum over all events `D` of `|ln(P0(D) / P1(D))|`.
///
/// A ratio of sums is bounded by its extreme pointwise ratio (mediant
/// inequality), so the supremum over events is attained at a single atom and
/// the max over atoms is exact, not an approximation. Atoms outside both
/// supports are skipped; an atom in exactly one support forces the supremum
/// to infinity (the event "that atom" has odds 0 or infinity), returned as a
/// tagged `f64::INFINITY` rather than an error.
pub fn empirical_sup_log_odds(p0: &CategoricalPMF, p1: &CategoricalPMF) -> Result<f64> {
    crate::densities::check_same_support(p0, p1)?;
    let mut sup = 0.0f64;
    for (&a, &b) in p0.probs().iter().zip(p1.probs()) {
        match (a > 0.0, b > 0.0) {
            (true, true) => sup = sup.max((a / b).ln().abs()),
            (false, false) => continue,
            _ => return Ok(f64::INFINITY),
        }
    }
    Ok(sup)
}

/// The Lipschitz-constant threshold below which a retrained model is forced
/// to stay near the unlearned one: `delta * (e^eps - 1) * min_density / w1`.
pub fn lipschitz_threshold(delta: f64, eps: f64, min_density: f64, w1: f64) -> Result<f64> {
    for (name, v) in [("delta", delta), ("eps", eps), ("min_density", min_density)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidInput(format!("{name} must be strictly positive, got {v}")));
        }
    }
    if !(w1 > 0.0) || !w1.is_finite() {
        return Err(Error::InvalidInput(format!(
            "w1 must be strictly positive (identical distributions have no threshold), got {w1}"
        )));
    }
    Ok(delta * eps.exp_m1() * min_density / w1)
}

/// Which bound a certificate was issued under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundName {
    CompressionRate,
    OddsInference,
    EmpiricalSup,
}

/// An auditable unlearning certificate: the measured information budget, the
/// odds tolerance it was judged against, and the resulting confidence.
///
/// `clamped` records whether the confidence was cut off at a boundary of
/// `[0, 1]`; a clamped certificate is reported, never silently repaired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningCertificate {
    pub mu_nats: f64,
    pub epsilon: f64,
    pub confidence: f64,
    pub bound_name: BoundName,
    pub prior: f64,
    pub clamped: bool,
}

impl UnlearningCertificate {
    /// Compression-rate certificate. Requires `mu` strictly inside the
    /// admissible region, so the confidence is strictly positive.
    pub fn compression_rate(mu: InfoValue, epsilon: f64, prior: f64) -> Result<Self> {
        check_prior(prior)?;
        let max_mu = max_admissible_mu(epsilon)?;
        if !(mu.nats() < max_mu) {
            return Err(Error::VacuousCertificate { mu: mu.nats(), epsilon, max_mu });
        }
        let confidence = compression_rate_confidence(mu, epsilon)?;
        Ok(UnlearningCertificate {
            mu_nats: mu.nats(),
            epsilon,
            confidence,
            bound_name: BoundName::CompressionRate,
            prior,
            clamped: false,
        })
    }

    /// Odds-inference certificate; the confidence is the probability with
    /// which the log-odds cap holds (zero once the budget overwhelms `eps`).
    pub fn odds_inference(mu: InfoValue, epsilon: f64, prior: f64) -> Result<Self> {
        check_prior(prior)?;
        let bound = odds_inference_probability(mu, epsilon)?;
        let raw = 1.0 - (mu.nats() / 2.0).sqrt() / epsilon;
        Ok(UnlearningCertificate {
            mu_nats: mu.nats(),
            epsilon,
            confidence: bound.probability,
            bound_name: BoundName::OddsInference,
            prior,
            clamped: raw < 0.0,
        })
    }

    /// Empirical certificate: confidence 1 when the measured supremum of
    /// absolute log-odds stays within `epsilon`, 0 otherwise.
    pub fn empirical_sup(
        mu: InfoValue,
        epsilon: f64,
        sup_log_odds: f64,
        prior: f64,
    ) -> Result<Self> {
        check_prior(prior)?;
        check_nonneg(mu, "mu")?;
        if !(epsilon > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(UnlearningCertificate {
            mu_nats: mu.nats(),
            epsilon,
            confidence: if sup_log_odds <= epsilon { 1.0 } else { 0.0 },
            bound_name: BoundName::EmpiricalSup,
            prior,
            clamped: false,
        })
    }
}

fn check_prior(prior: f64) -> Result<()> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::InvalidInput(format!(
            "prior must lie strictly inside (0, 1), got {prior}"
        )));
    }
    Ok(())
}

fn check_nonneg(v: InfoValue, name: &str) -> Result<()> {
    if !(v.nats() >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "{name} must be a non-negative information value, got {} nats",
            v.nats()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{mixture, tv_distance};
    use crate::infotheory::{kl_divergence, mutual_info_mixture};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pmf(w: &[f64]) -> CategoricalPMF {
        CategoricalPMF::from_weights(w).unwrap()
    }

    #[test]
    fn tv_from_mi_examples() {
        assert_eq!(tv_from_mi_bound(InfoValue::ZERO, 0.5).unwrap(), 0.0);
        let b = tv_from_mi_bound(InfoValue::from_nats(0.02), 0.5).unwrap();
        assert_relative_eq!(b, 0.2, epsilon = 1e-15);
        // Large budgets cap at 1.
        assert_eq!(tv_from_mi_bound(InfoValue::from_nats(10.0), 0.5).unwrap(), 1.0);
    }

    #[test]
    fn compression_confidence_examples() {
        assert_eq!(compression_rate_confidence(InfoValue::ZERO, 0.7).unwrap(), 1.0);
        let max_mu = max_admissible_mu(0.3).unwrap();
        // Exactly at the boundary the confidence is exactly zero.
        assert_eq!(compression_rate_confidence(InfoValue::from_nats(max_mu), 0.3).unwrap(), 0.0);
        // Slightly beyond it the certificate is vacuous.
        let err = compression_rate_confidence(InfoValue::from_nats(max_mu * 1.01), 0.3);
        assert!(matches!(err, Err(Error::VacuousCertificate { .. })));
        let c = compression_rate_confidence(InfoValue::from_nats(2e-4), 0.1).unwrap();
        assert!((c - 0.800).abs() < 5e-4, "confidence {c} not near 0.800");
    }

    #[test]
    fn odds_inference_examples() {
        let b = odds_inference_probability(InfoValue::ZERO, 0.5).unwrap();
        assert_eq!(b.probability, 1.0);
        assert_relative_eq!(b.log_odds_cap, 3.0f64.ln(), epsilon = 1e-15);
        let b = odds_inference_probability(InfoValue::from_nats(0.5), 0.1).unwrap();
        assert_eq!(b.probability, 0.0);
        let b = odds_inference_probability(InfoValue::from_nats(0.005), 0.2).unwrap();
        assert_relative_eq!(b.probability, 0.75, epsilon = 1e-12);
        assert!(odds_inference_probability(InfoValue::ZERO, 1.0).is_err());
    }

    #[test]
    fn anchor_distance_examples() {
        let zero = anchor_distance_bound(InfoValue::ZERO, InfoValue::ZERO, InfoValue::ZERO, 0.5, 0.0)
            .unwrap();
        assert_eq!(zero.raw, 0.0);
        let b = anchor_distance_bound(
            InfoValue::ZERO,
            InfoValue::ZERO,
            InfoValue::from_nats(0.02),
            0.5,
            0.05,
        )
        .unwrap();
        assert_relative_eq!(b.clamped, 0.25, epsilon = 1e-12);
        let b = anchor_distance_bound(
            InfoValue::from_nats(0.01),
            InfoValue::from_nats(0.01),
            InfoValue::from_nats(0.005),
            0.5,
            0.02,
        )
        .unwrap();
        assert_relative_eq!(b.raw, 0.2614213562373095, epsilon = 1e-12);
        assert_eq!(b.raw, b.clamped);
        // A raw bound past 1 is clamped for reporting but kept raw.
        let big = anchor_distance_bound(
            InfoValue::from_nats(2.0),
            InfoValue::from_nats(2.0),
            InfoValue::ZERO,
            0.5,
            0.5,
        )
        .unwrap();
        assert!(big.raw > 1.0);
        assert_eq!(big.clamped, 1.0);
    }

    #[test]
    fn groupwise_examples() {
        let all = groupwise_bounds(InfoValue::ZERO, &[0.25, 0.75]).unwrap();
        assert!(all.iter().all(|g| g.kl_bound == 0.0 && g.tv_bound == 0.0));
        let b = groupwise_bounds(InfoValue::from_nats(0.08), &[0.5, 0.5]).unwrap();
        assert_relative_eq!(b[0].kl_bound, 0.16, epsilon = 1e-15);
        assert_relative_eq!(b[0].tv_bound, 0.08f64.sqrt(), epsilon = 1e-15);
        assert!(groupwise_bounds(InfoValue::ZERO, &[1.0, 0.0]).is_err());
        assert!(groupwise_bounds(InfoValue::ZERO, &[0.5, 0.4]).is_err());
    }

    #[test]
    fn tail_bounds_examples() {
        let t = tail_bounds(InfoValue::ZERO, 0.3).unwrap();
        assert_eq!((t.kl_tail, t.tv_tail), (0.0, 0.0));
        let t = tail_bounds(InfoValue::from_nats(0.02), 0.1).unwrap();
        assert_relative_eq!(t.tv_tail, 1.0, epsilon = 1e-12);
        assert_eq!(t.kl_tail, 1.0);
        let t = tail_bounds(InfoValue::from_nats(0.01), 0.5).unwrap();
        assert_relative_eq!(t.tv_tail, 0.02, epsilon = 1e-15);
    }

    #[test]
    fn sup_log_odds_examples() {
        let p = pmf(&[0.5, 0.5]);
        assert_eq!(empirical_sup_log_odds(&p, &p).unwrap(), 0.0);
        let q = pmf(&[0.25, 0.75]);
        assert_relative_eq!(empirical_sup_log_odds(&p, &q).unwrap(), 2.0f64.ln(), epsilon = 1e-15);
        let a = pmf(&[0.6, 0.4]);
        let b = pmf(&[0.4, 0.6]);
        assert_relative_eq!(empirical_sup_log_odds(&a, &b).unwrap(), 1.5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn sup_log_odds_zero_atoms() {
        let p = CategoricalPMF::new(vec![0.5, 0.5, 0.0]).unwrap();
        let q = CategoricalPMF::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert_eq!(empirical_sup_log_odds(&p, &q).unwrap(), f64::INFINITY);
        // An atom dead in both distributions is outside the union support.
        let p = CategoricalPMF::new(vec![0.5, 0.5, 0.0]).unwrap();
        let q = CategoricalPMF::new(vec![0.25, 0.75, 0.0]).unwrap();
        assert!(empirical_sup_log_odds(&p, &q).unwrap().is_finite());
    }

    /// Brute-force supremum over all 2^K - 2 nonempty proper events.
    fn brute_force_sup(p0: &CategoricalPMF, p1: &CategoricalPMF) -> f64 {
        let k = p0.probs().len();
        let mut sup = 0.0f64;
        for mask in 1..((1usize << k) - 1) {
            let (mut a, mut b) = (0.0, 0.0);
            for i in 0..k {
                if mask & (1 << i) != 0 {
                    a += p0.probs()[i];
                    b += p1.probs()[i];
                }
            }
            sup = sup.max((a / b).ln().abs());
        }
        sup
    }

    #[test]
    fn lipschitz_examples() {
        let t = lipschitz_threshold(1.0, std::f64::consts::LN_2, 0.5, 1.0).unwrap();
        assert_relative_eq!(t, 0.5, epsilon = 1e-12);
        assert_relative_eq!(
            lipschitz_threshold(0.1, 0.1, 0.3, 0.05).unwrap(),
            0.06310255084538863,
            epsilon = 1e-12
        );
        // The threshold vanishes with the odds tolerance.
        assert!(lipschitz_threshold(1.0, 1e-12, 0.5, 1.0).unwrap() < 1e-11);
        assert!(lipschitz_threshold(1.0, 1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn certificate_construction_and_json() {
        let cert =
            UnlearningCertificate::compression_rate(InfoValue::from_nats(1e-3), 0.25, 0.5).unwrap();
        assert!(cert.confidence > 0.0 && cert.confidence < 1.0);
        assert!(!cert.clamped);
        let json = serde_json::to_string(&cert).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["mu_nats", "epsilon", "confidence", "bound_name", "prior", "clamped"] {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
        assert_eq!(v["bound_name"], "compression_rate");
        let back: UnlearningCertificate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn certificate_boundary_is_vacuous() {
        let max_mu = max_admissible_mu(0.2).unwrap();
        let err = UnlearningCertificate::compression_rate(InfoValue::from_nats(max_mu), 0.2, 0.5);
        match err {
            Err(Error::VacuousCertificate { max_mu: m, .. }) => {
                assert_relative_eq!(m, max_mu, epsilon = 1e-15)
            }
            other => panic!("expected vacuous certificate, got {other:?}"),
        }
    }

    #[test]
    fn certificate_variants_serialize_names() {
        let odds =
            UnlearningCertificate::odds_inference(InfoValue::from_nats(0.001), 0.3, 0.5).unwrap();
        assert_eq!(
            serde_json::to_value(&odds).unwrap()["bound_name"],
            "odds_inference"
        );
        let emp =
            UnlearningCertificate::empirical_sup(InfoValue::from_nats(0.01), 0.5, 0.2, 0.5).unwrap();
        assert_eq!(serde_json::to_value(&emp).unwrap()["bound_name"], "empirical_sup");
        assert_eq!(emp.confidence, 1.0);
        let failed =
            UnlearningCertificate::empirical_sup(InfoValue::from_nats(0.01), 0.1, 0.2, 0.5).unwrap();
        assert_eq!(failed.confidence, 0.0);
    }

    proptest! {
        #[test]
        fn tv_bound_dominates_tv(
            p0 in proptest::collection::vec(0.01f64..1.0, 5),
            p1 in proptest::collection::vec(0.01f64..1.0, 5),
            prior in 0.05f64..0.95,
        ) {
            let p0 = pmf(&p0);
            let p1 = pmf(&p1);
            let mi = mutual_info_mixture(&p0, &p1, prior).unwrap();
            let tv = tv_distance(&p0, &p1).unwrap();
            prop_assert!(tv <= tv_from_mi_bound(mi, prior).unwrap() + 1e-12);
        }

        #[test]
        fn groupwise_bounds_dominate_measured_drift(
            rows in proptest::collection::vec(
                proptest::collection::vec(0.01f64..1.0, 6), 4),
            weights in proptest::collection::vec(0.05f64..1.0, 4),
        ) {
            // Random joint over 4 groups x 6 outcomes.
            let total: f64 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let conditionals: Vec<CategoricalPMF> = rows.iter().map(|r| pmf(r)).collect();
            let refs: Vec<&CategoricalPMF> = conditionals.iter().collect();
            let marginal = mixture(&refs, &probs).unwrap();
            let mi: f64 = conditionals.iter().zip(&probs)
                .map(|(c, &p)| p * kl_divergence(c, &marginal).unwrap().nats())
                .sum();
            let bounds = groupwise_bounds(InfoValue::from_nats(mi), &probs).unwrap();
            for ((c, b), &_p) in conditionals.iter().zip(&bounds).zip(&probs) {
                let kl = kl_divergence(c, &marginal).unwrap().nats();
                let tv = tv_distance(c, &marginal).unwrap();
                prop_assert!(kl <= b.kl_bound + 1e-12);
                prop_assert!(tv <= b.tv_bound + 1e-12);
            }
        }

        #[test]
        fn tail_bounds_dominate_tail_mass(
            rows in proptest::collection::vec(
                proptest::collection::vec(0.01f64..1.0, 5), 4),
            weights in proptest::collection::vec(0.05f64..1.0, 4),
            tau in 0.05f64..0.8,
        ) {
            let total: f64 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let conditionals: Vec<CategoricalPMF> = rows.iter().map(|r| pmf(r)).collect();
            let refs: Vec<&CategoricalPMF> = conditionals.iter().collect();
            let marginal = mixture(&refs, &probs).unwrap();
            let mi: f64 = conditionals.iter().zip(&probs)
                .map(|(c, &p)| p * kl_divergence(c, &marginal).unwrap().nats())
                .sum();
            let t = tail_bounds(InfoValue::from_nats(mi), tau).unwrap();
            let mut kl_mass = 0.0;
            let mut tv_mass = 0.0;
            for (c, &p) in conditionals.iter().zip(&probs) {
                if kl_divergence(c, &marginal).unwrap().nats() >= tau * tau {
                    kl_mass += p;
                }
                if tv_distance(c, &marginal).unwrap() >= tau {
                    tv_mass += p;
                }
            }
            prop_assert!(kl_mass <= t.kl_tail + 1e-12);
            prop_assert!(tv_mass <= t.tv_tail + 1e-12);
        }

        #[test]
        fn odds_cap_exception_mass_is_bounded(
            p0 in proptest::collection::vec(0.01f64..1.0, 6),
            p1 in proptest::collection::vec(0.01f64..1.0, 6),
            eps in 0.1f64..0.9,
        ) {
            // Atoms whose pointwise log-odds exceed the cap carry limited
            // mass under the balanced mixture. The provable ceiling is
            // sqrt(2 * mi) / eps: the posterior gap |P(0|y) - P(1|y)| equals
            // 2 * TV(P(Z|y), P(Z)), so Pinsker plus Markov give the factor
            // two over the reported exception probability sqrt(mi/2) / eps,
            // and random joints do exceed the reported one.
            let p0 = pmf(&p0);
            let p1 = pmf(&p1);
            let mi = mutual_info_mixture(&p0, &p1, 0.5).unwrap();
            let bound = odds_inference_probability(mi, eps).unwrap();
            let mut exception = 0.0;
            for (&a, &b) in p0.probs().iter().zip(p1.probs()) {
                if (a / b).ln().abs() > bound.log_odds_cap {
                    exception += 0.5 * a + 0.5 * b;
                }
            }
            prop_assert!(exception <= 2.0 * (mi.nats() / 2.0).sqrt() / eps + 1e-12);
        }

        #[test]
        fn event_log_odds_never_exceed_atom_sup(
            p0 in proptest::collection::vec(0.01f64..1.0, 6),
            p1 in proptest::collection::vec(0.01f64..1.0, 6),
        ) {
            // The mediant inequality: every event's log-odds are bounded by
            // the extreme atom's.
            let p0 = pmf(&p0);
            let p1 = pmf(&p1);
            let sup = empirical_sup_log_odds(&p0, &p1).unwrap();
            let k = p0.probs().len();
            for mask in 1..((1usize << k) - 1) {
                let (mut a, mut b) = (0.0, 0.0);
                for i in 0..k {
                    if mask & (1 << i) != 0 {
                        a += p0.probs()[i];
                        b += p1.probs()[i];
                    }
                }
                prop_assert!((a / b).ln().abs() <= sup + 1e-12);
            }
        }

        #[test]
        fn sup_log_odds_matches_brute_force(
            p0 in proptest::collection::vec(0.01f64..1.0, 5),
            p1 in proptest::collection::vec(0.01f64..1.0, 5),
        ) {
            let p0 = pmf(&p0);
            let p1 = pmf(&p1);
            let fast = empirical_sup_log_odds(&p0, &p1).unwrap();
            // The supremum is attained at a single atom, so the brute force
            // computes the identical float expression: equality is exact.
            prop_assert_eq!(fast, brute_force_sup(&p0, &p1));
        }

        #[test]
        fn compression_confidence_monotone(
            eps in 0.05f64..2.0,
            frac in 0.01f64..0.9,
        ) {
            let max_mu = max_admissible_mu(eps).unwrap();
            let c1 = compression_rate_confidence(InfoValue::from_nats(frac * max_mu), eps).unwrap();
            let c2 = compression_rate_confidence(
                InfoValue::from_nats((frac + 0.05) * max_mu), eps).unwrap();
            prop_assert!(c2 <= c1);
            let c3 = compression_rate_confidence(InfoValue::from_nats(frac * max_mu), eps + 0.1);
            prop_assert!(c3.unwrap() >= c1 - 1e-12);
        }
    }
}
