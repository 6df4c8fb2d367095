//! Entropies, divergences, and the mutual-information decomposition used for
//! unlearning diagnostics.
//!
//! Every routine works in nats internally; [`InfoValue`] converts to bits on
//! demand. The `0 * log 0 = 0` convention applies throughout, and a KL or
//! cross-entropy whose second argument vanishes where the first has mass
//! yields a tagged infinity rather than an error.

use crate::densities::{check_same_support, mixture, CategoricalPMF, DiscreteDensity, GridDensity};
use crate::error::{Error, Result};

/// An information quantity in nats. May be positive infinity (tagged, not an
/// error) when a support violation makes a divergence diverge, and may be
/// negative for grid cross-entropies (densities exceed one on narrow
/// supports, exactly as differential entropies do).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct InfoValue {
    nats: f64,
}

impl InfoValue {
    pub const ZERO: InfoValue = InfoValue { nats: 0.0 };
    pub const INFINITE: InfoValue = InfoValue { nats: f64::INFINITY };

    pub fn from_nats(nats: f64) -> Self {
        debug_assert!(!nats.is_nan(), "information value must not be NaN");
        InfoValue { nats }
    }

    pub fn nats(&self) -> f64 {
        self.nats
    }

    pub fn bits(&self) -> f64 {
        self.nats / std::f64::consts::LN_2
    }

    pub fn is_finite(&self) -> bool {
        self.nats.is_finite()
    }
}

/// Clamps the tiny negative rounding dust a mathematically non-negative sum
/// can accumulate; anything materially negative is a logic error upstream.
fn nonneg(nats: f64) -> f64 {
    debug_assert!(nats > -1e-9, "non-negative information value came out {nats}");
    if nats < 0.0 {
        0.0
    } else {
        nats
    }
}

/// Shannon entropy of a PMF in nats.
pub fn entropy(p: &CategoricalPMF) -> InfoValue {
    let mut h = 0.0;
    for &pi in p.probs() {
        if pi > 0.0 {
            h -= pi * pi.ln();
        }
    }
    InfoValue::from_nats(nonneg(h))
}

/// KL divergence `sum p * ln(p/q) * cell` on a shared support.
///
/// Returns [`InfoValue::INFINITE`] when `q` vanishes on a point where `p` has
/// mass; errors only on mismatched supports.
pub fn kl_divergence<D: DiscreteDensity>(p: &D, q: &D) -> Result<InfoValue> {
    check_same_support(p, q)?;
    let cell = p.cell();
    let mut kl = 0.0;
    for (&pk, &qk) in p.masses().iter().zip(q.masses()) {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Ok(InfoValue::INFINITE);
        }
        kl += pk * (pk / qk).ln();
    }
    Ok(InfoValue::from_nats(nonneg(kl * cell)))
}

/// Grid cross-entropy `-sum p * ln(q) * dx`.
///
/// On a grid this is an ordinary finite sum, so the identity
/// `cross_entropy_grid(p, q) - cross_entropy_grid(p, p) = kl_divergence(p, q)`
/// holds exactly (no discretization residue). The value can be negative.
pub fn cross_entropy_grid(p: &GridDensity, q: &GridDensity) -> Result<InfoValue> {
    check_same_support(p, q)?;
    let dx = p.cell();
    let mut h = 0.0;
    for (&pk, &qk) in p.masses().iter().zip(q.masses()) {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Ok(InfoValue::INFINITE);
        }
        h -= pk * qk.ln();
    }
    Ok(InfoValue::from_nats(h * dx))
}

/// Mutual information of a binary mixture: with `P = prior*p1 + (1-prior)*p0`,
/// returns `prior * KL(p1 || P) + (1 - prior) * KL(p0 || P)`.
///
/// This is `I(S; Z)` for the joint in which `Z = 1` has probability `prior`
/// and emits `p1`, and `Z = 0` emits `p0`. Always finite for `prior` strictly
/// inside (0, 1) because the mixture covers both supports; bounded above by
/// the binary entropy of the prior.
pub fn mutual_info_mixture<D: DiscreteDensity>(p0: &D, p1: &D, prior: f64) -> Result<InfoValue> {
    if !(0.0..=1.0).contains(&prior) || !prior.is_finite() {
        return Err(Error::InvalidInput(format!("prior must lie in [0, 1], got {prior}")));
    }
    check_same_support(p0, p1)?;
    let m = mixture(&[p1, p0], &[prior, 1.0 - prior])?;
    let mut total = 0.0;
    if prior > 0.0 {
        total += prior * kl_divergence(p1, &m)?.nats();
    }
    if prior < 1.0 {
        total += (1.0 - prior) * kl_divergence(p0, &m)?.nats();
    }
    Ok(InfoValue::from_nats(nonneg(total)))
}

/// Binary entropy `H2(p) = -p ln p - (1-p) ln(1-p)` in nats.
pub fn binary_entropy(p: f64) -> Result<InfoValue> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::InvalidInput(format!("binary entropy needs p in [0, 1], got {p}")));
    }
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).ln();
    }
    Ok(InfoValue::from_nats(nonneg(h)))
}

/// Inverse of binary entropy on `[0, 1/2]`: the unique `x <= 1/2` with
/// `H2(x) = y`, found by bisection. Accepts `y` in `[0, ln 2]`.
pub fn binary_entropy_inv(y: InfoValue) -> Result<f64> {
    let ln2 = std::f64::consts::LN_2;
    let y = y.nats();
    if !y.is_finite() || y < 0.0 || y > ln2 + 1e-12 {
        return Err(Error::InvalidInput(format!(
            "binary entropy inverse needs y in [0, ln 2], got {y}"
        )));
    }
    let y = y.min(ln2);
    if y == 0.0 {
        return Ok(0.0);
    }
    // H2 flattens quadratically at 1/2, so bisecting H2(x) against y cannot
    // resolve the argument near the top. Close to ln 2 we bisect instead on
    // t = 1/2 - x against the entropy deficit
    //   D(t) = ln 2 - H2(1/2 - t) = (u*(ln(1+u) - ln(1-u)) + ln(1-u^2)) / 2
    // with u = 2t, which ln_1p evaluates with small relative error even
    // though D ~ 2t^2, keeping the comparison sharp at float resolution.
    if y > 0.56 {
        let deficit = ln2 - y;
        if deficit <= 0.0 {
            return Ok(0.5);
        }
        let d = |t: f64| {
            let u = 2.0 * t;
            0.5 * (u * (u.ln_1p() - (-u).ln_1p()) + (-(u * u)).ln_1p())
        };
        let (mut lo, mut hi) = (0.0f64, 0.3f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if d(mid) < deficit {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return Ok(0.5 - 0.5 * (lo + hi));
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    // H2 is strictly increasing on [0, 1/2]; bisect until the bracket is at
    // float resolution so the argument, not just the value, is pinned down.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if binary_entropy(mid)?.nats() < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fano-style ceiling on identification accuracy:
/// `1 - H2_inv(max(0, H2(prior) - mi))`.
///
/// An adversary observing an output with mutual information `mi` (nats) about
/// a binary secret with the given prior cannot identify the secret with
/// probability above this bound.
pub fn fano_accuracy_bound(prior: f64, mi: InfoValue) -> Result<f64> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::InvalidInput(format!(
            "fano bound needs prior strictly inside (0, 1), got {prior}"
        )));
    }
    let h = binary_entropy(prior)?.nats();
    let remaining = if mi.is_finite() { (h - mi.nats()).max(0.0) } else { 0.0 };
    Ok(1.0 - binary_entropy_inv(InfoValue::from_nats(remaining))?)
}

/// Pinsker's inequality: `TV <= sqrt(kl / 2)`. Returns the right-hand side.
pub fn pinsker_bound(kl: InfoValue) -> f64 {
    debug_assert!(kl.nats() >= 0.0, "pinsker bound needs a non-negative divergence");
    (kl.nats() / 2.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{kde_on_grid, tv_distance, Grid};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn pmf(w: &[f64]) -> CategoricalPMF {
        CategoricalPMF::from_weights(w).unwrap()
    }

    #[test]
    fn entropy_uniform_is_ln_k() {
        for k in 2..8 {
            let p = CategoricalPMF::uniform(k).unwrap();
            assert_relative_eq!(entropy(&p).nats(), (k as f64).ln(), epsilon = 1e-14);
        }
    }

    #[test]
    fn entropy_deterministic_is_zero() {
        let p = CategoricalPMF::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(entropy(&p).nats(), 0.0);
    }

    #[test]
    fn bits_conversion() {
        let p = CategoricalPMF::uniform(2).unwrap();
        assert_relative_eq!(entropy(&p).bits(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn kl_identical_is_zero_support_violation_is_infinite() {
        let p = pmf(&[0.3, 0.7]);
        assert_eq!(kl_divergence(&p, &p).unwrap().nats(), 0.0);
        let q = CategoricalPMF::new(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!(!kl.is_finite());
        // The reverse direction is finite: q's support is inside p's.
        assert!(kl_divergence(&q, &p).unwrap().is_finite());
    }

    #[test]
    fn kl_support_mismatch_is_an_error() {
        let p = pmf(&[0.3, 0.7]);
        let q = CategoricalPMF::uniform(3).unwrap();
        assert!(matches!(kl_divergence(&p, &q), Err(Error::SupportMismatch(_))));
    }

    #[test]
    fn grid_cross_entropy_minus_self_entropy_is_kl() {
        let g = Grid::new(-2.0, 2.0, 41).unwrap();
        let p = kde_on_grid(&[0.1, -0.4, 0.9], &g, 0.5).unwrap();
        let q = kde_on_grid(&[-0.8, 0.3], &g, 0.7).unwrap();
        let ce = cross_entropy_grid(&p, &q).unwrap().nats();
        let self_ce = cross_entropy_grid(&p, &p).unwrap().nats();
        let kl = kl_divergence(&p, &q).unwrap().nats();
        assert_relative_eq!(ce - self_ce, kl, epsilon = 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn grid_cross_entropy_can_be_negative() {
        // A density concentrated on a narrow support exceeds one, so the
        // cross-entropy of a sharp density against itself is negative.
        let g = Grid::new(-0.1, 0.1, 21).unwrap();
        let p = kde_on_grid(&[0.0], &g, 0.02).unwrap();
        assert!(cross_entropy_grid(&p, &p).unwrap().nats() < 0.0);
    }

    #[test]
    fn mi_identical_conditionals_is_zero() {
        let p = pmf(&[0.2, 0.3, 0.5]);
        assert_eq!(mutual_info_mixture(&p, &p, 0.5).unwrap().nats(), 0.0);
    }

    #[test]
    fn mi_disjoint_balanced_is_ln_two() {
        let p0 = CategoricalPMF::new(vec![1.0, 0.0]).unwrap();
        let p1 = CategoricalPMF::new(vec![0.0, 1.0]).unwrap();
        let mi = mutual_info_mixture(&p0, &p1, 0.5).unwrap();
        assert_relative_eq!(mi.nats(), LN_2, epsilon = 1e-15);
    }

    #[test]
    fn mi_degenerate_prior_is_zero() {
        let p0 = pmf(&[0.9, 0.1]);
        let p1 = pmf(&[0.1, 0.9]);
        assert_eq!(mutual_info_mixture(&p0, &p1, 0.0).unwrap().nats(), 0.0);
        assert_eq!(mutual_info_mixture(&p0, &p1, 1.0).unwrap().nats(), 0.0);
    }

    #[test]
    fn binary_entropy_known_points() {
        assert_eq!(binary_entropy(0.0).unwrap().nats(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap().nats(), 0.0);
        assert_relative_eq!(binary_entropy(0.5).unwrap().nats(), LN_2, epsilon = 1e-15);
        assert!(binary_entropy(1.2).is_err());
    }

    #[test]
    fn binary_entropy_inv_endpoints() {
        assert_eq!(binary_entropy_inv(InfoValue::ZERO).unwrap(), 0.0);
        assert_relative_eq!(
            binary_entropy_inv(InfoValue::from_nats(LN_2)).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        assert!(binary_entropy_inv(InfoValue::from_nats(1.0)).is_err());
    }

    #[test]
    fn fano_zero_mi_balanced_prior_gives_half() {
        let b = fano_accuracy_bound(0.5, InfoValue::ZERO).unwrap();
        assert_relative_eq!(b, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn fano_saturated_mi_gives_one() {
        let b = fano_accuracy_bound(0.3, InfoValue::from_nats(1.0)).unwrap();
        assert_eq!(b, 1.0);
        let b = fano_accuracy_bound(0.5, InfoValue::INFINITE).unwrap();
        assert_eq!(b, 1.0);
    }

    #[test]
    fn pinsker_zero_kl_is_zero() {
        assert_eq!(pinsker_bound(InfoValue::ZERO), 0.0);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(
            p in proptest::collection::vec(0.01f64..1.0, 6),
            q in proptest::collection::vec(0.01f64..1.0, 6),
        ) {
            let p = pmf(&p);
            let q = pmf(&q);
            prop_assert!(kl_divergence(&p, &q).unwrap().nats() >= 0.0);
        }

        #[test]
        fn kl_zero_iff_equal(
            p in proptest::collection::vec(0.01f64..1.0, 5),
        ) {
            let p = pmf(&p);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap().nats(), 0.0);
        }

        #[test]
        fn pinsker_dominates_tv(
            p in proptest::collection::vec(0.01f64..1.0, 5),
            q in proptest::collection::vec(0.01f64..1.0, 5),
        ) {
            let p = pmf(&p);
            let q = pmf(&q);
            let tv = tv_distance(&p, &q).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(tv <= pinsker_bound(kl) + 1e-12);
        }

        #[test]
        fn mi_bounded_by_prior_entropy(
            p0 in proptest::collection::vec(0.001f64..1.0, 5),
            p1 in proptest::collection::vec(0.001f64..1.0, 5),
            prior in 0.01f64..0.99,
        ) {
            let p0 = pmf(&p0);
            let p1 = pmf(&p1);
            let mi = mutual_info_mixture(&p0, &p1, prior).unwrap();
            prop_assert!(mi.nats() <= binary_entropy(prior).unwrap().nats() + 1e-12);
            prop_assert!(mi.nats() >= 0.0);
        }

        #[test]
        fn mi_symmetric_under_relabeling_at_half(
            p0 in proptest::collection::vec(0.001f64..1.0, 4),
            p1 in proptest::collection::vec(0.001f64..1.0, 4),
        ) {
            let p0 = pmf(&p0);
            let p1 = pmf(&p1);
            let a = mutual_info_mixture(&p0, &p1, 0.5).unwrap().nats();
            let b = mutual_info_mixture(&p1, &p0, 0.5).unwrap().nats();
            prop_assert!((a - b).abs() < 1e-13);
        }

        #[test]
        fn mi_invariant_under_alphabet_permutation(
            p0 in proptest::collection::vec(0.001f64..1.0, 5),
            p1 in proptest::collection::vec(0.001f64..1.0, 5),
            prior in 0.05f64..0.95,
        ) {
            let rotate = |v: &[f64]| {
                let mut w = v.to_vec();
                w.rotate_left(2);
                w
            };
            let a = mutual_info_mixture(&pmf(&p0), &pmf(&p1), prior).unwrap().nats();
            let b = mutual_info_mixture(&pmf(&rotate(&p0)), &pmf(&rotate(&p1)), prior)
                .unwrap()
                .nats();
            prop_assert!((a - b).abs() < 1e-13);
        }

        #[test]
        fn kl_data_processing_under_merging(
            p in proptest::collection::vec(0.01f64..1.0, 6),
            q in proptest::collection::vec(0.01f64..1.0, 6),
            at in 0usize..5,
        ) {
            // Merging two adjacent atoms is a deterministic coarsening, so KL
            // cannot increase.
            let p = pmf(&p);
            let q = pmf(&q);
            let merge = |d: &CategoricalPMF| {
                let mut v = d.probs().to_vec();
                let merged = v[at] + v[at + 1];
                v[at] = merged;
                v.remove(at + 1);
                CategoricalPMF::new(v).unwrap()
            };
            let kl_fine = kl_divergence(&p, &q).unwrap().nats();
            let kl_coarse = kl_divergence(&merge(&p), &merge(&q)).unwrap().nats();
            prop_assert!(kl_coarse <= kl_fine + 1e-12);
        }

        #[test]
        fn binary_entropy_inv_round_trip(y in 0.0f64..LN_2) {
            let x = binary_entropy_inv(InfoValue::from_nats(y)).unwrap();
            prop_assert!((0.0..=0.5).contains(&x));
            prop_assert!((binary_entropy(x).unwrap().nats() - y).abs() <= 1e-10);
        }

        #[test]
        fn fano_bound_is_a_probability(
            prior in 0.01f64..0.99,
            mi in 0.0f64..1.5,
        ) {
            let b = fano_accuracy_bound(prior, InfoValue::from_nats(mi)).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            // More information never lowers the ceiling.
            let b2 = fano_accuracy_bound(prior, InfoValue::from_nats(mi + 0.1)).unwrap();
            prop_assert!(b2 >= b - 1e-12);
        }
    }
}
