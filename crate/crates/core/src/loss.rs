//! Weighted binary cross entropy for labeled data and its confidence-masked
//! form for pseudo-labeled data.
//!
//! Losses are sums over pixels, not means. Sums are reduced sequentially in
//! pixel order so results are bit-reproducible.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matching::NeighborhoodMask;
use crate::types::{clamp_probability, ConfidenceMask, ConfidenceVector, MatchMatrix, ScoreMap};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_ETA: f64 = 0.7;
pub const DEFAULT_ALPHA: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub foreground_term: f64,
    pub background_term: f64,
    /// Pixels with non-zero confidence weight.
    pub active_pixel_count: usize,
}

impl LossBreakdown {
    pub const ZERO: LossBreakdown = LossBreakdown {
        total: 0.0,
        foreground_term: 0.0,
        background_term: 0.0,
        active_pixel_count: 0,
    };
}

/// One JSON-lines metrics record.
#[derive(Debug, Clone, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub fg: f64,
    pub bg: f64,
    pub active: usize,
}

impl LossRecord {
    pub fn new(step: u64, loss: &LossBreakdown) -> Self {
        Self {
            step,
            total: loss.total,
            fg: loss.foreground_term,
            bg: loss.background_term,
            active: loss.active_pixel_count,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(())
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(what, expected, actual));
    }
    Ok(())
}

/// Shared reduction for both the labeled and the masked loss. `z = None`
/// means every pixel has weight 1.
fn bce_terms(p: &ScoreMap, target: &[f64], z: Option<&[f64]>, lambda: f64) -> LossBreakdown {
    let mut fg = 0.0;
    let mut bg = 0.0;
    let mut active = 0usize;
    for (i, (&pi, &ti)) in p.values().iter().zip(target).enumerate() {
        let zi = z.map_or(1.0, |z| z[i]);
        if zi != 0.0 {
            active += 1;
        }
        fg += ti * zi * pi.ln();
        bg += (1.0 - ti) * zi * (1.0 - pi).ln();
    }
    let foreground_term = -lambda * fg;
    let background_term = -bg;
    LossBreakdown {
        total: foreground_term + background_term,
        foreground_term,
        background_term,
        active_pixel_count: active,
    }
}

/// `-lambda p_hatᵀ log p - (1 - p_hat)ᵀ log(1 - p)`.
pub fn weighted_bce(p: &ScoreMap, target: &[f64], lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    check_len("objective", p.len(), target.len())?;
    Ok(bce_terms(p, target, None, lambda))
}

/// `zeta[j] = 1` iff `pseudo_scores[j] > eta`.
pub fn confidence_vector(pseudo_scores: &[f64], eta: f64) -> Result<ConfidenceVector> {
    if !(eta > 0.5 && eta < 1.0) {
        return Err(Error::InvalidParameter(format!("eta must lie in (0.5, 1), got {eta}")));
    }
    Ok(ConfidenceVector(pseudo_scores.iter().map(|&s| s > eta).collect()))
}

/// `z = M_st zeta`.
pub fn p2p_confidence(matching: &MatchMatrix, zeta: &ConfidenceVector) -> Result<ConfidenceMask> {
    ConfidenceMask::new(matching.mul_vec(&zeta.as_f64())?)
}

/// `z = M_st zeta + (1 - beta)`.
pub fn p2r_confidence(
    region: &MatchMatrix,
    zeta: &ConfidenceVector,
    neighborhood: &NeighborhoodMask,
) -> Result<ConfidenceMask> {
    check_len("neighborhood mask", region.n(), neighborhood.beta.len())?;
    let mut z = region.mul_vec(&zeta.as_f64())?;
    for (zi, b) in z.iter_mut().zip(&neighborhood.beta) {
        *zi += 1.0 - b;
    }
    ConfidenceMask::new(z)
}

/// `-lambda p_hatᵀ Z log p_s - (1 - p_hat)ᵀ Z log(1 - p_s)`.
pub fn masked_bce(p_s: &ScoreMap, target: &[f64], z: &ConfidenceMask, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    check_len("objective", p_s.len(), target.len())?;
    check_len("confidence mask", p_s.len(), z.len())?;
    Ok(bce_terms(p_s, target, Some(z.weights()), lambda))
}

/// Evaluates the background term of the masked loss with `z = M_st zeta`
/// and `p_hat = M_st 1`. Returns whether it is exactly zero, and its value.
///
/// The all-zero-or-one-hot row structure is enforced by [`MatchMatrix`]
/// itself (see [`MatchMatrix::from_dense`]).
pub fn verify_background_vanishes(
    matching: &MatchMatrix,
    zeta: &ConfidenceVector,
    p_s: &ScoreMap,
) -> Result<(bool, f64)> {
    check_len("scores", matching.n(), p_s.len())?;
    let z = p2p_confidence(matching, zeta)?;
    let target = matching.row_indicator();
    let loss = masked_bce(p_s, &target, &z, DEFAULT_LAMBDA)?;
    Ok((loss.background_term == 0.0, loss.background_term))
}

/// `dL/dp[i] = z[i] (-lambda p_hat[i] / p[i] + (1 - p_hat[i]) / (1 - p[i]))`.
pub fn bce_gradient(p: &ScoreMap, target: &[f64], z: &ConfidenceMask, lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_len("objective", p.len(), target.len())?;
    check_len("confidence mask", p.len(), z.len())?;
    Ok(p
        .values()
        .iter()
        .zip(target)
        .zip(z.weights())
        .map(|((&pi, &ti), &zi)| {
            let pi = clamp_probability(pi);
            zi * (-lambda * ti / pi + (1.0 - ti) / (1.0 - pi))
        })
        .collect())
}

/// `alpha L_u + (1 - alpha) L_l`.
pub fn combined_loss(labeled: f64, unlabeled: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(alpha * unlabeled + (1.0 - alpha) * labeled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PROB_EPS;
    use proptest::prelude::*;

    fn scores(v: &[f64]) -> ScoreMap {
        ScoreMap::new(v.to_vec(), 1, v.len()).unwrap()
    }

    #[test]
    fn weighted_bce_examples() {
        let p = ScoreMap::uniform(3, 4, 0.5).unwrap();
        let l = weighted_bce(&p, &[0.0; 12], 1.0).unwrap();
        assert!((l.total - 12.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.foreground_term, 0.0);

        let p = scores(&[1.0, 0.0, 0.0, 0.0]);
        let l = weighted_bce(&p, &[1.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        assert!(l.total >= 0.0 && l.total <= 4.0 * 2.0 * PROB_EPS);

        let p = scores(&[0.3, 0.6, 0.9]);
        let t = [1.0, 0.0, 1.0];
        let a = weighted_bce(&p, &t, 1.0).unwrap();
        let b = weighted_bce(&p, &t, 2.0).unwrap();
        assert_eq!(b.foreground_term, 2.0 * a.foreground_term);
        assert_eq!(b.background_term, a.background_term);
        assert!(weighted_bce(&p, &t[..2], 1.0).is_err());
        assert!(weighted_bce(&p, &t, 0.0).is_err());
    }

    #[test]
    fn confidence_vector_examples() {
        assert_eq!(confidence_vector(&[0.9, 0.6], 0.7).unwrap().0, vec![true, false]);
        assert_eq!(confidence_vector(&[0.7, 0.7], 0.7).unwrap().0, vec![false, false]);
        assert!(confidence_vector(&[], 0.7).unwrap().is_empty());
        assert!(confidence_vector(&[0.9], 0.5).is_err());
        assert!(confidence_vector(&[0.9], 1.0).is_err());
    }

    #[test]
    fn p2p_confidence_examples() {
        let mm = MatchMatrix::new(vec![None, Some(0), Some(1), None], 2).unwrap();
        let z = p2p_confidence(&mm, &ConfidenceVector(vec![true, true])).unwrap();
        assert_eq!(z.weights(), mm.row_indicator().as_slice());
        let z = p2p_confidence(&mm, &ConfidenceVector(vec![false, false])).unwrap();
        assert_eq!(z.weights(), &[0.0; 4]);
        let z = p2p_confidence(&mm, &ConfidenceVector(vec![false, true])).unwrap();
        assert_eq!(z.weights(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(p2p_confidence(&mm, &ConfidenceVector(vec![true])).is_err());
    }

    #[test]
    fn p2r_confidence_examples() {
        let region = MatchMatrix::new(vec![Some(0), Some(0), Some(1), Some(1)], 2).unwrap();
        let full = NeighborhoodMask { beta: vec![1.0; 4], mu: 100.0 };
        let zeta = ConfidenceVector(vec![true, false]);
        assert_eq!(
            p2r_confidence(&region, &zeta, &full).unwrap(),
            p2p_confidence(&region, &zeta).unwrap()
        );

        let none = MatchMatrix::zeros(3, 0);
        let beta0 = NeighborhoodMask { beta: vec![0.0; 3], mu: 2.0 };
        let z = p2r_confidence(&none, &ConfidenceVector::default(), &beta0).unwrap();
        assert_eq!(z.weights(), &[1.0; 3]);

        // pixels 0,1 in a reliable region, 2 in an unreliable one, 3 outside all
        let region = MatchMatrix::new(vec![Some(0), Some(0), Some(1), None], 2).unwrap();
        let beta = NeighborhoodMask { beta: vec![1.0, 1.0, 1.0, 0.0], mu: 2.0 };
        let z = p2r_confidence(&region, &zeta, &beta).unwrap();
        assert_eq!(z.weights(), &[1.0, 1.0, 0.0, 1.0]);

        // a region row with beta = 0 is inconsistent
        let bad_beta = NeighborhoodMask { beta: vec![0.0, 1.0, 1.0, 0.0], mu: 2.0 };
        assert!(p2r_confidence(&region, &zeta, &bad_beta).is_err());
    }

    #[test]
    fn masked_bce_examples() {
        let p = scores(&[0.2, 0.7, 0.4]);
        let t = [0.0, 1.0, 0.0];
        let full = masked_bce(&p, &t, &ConfidenceMask::ones(3), 1.5).unwrap();
        assert_eq!(full, weighted_bce(&p, &t, 1.5).unwrap());
        let none = masked_bce(&p, &t, &ConfidenceMask::zeros(3), 1.5).unwrap();
        assert_eq!(none.total, 0.0);
        assert_eq!(none.active_pixel_count, 0);
    }

    #[test]
    fn background_vanishes_for_p2p_confidence() {
        let mm = MatchMatrix::new(vec![Some(1), None, None, Some(0), None], 2).unwrap();
        let p = scores(&[0.9, 0.2, 0.8, 0.6, 0.1]);
        for zeta in [vec![true, true], vec![false, true], vec![false, false]] {
            let (holds, residual) = verify_background_vanishes(&mm, &ConfidenceVector(zeta), &p).unwrap();
            assert!(holds);
            assert_eq!(residual, 0.0);
        }
        let empty = MatchMatrix::zeros(5, 2);
        let (holds, residual) = verify_background_vanishes(&empty, &ConfidenceVector(vec![true, true]), &p).unwrap();
        assert!(holds && residual == 0.0);
    }

    #[test]
    fn gradient_examples() {
        let p = scores(&[0.5, 0.3]);
        let g = bce_gradient(&p, &[1.0, 0.0], &ConfidenceMask::new(vec![1.0, 0.0]).unwrap(), 1.0).unwrap();
        assert_eq!(g, vec![-2.0, 0.0]);
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(3.0, 5.0, 0.0).unwrap(), 3.0);
        assert_eq!(combined_loss(3.0, 5.0, 1.0).unwrap(), 5.0);
        assert!((combined_loss(3.0, 6.0, DEFAULT_ALPHA).unwrap() - 5.0).abs() < 1e-12);
        assert!(combined_loss(3.0, 5.0, 1.5).is_err());
    }

    #[test]
    fn record_serializes_expected_fields() {
        let l = LossBreakdown { total: 1.5, foreground_term: 1.0, background_term: 0.5, active_pixel_count: 3 };
        let line = LossRecord::new(7, &l).to_json_line();
        assert_eq!(line, r#"{"step":7,"total":1.5,"fg":1.0,"bg":0.5,"active":3}"#);
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            vals in proptest::collection::vec((1e-3f64..1.0 - 1e-3, any::<bool>(), any::<bool>()), 1..20),
            lambda in 0.1f64..3.0,
        ) {
            let p: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let t: Vec<f64> = vals.iter().map(|v| if v.1 { 1.0 } else { 0.0 }).collect();
            let z = ConfidenceMask::new(vals.iter().map(|v| if v.2 { 1.0 } else { 0.0 }).collect()).unwrap();
            let g = bce_gradient(&scores(&p), &t, &z, lambda).unwrap();
            let h = 1e-6;
            for i in 0..p.len() {
                let eval = |x: f64| {
                    let mut q = p.clone();
                    q[i] = x;
                    masked_bce(&scores(&q), &t, &z, lambda).unwrap().total
                };
                let fd = (eval(p[i] + h) - eval(p[i] - h)) / (2.0 * h);
                let denom = g[i].abs().max(fd.abs()).max(1e-8);
                prop_assert!((g[i] - fd).abs() / denom < 1e-5, "i={} analytic={} fd={}", i, g[i], fd);
            }
        }

        #[test]
        fn loss_terms_are_non_negative(
            vals in proptest::collection::vec((0.0f64..=1.0, any::<bool>(), any::<bool>()), 1..30),
            lambda in 0.01f64..5.0,
        ) {
            let p = scores(&vals.iter().map(|v| v.0).collect::<Vec<_>>());
            let t: Vec<f64> = vals.iter().map(|v| if v.1 { 1.0 } else { 0.0 }).collect();
            let z = ConfidenceMask::new(vals.iter().map(|v| if v.2 { 1.0 } else { 0.0 }).collect()).unwrap();
            let l = masked_bce(&p, &t, &z, lambda).unwrap();
            prop_assert!(l.foreground_term >= 0.0 && l.background_term >= 0.0);
            prop_assert_eq!(l.total, l.foreground_term + l.background_term);
        }
    }
}
