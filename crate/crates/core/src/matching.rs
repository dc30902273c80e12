//! Cost matrices and learning objectives for point-to-point (P2P) and
//! point-to-region (P2R) matching.
//!
//! P2P assigns each annotated point to one pixel through a one-to-one
//! assignment over `tau * dist - S(p)`. P2R first splits the grid into the
//! nearest-point regions that lie within radius `mu` of their point, then
//! keeps the minimum-cost pixel of each region as the foreground target.
//! Ties are always broken towards the lower index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian_assign, CostMatrix};
use crate::error::{Error, Result};
use crate::types::{clamp_probability, MatchMatrix, PointAnnotation, ScoreMap};

pub const DEFAULT_TAU: f64 = 8.0;
pub const DEFAULT_MU: f64 = 64.0;

/// Dense `n x m` Euclidean distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[inline]
fn l2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let dr = a[0] - b[0];
    let dc = a[1] - b[1];
    (dr * dr + dc * dc).sqrt()
}

fn check_finite(coords: &[[f64; 2]]) -> Result<()> {
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coordinates"));
    }
    Ok(())
}

pub fn pairwise_l2(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<DistanceMatrix> {
    check_finite(pred)?;
    check_finite(gt)?;
    let m = gt.len();
    let mut values = vec![0.0; pred.len() * m];
    if m > 0 {
        for (row, x) in values.chunks_exact_mut(m).zip(pred) {
            for (d, y) in row.iter_mut().zip(gt) {
                *d = l2(x, y);
            }
        }
    }
    Ok(DistanceMatrix {
        rows: pred.len(),
        cols: m,
        values,
    })
}

/// Row-parallel variant of [`pairwise_l2`]; the result is identical.
pub fn pairwise_l2_parallel(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<DistanceMatrix> {
    check_finite(pred)?;
    check_finite(gt)?;
    let m = gt.len();
    let mut values = vec![0.0; pred.len() * m];
    if m > 0 {
        values
            .par_chunks_exact_mut(m)
            .zip(pred.par_iter())
            .for_each(|(row, x)| {
                for (d, y) in row.iter_mut().zip(gt) {
                    *d = l2(x, y);
                }
            });
    }
    Ok(DistanceMatrix {
        rows: pred.len(),
        cols: m,
        values,
    })
}

/// `S(p) = -ln(1/p - 1)` on the clamped probability.
#[inline]
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = clamp_probability(p);
    -(1.0 / p - 1.0).ln()
}

/// How predicted scores enter the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTransform {
    Identity,
    #[default]
    InverseSigmoid,
}

impl ScoreTransform {
    #[inline]
    pub fn apply(self, p: f64) -> f64 {
        match self {
            ScoreTransform::Identity => p,
            ScoreTransform::InverseSigmoid => inverse_sigmoid(p),
        }
    }
}

impl std::str::FromStr for ScoreTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ScoreTransform::Identity),
            "inverse_sigmoid" => Ok(ScoreTransform::InverseSigmoid),
            other => Err(Error::InvalidParameter(format!("unknown score transform `{other}`"))),
        }
    }
}

/// Hyperparameters shared by both matching schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub tau: f64,
    pub mu: f64,
    pub transform: ScoreTransform,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            mu: DEFAULT_MU,
            transform: ScoreTransform::InverseSigmoid,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau must be >= 0, got {tau}")));
    }
    Ok(())
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("mu must be > 0, got {mu}")));
    }
    Ok(())
}

/// `C[i, j] = tau * l2(i, j) - S(p[i])`.
pub fn p2p_cost(
    pred: &ScoreMap,
    gt: &PointAnnotation,
    tau: f64,
    transform: ScoreTransform,
) -> Result<CostMatrix> {
    check_tau(tau)?;
    let dist = pairwise_l2(&pred.coords(), gt.coords())?;
    cost_from_distances(pred, &dist, tau, transform)
}

fn cost_from_distances(
    pred: &ScoreMap,
    dist: &DistanceMatrix,
    tau: f64,
    transform: ScoreTransform,
) -> Result<CostMatrix> {
    let m = dist.cols();
    let mut values = Vec::with_capacity(dist.values().len());
    for (i, &p) in pred.values().iter().enumerate() {
        let s = transform.apply(p);
        values.extend(dist.row(i).iter().map(|d| tau * d - s));
    }
    CostMatrix::new(pred.len(), m, values)
}

/// Per-pixel indicator of lying strictly within `mu` of some point.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodMask {
    pub beta: Vec<f64>,
    pub mu: f64,
}

impl NeighborhoodMask {
    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        self.beta[i] == 1.0
    }
}

/// Outcome of either matching scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// P2P: the one-to-one assignment. P2R: the region matrix `M`.
    pub region: MatchMatrix,
    /// Binary learning objective, one entry per pixel.
    pub objective: Vec<f64>,
    /// Pixel selected for each point.
    pub chosen_pixels: Vec<usize>,
    /// Cost of each selected pixel.
    pub chosen_costs: Vec<f64>,
    /// Neighborhood mask (P2R only).
    pub neighborhood: Option<NeighborhoodMask>,
}

impl MatchResult {
    pub fn total_cost(&self) -> f64 {
        self.chosen_costs.iter().sum()
    }
}

fn objective_from_pixels(n: usize, chosen: &[usize]) -> Vec<f64> {
    let mut obj = vec![0.0; n];
    for &i in chosen {
        obj[i] = 1.0;
    }
    obj
}

/// P2P objective: Hungarian assignment on [`p2p_cost`], `p_hat = M 1`.
pub fn p2p_objective(pred: &ScoreMap, gt: &PointAnnotation, params: &MatchParams) -> Result<MatchResult> {
    let n = pred.len();
    if gt.is_empty() {
        return Ok(MatchResult {
            region: MatchMatrix::zeros(n, 0),
            objective: vec![0.0; n],
            chosen_pixels: Vec::new(),
            chosen_costs: Vec::new(),
            neighborhood: None,
        });
    }
    if n < gt.len() {
        return Err(Error::TooFewRows { rows: n, cols: gt.len() });
    }
    let cost = p2p_cost(pred, gt, params.tau, params.transform)?;
    let assignment = hungarian_assign(&cost)?;
    let chosen_costs = assignment
        .column_rows
        .iter()
        .enumerate()
        .map(|(j, &i)| cost.get(i, j).unwrap_or(f64::NAN))
        .collect();
    Ok(MatchResult {
        objective: objective_from_pixels(n, &assignment.column_rows),
        region: assignment.matrix,
        chosen_pixels: assignment.column_rows,
        chosen_costs,
        neighborhood: None,
    })
}

/// Nearest-point matrix `M_f`: row `i` is one-hot at its closest point.
pub fn nearest_region_matrix(dist: &DistanceMatrix) -> Result<MatchMatrix> {
    if dist.cols() == 0 {
        return Err(Error::InvalidParameter(
            "nearest-region assignment needs at least one point".into(),
        ));
    }
    let rows = (0..dist.rows())
        .map(|i| Some(argmin_lowest(dist.row(i)).0))
        .collect();
    MatchMatrix::new(rows, dist.cols())
}

/// `(index, value)` of the minimum, lowest index on ties.
#[inline]
fn argmin_lowest(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (k, v);
        }
    }
    best
}

/// `beta[i] = 1` iff `min_j l2(i, j) < mu`; all zero when there are no points.
pub fn neighborhood_mask(dist: &DistanceMatrix, mu: f64) -> Result<NeighborhoodMask> {
    check_mu(mu)?;
    let beta = (0..dist.rows())
        .map(|i| {
            if dist.cols() > 0 && argmin_lowest(dist.row(i)).1 < mu {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(NeighborhoodMask { beta, mu })
}

/// Region assignment `M = M_f ⊙ (beta 1ᵀ)` together with `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAssignment {
    pub matrix: MatchMatrix,
    pub mask: NeighborhoodMask,
    /// Distance from each pixel to its nearest point (`+inf` when `m = 0`).
    pub nearest_distance: Vec<f64>,
}

/// Nearest point and distance for every pixel.
fn nearest_points(pixels: &[[f64; 2]], points: &[[f64; 2]], parallel: bool) -> Vec<(usize, f64)> {
    let rows: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let cols: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let nearest = |x: &[f64; 2]| nearest_point(x, &rows, &cols);
    if parallel {
        pixels.par_iter().map(nearest).collect()
    } else {
        pixels.iter().map(nearest).collect()
    }
}

/// Squared distances order points the same way as distances, so the search
/// runs on squares in four independent lanes and only the winner pays for
/// the square root. Ties keep the lowest index.
fn nearest_point(x: &[f64; 2], rows: &[f64], cols: &[f64]) -> (usize, f64) {
    const LANES: usize = 4;
    let m = rows.len();
    let mut best_d = [f64::INFINITY; LANES];
    let mut best_k = [usize::MAX; LANES];
    let full = m - m % LANES;
    for base in (0..full).step_by(LANES) {
        for l in 0..LANES {
            let (dr, dc) = (x[0] - rows[base + l], x[1] - cols[base + l]);
            let d = dr * dr + dc * dc;
            if d < best_d[l] {
                best_d[l] = d;
                best_k[l] = base + l;
            }
        }
    }
    let mut best = (usize::MAX, f64::INFINITY);
    for l in 0..LANES {
        if best_d[l] < best.1 || (best_d[l] == best.1 && best_k[l] < best.0) {
            best = (best_k[l], best_d[l]);
        }
    }
    for k in full..m {
        let (dr, dc) = (x[0] - rows[k], x[1] - cols[k]);
        let d = dr * dr + dc * dc;
        if d < best.1 {
            best = (k, d);
        }
    }
    if best.0 == usize::MAX {
        // Every squared distance overflowed.
        best.0 = 0;
    }
    (best.0, best.1.sqrt())
}

fn region_from_nearest(n: usize, m: usize, nearest: &[(usize, f64)], mu: f64) -> RegionAssignment {
    let mut rows = vec![None; n];
    let mut beta = vec![0.0; n];
    let mut nearest_distance = vec![f64::INFINITY; n];
    for (i, &(k, d)) in nearest.iter().enumerate() {
        nearest_distance[i] = d;
        if d < mu {
            beta[i] = 1.0;
            rows[i] = Some(k);
        }
    }
    RegionAssignment {
        matrix: MatchMatrix::new(rows, m).expect("nearest index below m"),
        mask: NeighborhoodMask { beta, mu },
        nearest_distance,
    }
}

pub fn p2r_region(pred: &ScoreMap, gt: &PointAnnotation, mu: f64) -> Result<RegionAssignment> {
    check_mu(mu)?;
    check_finite(gt.coords())?;
    let n = pred.len();
    let m = gt.len();
    if m == 0 {
        return Ok(RegionAssignment {
            matrix: MatchMatrix::zeros(n, 0),
            mask: NeighborhoodMask {
                beta: vec![0.0; n],
                mu,
            },
            nearest_distance: vec![f64::INFINITY; n],
        });
    }
    let nearest = nearest_points(&pred.coords(), gt.coords(), false);
    Ok(region_from_nearest(n, m, &nearest, mu))
}

/// Dense P2R cost: admissible where `M[i, j] = 1`, forbidden elsewhere.
pub fn p2r_cost(pred: &ScoreMap, gt: &PointAnnotation, params: &MatchParams) -> Result<CostMatrix> {
    check_tau(params.tau)?;
    let region = p2r_region(pred, gt, params.mu)?;
    let dist = pairwise_l2(&pred.coords(), gt.coords())?;
    let cost = cost_from_distances(pred, &dist, params.tau, params.transform)?;
    let m = gt.len();
    let mut admissible = vec![false; pred.len() * m];
    for (i, r) in region.matrix.rows().iter().enumerate() {
        if let Some(j) = r {
            admissible[i * m + j] = true;
        }
    }
    cost.with_admissible(admissible)
}

/// P2R objective: per-region minimum-cost pixel, `p_hat = M_hat 1`.
pub fn p2r_objective(pred: &ScoreMap, gt: &PointAnnotation, params: &MatchParams) -> Result<MatchResult> {
    p2r_objective_impl(pred, gt, params, false)
}

/// [`p2r_objective`] with the per-pixel nearest-point search spread over
/// the rayon pool. The result is identical.
pub fn p2r_objective_parallel(pred: &ScoreMap, gt: &PointAnnotation, params: &MatchParams) -> Result<MatchResult> {
    p2r_objective_impl(pred, gt, params, true)
}

fn p2r_objective_impl(
    pred: &ScoreMap,
    gt: &PointAnnotation,
    params: &MatchParams,
    parallel: bool,
) -> Result<MatchResult> {
    check_tau(params.tau)?;
    check_mu(params.mu)?;
    check_finite(gt.coords())?;
    let n = pred.len();
    let m = gt.len();
    if m == 0 {
        return Ok(MatchResult {
            region: MatchMatrix::zeros(n, 0),
            objective: vec![0.0; n],
            chosen_pixels: Vec::new(),
            chosen_costs: Vec::new(),
            neighborhood: Some(NeighborhoodMask {
                beta: vec![0.0; n],
                mu: params.mu,
            }),
        });
    }
    let nearest = nearest_points(&pred.coords(), gt.coords(), parallel);
    let region = region_from_nearest(n, m, &nearest, params.mu);

    // Column-wise argmin over admissible entries only; rows are visited in
    // ascending order so the strict comparison keeps the lowest row on ties.
    let mut best: Vec<Option<(usize, f64)>> = vec![None; m];
    for (i, (&p, r)) in pred.values().iter().zip(region.matrix.rows()).enumerate() {
        if let Some(j) = *r {
            let c = params.tau * nearest[i].1 - params.transform.apply(p);
            if best[j].is_none_or(|(_, b)| c < b) {
                best[j] = Some((i, c));
            }
        }
    }
    let unmatched: Vec<usize> = best
        .iter()
        .enumerate()
        .filter_map(|(j, b)| b.is_none().then_some(j))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedPoints(unmatched));
    }
    let (chosen_pixels, chosen_costs): (Vec<usize>, Vec<f64>) = best.into_iter().map(Option::unwrap).unzip();
    Ok(MatchResult {
        objective: objective_from_pixels(n, &chosen_pixels),
        region: region.matrix,
        chosen_pixels,
        chosen_costs,
        neighborhood: Some(region.mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lane_search_matches_naive_argmin_with_ties() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let m = rng.random_range(1..14);
            // Small integer grid so ties are common.
            let points: Vec<[f64; 2]> = (0..m)
                .map(|_| [rng.random_range(0..4) as f64, rng.random_range(0..4) as f64])
                .collect();
            let x = [rng.random_range(0..4) as f64, rng.random_range(0..4) as f64];
            let d: Vec<f64> = points.iter().map(|p| l2(&x, p)).collect();
            let got = nearest_points(&[x], &points, false)[0];
            assert_eq!(got, argmin_lowest(&d), "{points:?} {x:?}");
        }
    }
    use crate::assignment::brute_force_assign;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize) -> Vec<[f64; 2]> {
        crate::types::GridShape::new(h, w).unwrap().all_coords()
    }

    fn points(p: &[[f64; 2]]) -> PointAnnotation {
        PointAnnotation::new(p.to_vec()).unwrap()
    }

    #[test]
    fn l2_examples() {
        let d = pairwise_l2(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap();
        assert_eq!(d.get(0, 0), 5.0);
        let d = pairwise_l2(&[[2.0, 2.0]], &[[2.0, 2.0]]).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        let d = pairwise_l2(&grid(2, 2), &[[0.0, 0.0]]).unwrap();
        assert_eq!(d.values(), &[0.0, 1.0, 1.0, 2f64.sqrt()]);
        let d = pairwise_l2(&grid(2, 2), &[]).unwrap();
        assert_eq!((d.rows(), d.cols()), (4, 0));
        assert!(pairwise_l2(&[[f64::NAN, 0.0]], &[[0.0, 0.0]]).is_err());
    }

    #[test]
    fn parallel_distances_match() {
        let px = grid(13, 17);
        let pts = [[1.5, 2.25], [10.0, 3.0], [0.0, 16.0]];
        assert_eq!(pairwise_l2(&px, &pts).unwrap(), pairwise_l2_parallel(&px, &pts).unwrap());
    }

    #[test]
    fn inverse_sigmoid_values() {
        assert_eq!(inverse_sigmoid(0.5), 0.0);
        assert!((inverse_sigmoid(0.9) - 9f64.ln()).abs() < 1e-12);
        assert!((inverse_sigmoid(0.9) - 2.197_224_577_336_219_6).abs() < 1e-12);
        let (a, b) = (inverse_sigmoid(0.2), inverse_sigmoid(0.8));
        assert!((a + b).abs() < 1e-12 && a < 0.0);
        assert!(inverse_sigmoid(0.0).is_finite() && inverse_sigmoid(1.0).is_finite());
    }

    #[test]
    fn p2p_cost_examples() {
        let pred = ScoreMap::uniform(3, 3, 0.5).unwrap();
        let gt = points(&[[1.0, 1.0], [0.0, 2.0]]);
        let c = p2p_cost(&pred, &gt, 0.0, ScoreTransform::InverseSigmoid).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));

        let pred = ScoreMap::new(vec![0.9], 1, 1).unwrap();
        let c = p2p_cost(&pred, &points(&[[0.0, 1.0]]), 8.0, ScoreTransform::InverseSigmoid).unwrap();
        assert!((c.get(0, 0).unwrap() - 5.802_775_422_663_78).abs() < 1e-10);
        assert!(p2p_cost(&pred, &points(&[[0.0, 0.0]]), -1.0, ScoreTransform::Identity).is_err());
    }

    #[test]
    fn p2p_objective_examples() {
        let pred = ScoreMap::uniform(2, 2, 0.5).unwrap();
        let r = p2p_objective(&pred, &PointAnnotation::empty(), &MatchParams::default()).unwrap();
        assert_eq!(r.objective, vec![0.0; 4]);

        let r = p2p_objective(&pred, &points(&[[0.0, 0.0]]), &MatchParams::default()).unwrap();
        assert_eq!(r.objective, vec![1.0, 0.0, 0.0, 0.0]);

        let pred = ScoreMap::uniform(3, 3, 0.5).unwrap();
        let gt = points(&[[0.0, 2.0], [2.0, 1.0]]);
        let r = p2p_objective(&pred, &gt, &MatchParams::default()).unwrap();
        let oracle = brute_force_assign(&p2p_cost(&pred, &gt, DEFAULT_TAU, ScoreTransform::InverseSigmoid).unwrap()).unwrap();
        assert_eq!(r.chosen_pixels, oracle.column_rows);
        assert_eq!(r.chosen_pixels, vec![2, 7]);
        assert_eq!(r.objective.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn nearest_region_examples() {
        let d = pairwise_l2(&grid(2, 2), &[[0.0, 0.0]]).unwrap();
        assert_eq!(nearest_region_matrix(&d).unwrap().rows(), &[Some(0); 4]);

        let d = pairwise_l2(&grid(2, 2), &[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let mf = nearest_region_matrix(&d).unwrap();
        assert_eq!(mf.row(1), Some(0), "pixel (0,1) is equidistant; lower index wins");
        assert_eq!(mf.row(2), Some(0));
        assert_eq!(mf.row(3), Some(1));

        let d = pairwise_l2(&grid(2, 2), &[]).unwrap();
        assert!(nearest_region_matrix(&d).is_err());
    }

    #[test]
    fn neighborhood_examples() {
        let d = pairwise_l2(&grid(2, 2), &[[0.0, 0.0]]).unwrap();
        assert_eq!(neighborhood_mask(&d, 1.5).unwrap().beta, vec![1.0; 4]);
        assert_eq!(neighborhood_mask(&d, 1.0).unwrap().beta, vec![1.0, 0.0, 0.0, 0.0]);
        let d = pairwise_l2(&grid(2, 2), &[[5.0, 5.0]]).unwrap();
        assert_eq!(neighborhood_mask(&d, 1.0).unwrap().beta, vec![0.0; 4]);
        let d = pairwise_l2(&grid(2, 2), &[]).unwrap();
        assert_eq!(neighborhood_mask(&d, 1.0).unwrap().beta, vec![0.0; 4]);
        assert!(neighborhood_mask(&d, 0.0).is_err());
    }

    #[test]
    fn region_examples() {
        let pred = ScoreMap::uniform(4, 4, 0.5).unwrap();
        let gt = points(&[[0.0, 0.0], [3.0, 3.0]]);
        let dist = pairwise_l2(&pred.coords(), gt.coords()).unwrap();
        let big = p2r_region(&pred, &gt, 100.0).unwrap();
        assert_eq!(big.matrix, nearest_region_matrix(&dist).unwrap());
        let tiny = p2r_region(&pred, &points(&[[0.5, 0.5]]), 0.1).unwrap();
        assert!(tiny.matrix.rows().iter().all(Option::is_none));

        let pred = ScoreMap::uniform(10, 10, 0.5).unwrap();
        let gt = points(&[[1.0, 1.0], [8.0, 8.0]]);
        let reg = p2r_region(&pred, &gt, 2.5).unwrap();
        let a: Vec<usize> = reg.matrix.column_members(0).collect();
        let b: Vec<usize> = reg.matrix.column_members(1).collect();
        assert_eq!(a.len(), b.len());
        assert!(!a.is_empty() && a.iter().all(|i| !b.contains(i)));
        assert!(a.iter().all(|&i| i / 10 <= 3 && i % 10 <= 3));

        let empty = p2r_region(&pred, &PointAnnotation::empty(), 2.0).unwrap();
        assert_eq!(empty.matrix.m(), 0);
        assert_eq!(empty.mask.beta, vec![0.0; 100]);
    }

    #[test]
    fn p2r_objective_line_example() {
        let pred = ScoreMap::new(vec![0.9, 0.1, 0.1, 0.1], 1, 4).unwrap();
        let gt = points(&[[0.0, 0.0]]);
        let r = p2r_objective(&pred, &gt, &MatchParams { tau: 8.0, mu: 64.0, ..Default::default() }).unwrap();
        assert_eq!(r.objective, vec![1.0, 0.0, 0.0, 0.0]);
        assert!((r.chosen_costs[0] + 2.197_224_577_336_219_6).abs() < 1e-12);
        let dense = p2r_cost(&pred, &gt, &MatchParams::default()).unwrap();
        assert!((dense.get(1, 0).unwrap() - 10.197_224_577_336_219).abs() < 1e-12);
    }

    #[test]
    fn p2r_tau_extremes() {
        let scores = vec![0.2, 0.3, 0.95, 0.4, 0.1, 0.6, 0.7, 0.2, 0.3];
        let pred = ScoreMap::new(scores, 3, 3).unwrap();
        let gt = points(&[[0.0, 0.0]]);
        let r = p2r_objective(&pred, &gt, &MatchParams { tau: 0.0, mu: 10.0, ..Default::default() }).unwrap();
        assert_eq!(r.chosen_pixels, vec![2]);
        let r = p2r_objective(&pred, &gt, &MatchParams { tau: 1e6, mu: 10.0, ..Default::default() }).unwrap();
        assert_eq!(r.chosen_pixels, vec![0]);
    }

    #[test]
    fn p2r_reports_isolated_points() {
        let pred = ScoreMap::uniform(3, 3, 0.5).unwrap();
        let gt = points(&[[0.0, 0.0], [1.5, 1.5]]);
        let err = p2r_objective(&pred, &gt, &MatchParams { mu: 0.5, ..Default::default() }).unwrap_err();
        assert!(matches!(err, Error::UnmatchedPoints(ref v) if v == &vec![1]));
    }

    #[test]
    fn identity_transform_is_available() {
        let pred = ScoreMap::new(vec![0.2, 0.9], 1, 2).unwrap();
        let gt = points(&[[0.0, 0.0]]);
        let params = MatchParams { tau: 0.5, mu: 10.0, transform: ScoreTransform::Identity };
        let r = p2r_objective(&pred, &gt, &params).unwrap();
        // costs: 0 - 0.2 = -0.2 vs 0.5 - 0.9 = -0.4
        assert_eq!(r.chosen_pixels, vec![1]);
        assert_eq!("identity".parse::<ScoreTransform>().unwrap(), ScoreTransform::Identity);
    }

    fn small_instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<[f64; 2]>, f64, f64)> {
        (1usize..=3, 1usize..=4).prop_flat_map(|(h, w)| {
            let n = h * w;
            (
                Just(h),
                Just(w),
                proptest::collection::vec(0.01f64..0.99, n),
                proptest::collection::vec((0.0..h as f64, 0.0..w as f64).prop_map(|(r, c)| [r, c]), 1..=3usize.min(n)),
                0.0f64..20.0,
                1.0f64..6.0,
            )
        })
    }

    proptest! {
        #[test]
        fn regions_are_disjoint_and_objective_is_in_region(
            (h, w, scores, pts, tau, mu) in small_instance()
        ) {
            let pred = ScoreMap::new(scores, h, w).unwrap();
            let gt = points(&pts);
            let params = MatchParams { tau, mu, ..Default::default() };
            let r = match p2r_objective(&pred, &gt, &params) {
                Ok(r) => r,
                Err(Error::UnmatchedPoints(_)) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert_eq!(r.objective.iter().sum::<f64>(), gt.len() as f64);
            // brute-force scan: each chosen pixel is the lowest-index
            // minimum-cost pixel among those assigned to its point
            let dense = p2r_cost(&pred, &gt, &params).unwrap();
            for (j, &chosen) in r.chosen_pixels.iter().enumerate() {
                prop_assert_eq!(r.region.row(chosen), Some(j));
                let mut best: Option<(usize, f64)> = None;
                for i in 0..pred.len() {
                    if let Some(c) = dense.get(i, j) {
                        if best.is_none_or(|(_, b)| c < b) {
                            best = Some((i, c));
                        }
                    }
                }
                prop_assert_eq!(best.map(|b| b.0), Some(chosen));
            }
            let par = p2r_objective_parallel(&pred, &gt, &params).unwrap();
            prop_assert_eq!(par, r);
        }

        #[test]
        fn mask_is_monotone_in_mu(
            (h, w, scores, pts, _tau, mu) in small_instance(), extra in 0.0f64..5.0
        ) {
            let pred = ScoreMap::new(scores, h, w).unwrap();
            let gt = points(&pts);
            let small = p2r_region(&pred, &gt, mu).unwrap();
            let large = p2r_region(&pred, &gt, mu + extra).unwrap();
            for i in 0..pred.len() {
                if let Some(j) = small.matrix.row(i) {
                    prop_assert_eq!(large.matrix.row(i), Some(j));
                }
            }
        }

        #[test]
        fn single_point_large_mu_agrees_with_p2p(
            (h, w, scores, pts, tau, _mu) in small_instance()
        ) {
            let pred = ScoreMap::new(scores, h, w).unwrap();
            let gt = points(&pts[..1]);
            let params = MatchParams { tau, mu: 1e3, ..Default::default() };
            let a = p2r_objective(&pred, &gt, &params).unwrap();
            let b = p2p_objective(&pred, &gt, &params).unwrap();
            prop_assert_eq!(a.chosen_costs[0], b.chosen_costs[0]);
        }

        #[test]
        fn inverse_sigmoid_is_increasing(a in 1e-5f64..0.99999, b in 1e-5f64..0.99999) {
            prop_assume!(a < b);
            prop_assert!(inverse_sigmoid(a) < inverse_sigmoid(b));
        }
    }
}
