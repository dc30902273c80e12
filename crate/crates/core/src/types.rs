//! Domain types shared by every stage of the pipeline.
//!
//! All coordinates are expressed in prediction-grid units: pixel `i` of an
//! `h x w` grid sits at `(row, col) = (i / w, i % w)`. The optional `stride`
//! on a [`ScoreMap`] records the grid-to-image ratio and is only used for
//! reporting.

use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any
/// logarithm or inverse sigmoid is taken.
pub const PROB_EPS: f64 = 1e-6;

/// Clamp a probability into the open unit interval. NaN is passed through.
#[inline]
pub fn clamp_probability(v: f64) -> f64 {
    v.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Spatial extent of a prediction grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of pixel `index`, unchecked.
    #[inline]
    pub fn coords_unchecked(&self, index: usize) -> [f64; 2] {
        [(index / self.width) as f64, (index % self.width) as f64]
    }

    /// `(row, col)` of every pixel in row-major order.
    pub fn all_coords(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.coords_unchecked(i)).collect()
    }
}

/// Row-major pixel coordinates `(floor(i / w), i mod w)`.
pub fn pixel_coords(index: usize, shape: GridShape) -> Result<(f64, f64)> {
    if index >= shape.len() {
        return Err(Error::IndexOutOfRange {
            index,
            len: shape.len(),
        });
    }
    let [r, c] = shape.coords_unchecked(index);
    Ok((r, c))
}

/// Flattened per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    values: Vec<f64>,
    shape: GridShape,
    stride: u32,
}

impl ScoreMap {
    /// Builds a score map, clamping every value into `[eps, 1 - eps]`.
    pub fn new(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        let shape = GridShape::new(height, width)?;
        if values.len() != shape.len() {
            return Err(Error::shape("score map", shape.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score map"));
        }
        let values = values.into_iter().map(clamp_probability).collect();
        Ok(Self {
            values,
            shape,
            stride: 1,
        })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; height * width], height, width)
    }

    pub fn with_stride(mut self, stride: u32) -> Self {
        self.stride = stride.max(1);
        self
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.shape.all_coords()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Ground-truth or pseudo point locations, one `(row, col)` pair per point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointAnnotation {
    coords: Vec<[f64; 2]>,
}

impl PointAnnotation {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        if let Some(j) = coords.iter().position(|p| p[0] < 0.0 || p[1] < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "point {j} has a negative coordinate"
            )));
        }
        Ok(Self { coords })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Rejects points lying outside `[0, h) x [0, w)`.
    pub fn check_within(&self, shape: GridShape) -> Result<()> {
        for (j, p) in self.coords.iter().enumerate() {
            if p[0] >= shape.height as f64 || p[1] >= shape.width as f64 {
                return Err(Error::InvalidParameter(format!(
                    "point {j} at ({}, {}) lies outside the {}x{} grid",
                    p[0], p[1], shape.height, shape.width
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Sparse binary `n x m` matrix whose rows are all-zero or one-hot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchMatrix {
    rows: Vec<Option<usize>>,
    cols: usize,
}

impl MatchMatrix {
    pub fn new(rows: Vec<Option<usize>>, cols: usize) -> Result<Self> {
        if let Some(i) = rows.iter().position(|r| matches!(r, Some(j) if *j >= cols)) {
            return Err(Error::InvalidMatchMatrix(format!(
                "row {i} points at column {:?} but there are {cols} columns",
                rows[i]
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            rows: vec![None; n],
            cols: m,
        }
    }

    /// Builds the matrix from a per-column row choice (one-to-one matching).
    pub fn from_column_rows(n: usize, column_rows: &[usize]) -> Result<Self> {
        let mut rows = vec![None; n];
        for (j, &i) in column_rows.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if rows[i].is_some() {
                return Err(Error::InvalidMatchMatrix(format!(
                    "row {i} assigned to more than one column"
                )));
            }
            rows[i] = Some(j);
        }
        Ok(Self {
            rows,
            cols: column_rows.len(),
        })
    }

    /// Builds the matrix from a dense 0/1 representation, rejecting rows with
    /// more than one non-zero entry.
    pub fn from_dense(dense: &[Vec<u8>], cols: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(dense.len());
        for (i, row) in dense.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape("dense match matrix row", cols, row.len()));
            }
            let mut hot = None;
            for (j, &v) in row.iter().enumerate() {
                match (v, hot) {
                    (0, _) => {}
                    (1, None) => hot = Some(j),
                    (1, Some(_)) => {
                        return Err(Error::InvalidMatchMatrix(format!("row {i} has more than one entry")))
                    }
                    _ => return Err(Error::InvalidMatchMatrix(format!("row {i} is not binary"))),
                }
            }
            rows.push(hot);
        }
        Ok(Self { rows, cols })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> Option<usize> {
        self.rows[i]
    }

    pub fn rows(&self) -> &[Option<usize>] {
        &self.rows
    }

    /// `M * v` for a length-`m` vector.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape("match matrix product", self.cols, v.len()));
        }
        Ok(self
            .rows
            .iter()
            .map(|r| r.map_or(0.0, |j| v[j]))
            .collect())
    }

    /// `M * 1`: indicator of assigned rows.
    pub fn row_indicator(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| if r.is_some() { 1.0 } else { 0.0 })
            .collect()
    }

    /// Rows assigned to column `j`.
    pub fn column_members(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows
            .iter()
            .enumerate()
            .filter_map(move |(i, r)| (*r == Some(j)).then_some(i))
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        self.rows
            .iter()
            .map(|r| {
                let mut row = vec![0u8; self.cols];
                if let Some(j) = r {
                    row[*j] = 1;
                }
                row
            })
            .collect()
    }
}

/// Per-point reliability flags `zeta`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfidenceVector(pub Vec<bool>);

impl ConfidenceVector {
    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Diagonal of the per-pixel confidence matrix `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMask {
    weights: Vec<f64>,
}

impl ConfidenceMask {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|&w| w != 0.0 && w != 1.0) {
            return Err(Error::InvalidMatchMatrix(format!(
                "confidence weight {} at pixel {i} is not binary",
                weights[i]
            )));
        }
        Ok(Self { weights })
    }

    pub fn ones(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            weights: vec![0.0; n],
        }
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Multiplies the mask by a binary validity mask (cut-out regions get 0).
    pub fn restrict(&self, validity: &[f64]) -> Result<Self> {
        if validity.len() != self.weights.len() {
            return Err(Error::shape("validity mask", self.weights.len(), validity.len()));
        }
        Self::new(
            self.weights
                .iter()
                .zip(validity)
                .map(|(z, v)| z * v)
                .collect(),
        )
    }
}

/// `c x h x w` feature grid stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    shape: GridShape,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let shape = GridShape::new(height, width)?;
        if channels == 0 {
            return Err(Error::InvalidParameter("feature map needs at least one channel".into()));
        }
        if data.len() != channels * shape.len() {
            return Err(Error::shape("feature map", channels * shape.len(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self {
            channels,
            shape,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.shape.height + row) * self.shape.width + col]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pixel_coords_row_major() {
        let shape = GridShape::new(2, 4).unwrap();
        assert_eq!(pixel_coords(0, shape).unwrap(), (0.0, 0.0));
        assert_eq!(pixel_coords(5, shape).unwrap(), (1.0, 1.0));
        assert_eq!(pixel_coords(7, shape).unwrap(), (1.0, 3.0));
        assert!(matches!(
            pixel_coords(8, shape),
            Err(Error::IndexOutOfRange { index: 8, len: 8 })
        ));
    }

    #[test]
    fn score_map_clamps_extremes() {
        let s = ScoreMap::new(vec![0.0, 1.0, 0.3, 0.5], 2, 2).unwrap();
        assert_eq!(s.values()[0], PROB_EPS);
        assert_eq!(s.values()[1], 1.0 - PROB_EPS);
        assert_eq!(s.values()[2], 0.3);
        assert!(ScoreMap::new(vec![0.5; 3], 2, 2).is_err());
        assert!(ScoreMap::new(vec![f64::NAN; 4], 2, 2).is_err());
    }

    #[test]
    fn points_reject_negative_and_out_of_grid() {
        assert!(PointAnnotation::new(vec![[-1.0, 0.0]]).is_err());
        assert!(PointAnnotation::new(vec![[f64::INFINITY, 0.0]]).is_err());
        let p = PointAnnotation::new(vec![[3.0, 1.0]]).unwrap();
        assert!(p.check_within(GridShape::new(3, 3).unwrap()).is_err());
        assert!(p.check_within(GridShape::new(4, 3).unwrap()).is_ok());
    }

    #[test]
    fn match_matrix_products() {
        let mm = MatchMatrix::new(vec![Some(1), None, Some(0)], 2).unwrap();
        assert_eq!(mm.mul_vec(&[1.0, 0.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(mm.row_indicator(), vec![1.0, 0.0, 1.0]);
        assert!(MatchMatrix::new(vec![Some(2)], 2).is_err());
        assert!(MatchMatrix::from_column_rows(3, &[1, 1]).is_err());
        assert_eq!(MatchMatrix::from_dense(&mm.to_dense(), 2).unwrap(), mm);
        assert!(MatchMatrix::from_dense(&[vec![1, 1]], 2).is_err());
        assert!(MatchMatrix::from_dense(&[vec![2, 0]], 2).is_err());
    }

    #[test]
    fn confidence_mask_must_be_binary() {
        assert!(ConfidenceMask::new(vec![0.0, 1.0]).is_ok());
        assert!(ConfidenceMask::new(vec![2.0]).is_err());
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(v in -2.0f64..3.0) {
            let once = clamp_probability(v);
            prop_assert_eq!(clamp_probability(once).to_bits(), once.to_bits());
        }
    }
}
