//! Point-specific activation maps: which features push each pixel's
//! foreground score up.
//!
//! Every pixel's score depends only on the `r x r x c` block centred on it,
//! so one backward pass over the summed scores yields all per-pixel block
//! gradients at once. A patch is the ReLU of the channel-summed product of
//! gradient and block.

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FeatureMap, GridShape, ScoreMap};

/// Foreground threshold used by the aggregations.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

/// A decoder that scores a pixel from its feature block alone.
///
/// Blocks use cell-major layout: entry `(dy * r + dx) * c + k` holds channel
/// `k` at offset `(dy - r/2, dx - r/2)` from the centre pixel.
pub trait BlockDecoder {
    /// Side length of the square block (odd).
    fn receptive_field(&self) -> usize;

    fn channels(&self) -> usize;

    /// Foreground probability of the centre pixel.
    fn forward_block(&self, block: &[f64]) -> f64;

    /// Writes `d forward_block / d block` into `out`.
    fn gradient_block(&self, _block: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::Unsupported("decoder does not provide gradients"))
    }
}

/// Pixel index covered by cell `cell` of the block centred on `q`, or `None`
/// for a padding cell.
#[inline]
pub fn block_cell_target(q: usize, cell: usize, r: usize, shape: GridShape) -> Option<usize> {
    let half = (r / 2) as isize;
    let (y, x) = ((q / shape.width) as isize, (q % shape.width) as isize);
    let ty = y + (cell / r) as isize - half;
    let tx = x + (cell % r) as isize - half;
    if ty < 0 || tx < 0 || ty >= shape.height as isize || tx >= shape.width as isize {
        None
    } else {
        Some(ty as usize * shape.width + tx as usize)
    }
}

/// Copies the zero-padded block centred on pixel `q` into `out`; optionally
/// records which cells fall inside the grid.
pub(crate) fn gather_block(features: &FeatureMap, q: usize, r: usize, out: &mut [f64], mut valid: Option<&mut [bool]>) {
    let shape = features.shape();
    let c = features.channels();
    let plane = shape.len();
    let data = features.data();
    for cell in 0..r * r {
        let dst = &mut out[cell * c..(cell + 1) * c];
        match block_cell_target(q, cell, r, shape) {
            Some(t) => {
                for (k, v) in dst.iter_mut().enumerate() {
                    *v = data[k * plane + t];
                }
                if let Some(flags) = valid.as_deref_mut() {
                    flags[cell] = true;
                }
            }
            None => {
                dst.fill(0.0);
                if let Some(flags) = valid.as_deref_mut() {
                    flags[cell] = false;
                }
            }
        }
    }
}

/// Feature blocks for a contiguous range of centre pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSet {
    receptive_field: usize,
    channels: usize,
    shape: GridShape,
    first: usize,
    blocks: Vec<f64>,
    valid: Vec<bool>,
}

impl BlockSet {
    pub fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn block_len(&self) -> usize {
        self.receptive_field * self.receptive_field * self.channels
    }

    /// Number of blocks held.
    pub fn len(&self) -> usize {
        self.blocks.len() / self.block_len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Centre pixels covered, as a range of flat indices.
    pub fn pixels(&self) -> Range<usize> {
        self.first..self.first + self.len()
    }

    /// Block centred on pixel `q`.
    pub fn block(&self, q: usize) -> &[f64] {
        let i = q - self.first;
        &self.blocks[i * self.block_len()..(i + 1) * self.block_len()]
    }

    /// In-grid flags for each of the `r * r` cells of block `q`.
    pub fn validity(&self, q: usize) -> &[bool] {
        let cells = self.receptive_field * self.receptive_field;
        let i = q - self.first;
        &self.valid[i * cells..(i + 1) * cells]
    }

    /// Pixel covered by `cell` of block `q`, or `None` for padding.
    pub fn origin(&self, q: usize, cell: usize) -> Option<usize> {
        if self.validity(q)[cell] {
            block_cell_target(q, cell, self.receptive_field, self.shape)
        } else {
            None
        }
    }

    pub fn blocks(&self) -> &[f64] {
        &self.blocks
    }
}

fn check_field(r: usize) -> Result<()> {
    if r % 2 == 0 {
        return Err(Error::InvalidParameter(format!("receptive field must be odd, got {r}")));
    }
    Ok(())
}

/// Blocks for every pixel of the map.
pub fn extract_blocks(features: &FeatureMap, r: usize) -> Result<BlockSet> {
    extract_block_range(features, r, 0..features.shape().len())
}

/// Blocks for the centre pixels in `pixels`.
pub fn extract_block_range(features: &FeatureMap, r: usize, pixels: Range<usize>) -> Result<BlockSet> {
    check_field(r)?;
    let shape = features.shape();
    if pixels.end > shape.len() || pixels.start > pixels.end {
        return Err(Error::IndexOutOfRange {
            index: pixels.end,
            len: shape.len(),
        });
    }
    let c = features.channels();
    let bl = r * r * c;
    let count = pixels.len();
    let mut blocks = vec![0.0; count * bl];
    let mut valid = vec![false; count * r * r];
    for (i, q) in pixels.clone().enumerate() {
        gather_block(
            features,
            q,
            r,
            &mut blocks[i * bl..(i + 1) * bl],
            Some(&mut valid[i * r * r..(i + 1) * r * r]),
        );
    }
    Ok(BlockSet {
        receptive_field: r,
        channels: c,
        shape,
        first: pixels.start,
        blocks,
        valid,
    })
}

fn check_decoder<D: BlockDecoder + ?Sized>(blocks: &BlockSet, decoder: &D) -> Result<()> {
    if decoder.receptive_field() != blocks.receptive_field {
        return Err(Error::shape(
            "decoder receptive field",
            blocks.receptive_field,
            decoder.receptive_field(),
        ));
    }
    if decoder.channels() != blocks.channels {
        return Err(Error::shape("decoder channels", blocks.channels, decoder.channels()));
    }
    Ok(())
}

/// Scores of the block centres, in block order.
pub fn decode_block_scores<D: BlockDecoder + ?Sized>(blocks: &BlockSet, decoder: &D) -> Result<Vec<f64>> {
    check_decoder(blocks, decoder)?;
    Ok(blocks
        .blocks
        .chunks_exact(blocks.block_len())
        .map(|b| decoder.forward_block(b))
        .collect())
}

/// Full score map from a complete block set.
pub fn decode_blocks<D: BlockDecoder + ?Sized>(blocks: &BlockSet, decoder: &D) -> Result<ScoreMap> {
    if blocks.first != 0 || blocks.len() != blocks.shape.len() {
        return Err(Error::shape("block set pixels", blocks.shape.len(), blocks.len()));
    }
    let values = decode_block_scores(blocks, decoder)?;
    ScoreMap::new(values, blocks.shape.height, blocks.shape.width)
}

/// Gradient of the summed scores with respect to every block. Because each
/// score depends only on its own block, block `q` of the result is the
/// gradient of score `q` alone.
pub fn block_gradients<D: BlockDecoder + ?Sized>(blocks: &BlockSet, decoder: &D) -> Result<Vec<f64>> {
    check_decoder(blocks, decoder)?;
    let bl = blocks.block_len();
    let mut grads = vec![0.0; blocks.blocks.len()];
    for (b, g) in blocks.blocks.chunks_exact(bl).zip(grads.chunks_exact_mut(bl)) {
        decoder.gradient_block(b, g)?;
    }
    Ok(grads)
}

/// Activation patch of one pixel, `r x r`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PsamPatch {
    pub receptive_field: usize,
    pub values: Vec<f64>,
}

/// Channel-summed product of gradient and block, floored at zero.
pub fn psam_patch(grad: &[f64], block: &[f64], channels: usize) -> Result<PsamPatch> {
    if grad.len() != block.len() {
        return Err(Error::shape("gradient block", block.len(), grad.len()));
    }
    if channels == 0 || block.len() % channels != 0 {
        return Err(Error::shape("block channels", channels, block.len()));
    }
    let cells = block.len() / channels;
    let r = (cells as f64).sqrt().round() as usize;
    if r * r != cells || r % 2 == 0 {
        return Err(Error::shape("block cells", "odd square", cells));
    }
    let mut values = vec![0.0; cells];
    write_patch(grad, block, channels, &mut values);
    Ok(PsamPatch {
        receptive_field: r,
        values,
    })
}

#[inline]
fn write_patch(grad: &[f64], block: &[f64], channels: usize, out: &mut [f64]) {
    for (cell, o) in out.iter_mut().enumerate() {
        let s = cell * channels;
        let mut acc = 0.0;
        for k in s..s + channels {
            acc += grad[k] * block[k];
        }
        *o = acc.max(0.0);
    }
}

/// A patch placed back onto the full `h x w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PsamMap {
    pub shape: GridShape,
    pub values: Vec<f64>,
}

fn accumulate_patch(patch: &[f64], q: usize, r: usize, shape: GridShape, out: &mut [f64]) {
    for (cell, &v) in patch.iter().enumerate() {
        if let Some(t) = block_cell_target(q, cell, r, shape) {
            out[t] += v;
        }
    }
}

/// Embeds pixel `q`'s patch into a zero `h x w` map; padding cells are
/// dropped.
pub fn fill_back(patch: &PsamPatch, q: usize, shape: GridShape) -> Result<PsamMap> {
    let r = patch.receptive_field;
    check_field(r)?;
    if patch.values.len() != r * r {
        return Err(Error::shape("patch cells", r * r, patch.values.len()));
    }
    if q >= shape.len() {
        return Err(Error::IndexOutOfRange { index: q, len: shape.len() });
    }
    let mut values = vec![0.0; shape.len()];
    accumulate_patch(&patch.values, q, r, shape, &mut values);
    Ok(PsamMap { shape, values })
}

/// Patches for every pixel, stored flat (`n x r*r`).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPatches {
    pub receptive_field: usize,
    pub shape: GridShape,
    pub values: Vec<f64>,
}

impl PixelPatches {
    pub fn patch(&self, q: usize) -> &[f64] {
        let cells = self.receptive_field * self.receptive_field;
        &self.values[q * cells..(q + 1) * cells]
    }

    pub fn to_patch(&self, q: usize) -> PsamPatch {
        PsamPatch {
            receptive_field: self.receptive_field,
            values: self.patch(q).to_vec(),
        }
    }
}

/// Pixels processed per block batch by [`all_pixel_psam`].
pub const PSAM_CHUNK: usize = 64;

/// Patches for every pixel. Blocks and their gradients are materialised a
/// chunk at a time, so the working set stays near the output size instead
/// of the full per-pixel Jacobian.
pub fn all_pixel_psam<D: BlockDecoder + ?Sized>(features: &FeatureMap, decoder: &D) -> Result<PixelPatches> {
    let r = decoder.receptive_field();
    check_field(r)?;
    let shape = features.shape();
    let n = shape.len();
    let c = features.channels();
    let cells = r * r;
    let mut values = vec![0.0; n * cells];
    let mut start = 0;
    while start < n {
        let end = (start + PSAM_CHUNK).min(n);
        let blocks = extract_block_range(features, r, start..end)?;
        let grads = block_gradients(&blocks, decoder)?;
        let bl = blocks.block_len();
        for (i, (b, g)) in blocks.blocks.chunks_exact(bl).zip(grads.chunks_exact(bl)).enumerate() {
            let q = start + i;
            write_patch(g, b, c, &mut values[q * cells..(q + 1) * cells]);
        }
        start = end;
    }
    Ok(PixelPatches {
        receptive_field: r,
        shape,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// Sum of `r x r` patches over foreground pixels.
    Mean,
    /// Sum of filled-back `h x w` maps over foreground pixels.
    Global,
}

impl FromStr for AggregateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(AggregateMode::Mean),
            "global" => Ok(AggregateMode::Global),
            other => Err(Error::InvalidParameter(format!(
                "unknown aggregate mode `{other}` (expected mean or global)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsamAggregate {
    pub mode: AggregateMode,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Number of foreground pixels that contributed.
    pub foreground: usize,
}

/// Sums foreground pixels' activations, in increasing pixel order.
pub fn aggregate_psam(patches: &PixelPatches, scores: &ScoreMap, mode: AggregateMode) -> Result<PsamAggregate> {
    if scores.shape() != patches.shape {
        return Err(Error::shape(
            "score map",
            format!("{}x{}", patches.shape.height, patches.shape.width),
            format!("{}x{}", scores.height(), scores.width()),
        ));
    }
    let r = patches.receptive_field;
    let (height, width) = match mode {
        AggregateMode::Mean => (r, r),
        AggregateMode::Global => (patches.shape.height, patches.shape.width),
    };
    let mut values = vec![0.0; height * width];
    let mut foreground = 0;
    for (q, &p) in scores.values().iter().enumerate() {
        if p <= FOREGROUND_THRESHOLD {
            continue;
        }
        foreground += 1;
        match mode {
            AggregateMode::Mean => {
                for (o, v) in values.iter_mut().zip(patches.patch(q)) {
                    *o += v;
                }
            }
            AggregateMode::Global => accumulate_patch(patches.patch(q), q, r, patches.shape, &mut values),
        }
    }
    Ok(PsamAggregate {
        mode,
        height,
        width,
        values,
        foreground,
    })
}

/// Mean activation of each foreground pixel's patch, sorted ascending.
pub fn sorted_foreground_means(patches: &PixelPatches, scores: &ScoreMap) -> Vec<f64> {
    let cells = (patches.receptive_field * patches.receptive_field) as f64;
    let mut out: Vec<f64> = scores
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > FOREGROUND_THRESHOLD)
        .map(|(q, _)| patches.patch(q).iter().sum::<f64>() / cells)
        .collect();
    out.sort_by(f64::total_cmp);
    out
}
