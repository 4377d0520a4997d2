//! Dense per-stage snapshots, hierarchical token refilling into an aligned
//! feature pyramid, the pyramid decoder, and confidence heatmaps.

use crate::encoder::{IndexMap, Origin, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{dot, linear, sigmoid_scalar, Matrix};
use crate::pruning::StageRecord;

/// S dense `T x C` feature maps on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Matrix>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl FeaturePyramid {
    pub fn num_positions(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, every value in [0, 1].
    pub values: Vec<f64>,
}

impl PredictionMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Copy of `running` with the rows at the stage's active positions replaced
/// by the stage output patches. Class and prototype tokens are ignored.
pub fn snapshot_dense(running: &Matrix, stage_output: &TokenSequence) -> Result<Matrix> {
    if stage_output.patches.cols() != running.cols() {
        return Err(Error::invalid("snapshot width mismatch"));
    }
    let mut out = running.clone();
    for (slot, &pos) in stage_output.index_map.positions().iter().enumerate() {
        if pos >= out.rows() {
            return Err(Error::invalid(format!("grid position {pos} outside 0..{}", out.rows())));
        }
        out.row_mut(pos).copy_from_slice(stage_output.patches.row(slot));
    }
    Ok(out)
}

/// Deepest-first refill: for `s = S-1 .. 1`, rows of level `s` at the
/// positions active in stage `s+1` are overwritten with (already refilled)
/// level `s+1` rows. `active[s]` lists the grid positions processed by
/// stage `s+1` (zero-based level index).
pub fn hierarchical_refill(
    bases: Vec<Matrix>,
    active: &[IndexMap],
    grid_h: usize,
    grid_w: usize,
) -> Result<FeaturePyramid> {
    let t = grid_h * grid_w;
    if bases.len() != active.len() || bases.is_empty() {
        return Err(Error::invalid(format!(
            "{} snapshots but {} active sets",
            bases.len(),
            active.len()
        )));
    }
    if let Some(bad) = bases.iter().find(|b| b.rows() != t) {
        return Err(Error::invalid(format!("snapshot has {} rows, grid has {t}", bad.rows())));
    }
    for s in 1..active.len() {
        if let Some(&p) = active[s].positions().iter().find(|&&p| !active[s - 1].contains(p)) {
            return Err(Error::Invariant(format!(
                "position {p} active in stage {} but not in stage {}",
                s + 1,
                s
            )));
        }
    }
    let mut levels = bases;
    for s in (0..levels.len() - 1).rev() {
        let (shallow, deep) = levels.split_at_mut(s + 1);
        let (level, deeper) = (&mut shallow[s], &deep[0]);
        for &pos in active[s + 1].positions() {
            level.row_mut(pos).copy_from_slice(deeper.row(pos));
        }
    }
    Ok(FeaturePyramid {
        levels,
        grid_h,
        grid_w,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// Per level `C x D` projection and its bias.
    pub level_proj: Vec<(Matrix, Vec<f64>)>,
    pub out_weight: Vec<f64>,
    pub out_bias: f64,
}

impl DecoderWeights {
    pub fn zeros(levels: usize, c: usize, d: usize) -> Self {
        Self {
            level_proj: (0..levels).map(|_| (Matrix::zeros(c, d), vec![0.0; d])).collect(),
            out_weight: vec![0.0; d],
            out_bias: 0.0,
        }
    }
}

/// Per-position probabilities on the patch grid, before upsampling.
pub fn decode_grid(pyramid: &FeaturePyramid, weights: &DecoderWeights) -> Result<Vec<f64>> {
    if weights.level_proj.len() != pyramid.levels.len() {
        return Err(Error::invalid(format!(
            "decoder has {} level projections, pyramid has {} levels",
            weights.level_proj.len(),
            pyramid.levels.len()
        )));
    }
    let d = weights.out_weight.len();
    let mut fused = Matrix::zeros(pyramid.num_positions(), d);
    for (level, (w, b)) in pyramid.levels.iter().zip(&weights.level_proj) {
        fused.add_assign(&linear(level, w, b)?)?;
    }
    Ok(fused
        .row_iter()
        .map(|row| sigmoid_scalar(dot(row, &weights.out_weight) + weights.out_bias, 1.0))
        .collect())
}

/// Project every level to D, sum, project to one logit, sigmoid, then
/// bilinearly upsample the grid by `patch_size`.
pub fn decode(pyramid: &FeaturePyramid, weights: &DecoderWeights, patch_size: usize) -> Result<PredictionMap> {
    let grid = decode_grid(pyramid, weights)?;
    Ok(bilinear_upsample(&grid, pyramid.grid_h, pyramid.grid_w, patch_size))
}

/// Bilinear resize by an integer factor with half-pixel centers
/// (`align_corners = false`) and edge clamping.
pub fn bilinear_upsample(values: &[f64], h: usize, w: usize, factor: usize) -> PredictionMap {
    let (oh, ow) = (h * factor, w * factor);
    let src = |dst: usize, n: usize| -> (usize, usize, f64) {
        let x = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = src(y, h);
        for x in 0..ow {
            let (x0, x1, fx) = src(x, w);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    PredictionMap {
        height: oh,
        width: ow,
        values: out,
    }
}

/// Scores of `record` scattered onto the grid. Positions pruned at an
/// earlier boundary read 0 if they went out low and 1 if they went out high.
pub fn confidence_heatmap(record: &StageRecord, earlier: &[StageRecord], grid_len: usize) -> Result<Vec<f64>> {
    let mut field = vec![0.0; grid_len];
    for prior in earlier {
        for (origin, value) in [(Origin::Low, 0.0), (Origin::High, 1.0)] {
            for pos in prior.pruned_positions(origin) {
                *field
                    .get_mut(pos)
                    .ok_or_else(|| Error::invalid(format!("grid position {pos} out of range")))? = value;
            }
        }
    }
    if record.scores.len() != record.entering.len() {
        return Err(Error::invalid("record scores and entering map differ in length"));
    }
    for (&pos, &p) in record.entering.positions().iter().zip(&record.scores) {
        *field
            .get_mut(pos)
            .ok_or_else(|| Error::invalid(format!("grid position {pos} out of range")))? = p;
    }
    Ok(field)
}
