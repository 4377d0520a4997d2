//! Confidence scoring, dual-threshold partitioning, decision masks and
//! gathering of the retained tokens.

use serde::{Deserialize, Serialize};

use crate::compensation::Prototype;
use crate::encoder::{IndexMap, Origin, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid_scalar, Matrix};

pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_THETA_D: f64 = 0.3;
pub const DEFAULT_THETA_U: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneThresholds {
    pub theta_d: f64,
    pub theta_u: f64,
    pub tau: f64,
}

impl Default for PruneThresholds {
    fn default() -> Self {
        Self {
            theta_d: DEFAULT_THETA_D,
            theta_u: DEFAULT_THETA_U,
            tau: DEFAULT_TAU,
        }
    }
}

impl PruneThresholds {
    pub fn new(theta_d: f64, theta_u: f64, tau: f64) -> Result<Self> {
        let t = Self {
            theta_d,
            theta_u,
            tau,
        };
        t.validate()?;
        Ok(t)
    }

    /// `theta_d = 0, theta_u = 1`: every score lands in the middle band.
    pub fn no_prune(tau: f64) -> Self {
        Self {
            theta_d: 0.0,
            theta_u: 1.0,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.theta_d) || !unit.contains(&self.theta_u) {
            return Err(Error::invalid(format!(
                "thresholds {}/{} must lie in [0, 1]",
                self.theta_d, self.theta_u
            )));
        }
        if self.theta_d > self.theta_u {
            return Err(Error::invalid(format!(
                "theta_d {} exceeds theta_u {}",
                self.theta_d, self.theta_u
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Linear `C -> 1` projection producing one confidence logit per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl ScoringHead {
    pub fn zeros(c: usize) -> Self {
        Self {
            weight: vec![0.0; c],
            bias: 0.0,
        }
    }
}

/// Slot indices (into the entering patch tokens) of the three bands.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Partition {
    pub low: Vec<usize>,
    pub mid: Vec<usize>,
    pub high: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.low.len() + self.mid.len() + self.high.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionMask {
    pub bits: Vec<bool>,
}

impl DecisionMask {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Everything decided at one pruning boundary (the entry to stage `stage`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// 1-based index of the stage this boundary feeds, in `2..=S`.
    pub stage: usize,
    /// One score per entering patch token, in slot order.
    pub scores: Vec<f64>,
    pub partition: Partition,
    pub mask: DecisionMask,
    pub entering: IndexMap,
    pub surviving: IndexMap,
    pub prototypes: Vec<Prototype>,
    /// Set when the middle band was empty and one token was kept anyway.
    pub fallback: bool,
}

impl StageRecord {
    pub fn entering_count(&self) -> usize {
        self.entering.len()
    }

    pub fn surviving_count(&self) -> usize {
        self.surviving.len()
    }

    /// Grid positions pruned here into the given band.
    pub fn pruned_positions(&self, origin: Origin) -> Vec<usize> {
        let slots = match origin {
            Origin::Low => &self.partition.low,
            Origin::High => &self.partition.high,
        };
        slots.iter().map(|&t| self.entering.positions()[t]).collect()
    }
}

/// `p_t = sigmoid((x_t . w + b) / tau)` for every patch row.
pub fn score_tokens(patches: &Matrix, head: &ScoringHead, tau: f64) -> Result<Vec<f64>> {
    if head.weight.len() != patches.cols() {
        return Err(Error::invalid(format!(
            "scoring head width {} != token width {}",
            head.weight.len(),
            patches.cols()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    Ok(patches
        .row_iter()
        .map(|x| sigmoid_scalar(dot(x, &head.weight) + head.bias, tau))
        .collect())
}

/// Splits slots into `p < theta_d`, `theta_d <= p <= theta_u` and
/// `p > theta_u`.
pub fn partition_tokens(scores: &[f64], thresholds: &PruneThresholds) -> Partition {
    let mut part = Partition::default();
    for (t, &p) in scores.iter().enumerate() {
        if p < thresholds.theta_d {
            part.low.push(t);
        } else if p > thresholds.theta_u {
            part.high.push(t);
        } else {
            part.mid.push(t);
        }
    }
    part
}

/// If the middle band is empty, moves the slot with the smallest
/// `|p - 0.5|` (ties: lowest grid position) into it. Returns whether the
/// fallback fired.
pub fn apply_keep_one_fallback(part: &mut Partition, scores: &[f64], index_map: &IndexMap) -> bool {
    if !part.mid.is_empty() || scores.is_empty() {
        return false;
    }
    let positions = index_map.positions();
    let best = (0..scores.len())
        .min_by(|&a, &b| {
            let da = (scores[a] - 0.5).abs();
            let db = (scores[b] - 0.5).abs();
            da.total_cmp(&db).then(positions[a].cmp(&positions[b]))
        })
        .expect("nonempty");
    part.low.retain(|&t| t != best);
    part.high.retain(|&t| t != best);
    part.mid.push(best);
    true
}

/// Mask over the entering slots with bit `t` set iff `t` is in the middle band.
pub fn make_mask(partition: &Partition, entering_count: usize) -> Result<DecisionMask> {
    let mut bits = vec![false; entering_count];
    for &t in &partition.mid {
        *bits
            .get_mut(t)
            .ok_or_else(|| Error::invalid(format!("slot {t} outside 0..{entering_count}")))? = true;
    }
    Ok(DecisionMask { bits })
}

/// Keeps the masked patches and their grid positions in order, carries the
/// class token and drops any prototypes.
pub fn gather_retained(seq: &TokenSequence, mask: &DecisionMask) -> Result<TokenSequence> {
    if mask.len() != seq.num_patches() {
        return Err(Error::invalid(format!(
            "mask length {} != patch count {}",
            mask.len(),
            seq.num_patches()
        )));
    }
    let keep: Vec<usize> = (0..mask.len()).filter(|&t| mask.bits[t]).collect();
    TokenSequence::new(
        seq.cls.clone(),
        seq.patches.select_rows(&keep),
        Vec::new(),
        seq.index_map.filter(&mask.bits),
    )
}

/// Row `t` holds `dp_t / dx_t = p_t (1 - p_t) w / tau`; cross-token terms
/// are zero and not stored.
pub fn score_jacobian(patches: &Matrix, head: &ScoringHead, tau: f64) -> Result<Matrix> {
    let scores = score_tokens(patches, head, tau)?;
    let c = patches.cols();
    let mut jac = Matrix::zeros(patches.rows(), c);
    for (t, p) in scores.iter().enumerate() {
        let g = p * (1.0 - p) / tau;
        for (o, w) in jac.row_mut(t).iter_mut().zip(&head.weight) {
            *o = g * w;
        }
    }
    Ok(jac)
}
