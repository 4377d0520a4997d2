//! Dual-path feature compensation: the pruned low and high subsets are each
//! summarized by one prototype token appended to the next stage's input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{IndexMap, Origin, PrototypeToken, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::pruning::Partition;

/// How pruned tokens are summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompensationMode {
    /// Pruned tokens are dropped.
    None,
    /// Uniform mean of each pruned subset.
    Average,
    /// Confidence-weighted: `p` for the low subset, `1 - p` for the high one.
    #[default]
    Weighted,
}

impl FromStr for CompensationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "average" => Ok(Self::Average),
            "weighted" => Ok(Self::Weighted),
            other => Err(Error::invalid(format!(
                "unknown compensation mode {other:?} (expected none, average or weighted)"
            ))),
        }
    }
}

impl fmt::Display for CompensationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Average => "average",
            Self::Weighted => "weighted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub feature: Vec<f64>,
    pub origin: Origin,
    pub source_count: usize,
    /// Normalized weight of each source token, in source order.
    pub weights: Vec<f64>,
}

impl Prototype {
    pub fn token(&self) -> PrototypeToken {
        PrototypeToken {
            feature: self.feature.clone(),
            origin: self.origin,
        }
    }
}

fn combine(features: &Matrix, raw: Vec<f64>, origin: Origin) -> Option<Prototype> {
    if features.rows() == 0 {
        return None;
    }
    let total: f64 = raw.iter().sum();
    // Scores that saturate to exactly 0 or 1 in floating point can zero the
    // normalizer; fall back to uniform weights then.
    let weights: Vec<f64> = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    };
    let mut feature = vec![0.0; features.cols()];
    for (x, &w) in features.row_iter().zip(&weights) {
        for (f, v) in feature.iter_mut().zip(x) {
            *f += w * v;
        }
    }
    Some(Prototype {
        feature,
        origin,
        source_count: features.rows(),
        weights,
    })
}

fn check(features: &Matrix, scores: &[f64]) -> Result<()> {
    if features.rows() != scores.len() {
        return Err(Error::invalid(format!(
            "{} source features but {} scores",
            features.rows(),
            scores.len()
        )));
    }
    Ok(())
}

/// Low-subset prototype with weights `p_t / sum p`. `None` for an empty subset.
pub fn aggregate_low(features: &Matrix, scores: &[f64]) -> Result<Option<Prototype>> {
    check(features, scores)?;
    Ok(combine(features, scores.to_vec(), Origin::Low))
}

/// High-subset prototype with weights `(1 - p_t) / sum (1 - p)`.
pub fn aggregate_high(features: &Matrix, scores: &[f64]) -> Result<Option<Prototype>> {
    check(features, scores)?;
    Ok(combine(features, scores.iter().map(|p| 1.0 - p).collect(), Origin::High))
}

/// Unweighted mean, for the ablation mode.
pub fn aggregate_average(features: &Matrix, scores: &[f64], origin: Origin) -> Result<Option<Prototype>> {
    check(features, scores)?;
    Ok(combine(features, vec![1.0; scores.len()], origin))
}

/// Builds the prototypes for one boundary according to `mode`, low first.
pub fn compensate(
    mode: CompensationMode,
    patches: &Matrix,
    scores: &[f64],
    partition: &Partition,
) -> Result<Vec<Prototype>> {
    let subset = |slots: &[usize]| -> (Matrix, Vec<f64>) {
        (patches.select_rows(slots), slots.iter().map(|&t| scores[t]).collect())
    };
    let (low_x, low_p) = subset(&partition.low);
    let (high_x, high_p) = subset(&partition.high);
    let protos = match mode {
        CompensationMode::None => vec![],
        CompensationMode::Average => vec![
            aggregate_average(&low_x, &low_p, Origin::Low)?,
            aggregate_average(&high_x, &high_p, Origin::High)?,
        ],
        CompensationMode::Weighted => vec![aggregate_low(&low_x, &low_p)?, aggregate_high(&high_x, &high_p)?],
    };
    Ok(protos.into_iter().flatten().collect())
}

/// `[cls; mid patches; z_low?; z_high?]`. The index map covers only the
/// patches.
pub fn rebuild_sequence(
    cls: Vec<f64>,
    mid_patches: Matrix,
    index_map: IndexMap,
    low: Option<&Prototype>,
    high: Option<&Prototype>,
) -> Result<TokenSequence> {
    let prototypes = low.into_iter().chain(high).map(Prototype::token).collect();
    TokenSequence::new(cls, mid_patches, prototypes, index_map)
}
