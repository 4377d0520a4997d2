//! Analytic operation counts for the staged encoder under pruning.
//!
//! Per layer with `n` tokens of width `C` and MLP hidden width `rC`:
//!
//! * Q, K, V and output projections: `4 n C^2`
//! * attention logits and the weighted sum of values: `2 n^2 C`
//! * MLP up and down projections: `2 r n C^2`
//!
//! Every term is a matmul dimension product `m * k * n`. Biases, layer
//! norms, softmax and activations are not counted. Each pruning boundary adds
//! `2 N C` for its scoring head, where `N` is the entering patch count.

use serde::{Deserialize, Serialize};

use crate::compensation::CompensationMode;
use crate::encoder::{EncoderConfig, IndexMap};
use crate::error::{Error, Result};
use crate::pruning::{apply_keep_one_fallback, partition_tokens, PruneThresholds};

/// Tokens processed by one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTokenCount {
    pub patches: usize,
    pub prototypes: usize,
}

impl StageTokenCount {
    /// Sequence length including the class token.
    pub fn total(&self) -> usize {
        self.patches + 1 + self.prototypes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// 1-based layer index.
    pub layer: usize,
    pub tokens: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub scoring_overhead: u64,
    pub total_pruned: u64,
    pub total_baseline: u64,
    pub reduction_ratio: f64,
}

fn mlp_hidden(c: u64, mlp_ratio: f64) -> Result<u64> {
    let hidden = mlp_ratio * c as f64;
    if !(hidden >= 0.0) || hidden.fract() != 0.0 {
        return Err(Error::invalid(format!(
            "mlp_ratio {mlp_ratio} x width {c} is not a whole number"
        )));
    }
    Ok(hidden as u64)
}

/// Cost of one transformer layer over `n` tokens.
pub fn layer_flops(n: u64, c: u64, num_heads: u64, mlp_ratio: f64) -> Result<u64> {
    if num_heads == 0 || c % num_heads != 0 {
        return Err(Error::invalid(format!("width {c} not divisible by {num_heads} heads")));
    }
    let hidden = mlp_hidden(c, mlp_ratio)?;
    Ok(4 * n * c * c + 2 * n * n * c + 2 * n * c * hidden)
}

/// Sums layer costs with each stage's token count, adds scoring overhead and
/// compares against the unpruned encoder (`T + 1` tokens everywhere, no
/// scoring heads).
pub fn pipeline_flops(
    config: &EncoderConfig,
    stages: &[StageTokenCount],
    mode: CompensationMode,
) -> Result<CostReport> {
    let s = config.num_stages();
    if stages.len() != s {
        return Err(Error::invalid(format!("{} stage counts for {s} stages", stages.len())));
    }
    if mode == CompensationMode::None && stages.iter().any(|st| st.prototypes > 0) {
        return Err(Error::invalid("prototype tokens counted with compensation disabled"));
    }
    if stages.iter().any(|st| st.prototypes > 2) {
        return Err(Error::invalid("at most two prototypes per stage"));
    }
    let c = config.embed_dim as u64;
    let heads = config.num_heads as u64;
    let mut per_layer = Vec::with_capacity(config.num_layers);
    for (i, st) in stages.iter().enumerate() {
        for layer in config.stage_layers(i + 1) {
            let tokens = st.total();
            per_layer.push(LayerCost {
                layer: layer + 1,
                tokens,
                flops: layer_flops(tokens as u64, c, heads, config.mlp_ratio)?,
            });
        }
    }
    let scoring_overhead: u64 = stages[..s - 1].iter().map(|st| 2 * st.patches as u64 * c).sum();
    let total_pruned = per_layer.iter().map(|l| l.flops).sum::<u64>() + scoring_overhead;
    let baseline_tokens = config.num_patches() as u64 + 1;
    let total_baseline = config.num_layers as u64 * layer_flops(baseline_tokens, c, heads, config.mlp_ratio)?;
    Ok(CostReport {
        per_layer,
        scoring_overhead,
        total_pruned,
        total_baseline,
        reduction_ratio: 1.0 - total_pruned as f64 / total_baseline as f64,
    })
}

/// Anything that can say how many tokens each stage processes under given
/// thresholds.
pub trait ConfidenceSource {
    fn stage_counts(&self, thresholds: &PruneThresholds, mode: CompensationMode) -> Result<Vec<StageTokenCount>>;
}

/// Recorded per-boundary scores for every grid position. Replaying a trace
/// applies the partition rules to whichever positions are still active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub grid_len: usize,
    /// `boundaries[b][pos]`: score of grid position `pos` at boundary `b`.
    pub boundaries: Vec<Vec<f64>>,
}

impl ScoreTrace {
    pub fn new(grid_len: usize, boundaries: Vec<Vec<f64>>) -> Result<Self> {
        if boundaries.iter().any(|b| b.len() != grid_len) {
            return Err(Error::invalid("every boundary needs one score per grid position"));
        }
        Ok(Self { grid_len, boundaries })
    }
}

impl ConfidenceSource for ScoreTrace {
    fn stage_counts(&self, thresholds: &PruneThresholds, mode: CompensationMode) -> Result<Vec<StageTokenCount>> {
        let mut active = IndexMap::full(self.grid_len);
        let mut counts = vec![StageTokenCount {
            patches: self.grid_len,
            prototypes: 0,
        }];
        for scores_by_pos in &self.boundaries {
            let scores: Vec<f64> = active.positions().iter().map(|&p| scores_by_pos[p]).collect();
            let mut part = partition_tokens(&scores, thresholds);
            apply_keep_one_fallback(&mut part, &scores, &active);
            let prototypes = match mode {
                CompensationMode::None => 0,
                _ => usize::from(!part.low.is_empty()) + usize::from(!part.high.is_empty()),
            };
            let mut keep = vec![false; scores.len()];
            for &t in &part.mid {
                keep[t] = true;
            }
            active = active.filter(&keep);
            counts.push(StageTokenCount {
                patches: active.len(),
                prototypes,
            });
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub theta_d: f64,
    pub theta_u: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_counts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// One cost report per `(theta_d, theta_u)` pair, in grid order. Invalid
/// pairs yield an entry carrying only a diagnostic.
pub fn threshold_sweep(
    source: &dyn ConfidenceSource,
    grid: &[(f64, f64)],
    tau: f64,
    mode: CompensationMode,
    config: &EncoderConfig,
) -> Vec<SweepEntry> {
    grid.iter()
        .map(|&(theta_d, theta_u)| {
            let outcome = PruneThresholds::new(theta_d, theta_u, tau).and_then(|thr| {
                let counts = source.stage_counts(&thr, mode)?;
                let report = pipeline_flops(config, &counts, mode)?;
                Ok((counts, report))
            });
            match outcome {
                Ok((counts, report)) => SweepEntry {
                    theta_d,
                    theta_u,
                    token_counts: Some(counts.iter().map(StageTokenCount::total).collect()),
                    cost: Some(report),
                    diagnostic: None,
                },
                Err(e) => {
                    log::warn!("skipping threshold pair {theta_d}/{theta_u}: {e}");
                    SweepEntry {
                        theta_d,
                        theta_u,
                        token_counts: None,
                        cost: None,
                        diagnostic: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

/// Parses `"0.2/0.8,0.3/0.7"` into threshold pairs. An empty string is an
/// empty grid.
pub fn parse_grid(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (d, u) = pair
                .split_once('/')
                .ok_or_else(|| Error::invalid(format!("grid entry {pair:?} is not d/u")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("grid entry {pair:?}: bad number {s:?}")))
            };
            Ok((parse(d)?, parse(u)?))
        })
        .collect()
}
