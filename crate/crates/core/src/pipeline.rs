//! End-to-end forward pass: stages, pruning boundaries, refilling and decoding.
//!
//! [`ForwardState`] exposes the pass one step at a time so callers can look
//! at the tokens entering a boundary before choosing how to score them.
//! [`forward`] drives it with the model's own scoring heads.

use crate::compensation::{compensate, rebuild_sequence, CompensationMode};
use crate::cost::{ConfidenceSource, StageTokenCount};
use crate::encoder::{assemble_input, patch_embed, run_stage, IndexMap, Origin, TokenSequence};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::CatpModel;
use crate::numerics::Matrix;
use crate::pruning::{
    apply_keep_one_fallback, gather_retained, make_mask, partition_tokens, score_tokens, PruneThresholds,
    ScoringHead, StageRecord,
};
use crate::refill::{confidence_heatmap, decode, hierarchical_refill, snapshot_dense, FeaturePyramid, PredictionMap};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub prediction: PredictionMap,
    pub pyramid: FeaturePyramid,
    /// Dense snapshots before refilling, one per stage.
    pub bases: Vec<Matrix>,
    /// Grid positions processed by each stage.
    pub active: Vec<IndexMap>,
    pub records: Vec<StageRecord>,
    pub token_counts: Vec<StageTokenCount>,
}

impl PipelineOutput {
    /// Heatmap for each boundary, in boundary order.
    pub fn heatmaps(&self) -> Result<Vec<Vec<f64>>> {
        let t = self.pyramid.num_positions();
        (0..self.records.len())
            .map(|k| confidence_heatmap(&self.records[k], &self.records[..k], t))
            .collect()
    }

    /// Retention mask on the grid after each boundary: true where the
    /// position survives into the next stage.
    pub fn retention_masks(&self) -> Vec<Vec<bool>> {
        let t = self.pyramid.num_positions();
        self.records
            .iter()
            .map(|r| (0..t).map(|p| r.surviving.contains(p)).collect())
            .collect()
    }
}

pub struct ForwardState<'m> {
    model: &'m CatpModel,
    seq: TokenSequence,
    completed: usize,
    running: Matrix,
    bases: Vec<Matrix>,
    active: Vec<IndexMap>,
    records: Vec<StageRecord>,
    token_counts: Vec<StageTokenCount>,
}

impl<'m> ForwardState<'m> {
    /// Embeds the image and builds the initial sequence. Gray images are
    /// replicated to the configured channel count and color images averaged
    /// down to one channel.
    pub fn new(model: &'m CatpModel, image: &Image) -> Result<Self> {
        let cfg = &model.config;
        if image.height != cfg.image_h || image.width != cfg.image_w {
            return Err(Error::invalid(format!(
                "image is {}x{}, model expects {}x{}",
                image.height, image.width, cfg.image_h, cfg.image_w
            )));
        }
        let image = image.with_channels(cfg.channels)?;
        let enc = &model.encoder;
        let tokens = patch_embed(&image, cfg.patch_size, &enc.patch_proj, &enc.patch_bias)?;
        let seq = assemble_input(&tokens, &enc.cls, &enc.pos_embed)?;
        let running = seq.patches.clone();
        Ok(Self {
            model,
            seq,
            completed: 0,
            running,
            bases: Vec::new(),
            active: Vec::new(),
            records: Vec::new(),
            token_counts: Vec::new(),
        })
    }

    /// Sequence as it stands: stage output after [`run_next_stage`], or the
    /// rebuilt input after [`prune`].
    ///
    /// [`run_next_stage`]: Self::run_next_stage
    /// [`prune`]: Self::prune
    pub fn current(&self) -> &TokenSequence {
        &self.seq
    }

    pub fn completed_stages(&self) -> usize {
        self.completed
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    /// Runs the K layers of the next stage and takes its dense snapshot.
    pub fn run_next_stage(&mut self) -> Result<()> {
        let cfg = &self.model.config;
        if self.completed == cfg.num_stages() {
            return Err(Error::invalid("all stages already ran"));
        }
        if self.completed != self.records.len() {
            return Err(Error::invalid("prune the boundary before running the next stage"));
        }
        let stage = self.completed + 1;
        self.token_counts.push(StageTokenCount {
            patches: self.seq.num_patches(),
            prototypes: self.seq.prototypes.len(),
        });
        self.seq = run_stage(&self.seq, stage, cfg, &self.model.encoder)?;
        let snap = snapshot_dense(&self.running, &self.seq)?;
        self.running = snap.clone();
        self.bases.push(snap);
        self.active.push(self.seq.index_map.clone());
        self.completed = stage;
        Ok(())
    }

    /// Scores the current patch tokens with `head`, partitions them, builds
    /// prototypes for the pruned subsets and rebuilds the sequence for the
    /// next stage.
    pub fn prune(&mut self, head: &ScoringHead, thresholds: &PruneThresholds, mode: CompensationMode) -> Result<&StageRecord> {
        thresholds.validate()?;
        let s = self.model.config.num_stages();
        if self.completed == 0 || self.completed >= s || self.records.len() == self.completed {
            return Err(Error::invalid(format!(
                "no pruning boundary pending after stage {}",
                self.completed
            )));
        }
        let seq = &self.seq;
        let scores = score_tokens(&seq.patches, head, thresholds.tau)?;
        let mut partition = partition_tokens(&scores, thresholds);
        let fallback = apply_keep_one_fallback(&mut partition, &scores, &seq.index_map);
        if fallback {
            log::debug!("stage {}: empty middle band, keeping one token", self.completed + 1);
        }
        let mask = make_mask(&partition, seq.num_patches())?;
        let prototypes = compensate(mode, &seq.patches, &scores, &partition)?;
        let kept = gather_retained(seq, &mask)?;
        let find = |o: Origin| prototypes.iter().find(|p| p.origin == o);
        let rebuilt = rebuild_sequence(
            kept.cls,
            kept.patches,
            kept.index_map.clone(),
            find(Origin::Low),
            find(Origin::High),
        )?;
        if rebuilt.num_patches() != mask.popcount() {
            return Err(Error::Invariant("retained count differs from mask popcount".into()));
        }
        let record = StageRecord {
            stage: self.completed + 1,
            scores,
            partition,
            mask,
            entering: seq.index_map.clone(),
            surviving: kept.index_map,
            prototypes,
            fallback,
        };
        self.seq = rebuilt;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Refills the pyramid and decodes it. Every stage must have run.
    pub fn finish(self) -> Result<PipelineOutput> {
        let cfg = &self.model.config;
        if self.completed != cfg.num_stages() {
            return Err(Error::invalid(format!(
                "{} of {} stages ran",
                self.completed,
                cfg.num_stages()
            )));
        }
        let pyramid = hierarchical_refill(self.bases.clone(), &self.active, cfg.grid_h(), cfg.grid_w())?;
        let prediction = decode(&pyramid, &self.model.decoder, cfg.patch_size)?;
        Ok(PipelineOutput {
            prediction,
            pyramid,
            bases: self.bases,
            active: self.active,
            records: self.records,
            token_counts: self.token_counts,
        })
    }
}

/// Full pass with the model's scoring heads.
pub fn forward(
    model: &CatpModel,
    image: &Image,
    thresholds: &PruneThresholds,
    mode: CompensationMode,
) -> Result<PipelineOutput> {
    let mut state = ForwardState::new(model, image)?;
    for head in &model.heads {
        state.run_next_stage()?;
        state.prune(head, thresholds, mode)?;
    }
    state.run_next_stage()?;
    state.finish()
}

/// A model applied to one image, as a source of per-stage token counts.
pub struct ModelSource<'a> {
    pub model: &'a CatpModel,
    pub image: &'a Image,
}

impl ConfidenceSource for ModelSource<'_> {
    fn stage_counts(&self, thresholds: &PruneThresholds, mode: CompensationMode) -> Result<Vec<StageTokenCount>> {
        Ok(forward(self.model, self.image, thresholds, mode)?.token_counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numerics::Rng;

    fn noise_image(cfg: &EncoderConfig, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let n = cfg.image_h * cfg.image_w * cfg.channels;
        Image::new(cfg.image_h, cfg.image_w, cfg.channels, (0..n).map(|_| rng.next_f64()).collect()).unwrap()
    }

    /// Scoring heads strong enough that the default thresholds prune.
    fn strong_model(cfg: &EncoderConfig, seed: u64) -> CatpModel {
        let mut model = CatpModel::random(cfg, seed).unwrap();
        let mut rng = Rng::new(seed ^ 0xABCD);
        for h in &mut model.heads {
            for w in &mut h.weight {
                *w = 40.0 * rng.normal();
            }
        }
        model
    }

    #[test]
    fn no_prune_keeps_everything() {
        let cfg = EncoderConfig::default();
        let model = strong_model(&cfg, 1);
        let out = forward(&model, &noise_image(&cfg, 2), &PruneThresholds::no_prune(10.0), CompensationMode::Weighted).unwrap();
        assert!(out.token_counts.iter().all(|c| c.patches == 16 && c.prototypes == 0));
        assert!(out.records.iter().all(|r| r.mask.popcount() == 16));
        for level in &out.pyramid.levels {
            assert_eq!(level, out.pyramid.levels.last().unwrap());
        }
    }

    #[test]
    fn pruning_is_consistent_across_records_and_counts() {
        let cfg = EncoderConfig::default();
        let mut pruned_any = false;
        for seed in 0..10 {
            let model = strong_model(&cfg, seed);
            let out = forward(&model, &noise_image(&cfg, seed + 100), &PruneThresholds::default(), CompensationMode::Weighted).unwrap();
            for (k, r) in out.records.iter().enumerate() {
                assert_eq!(r.mask.popcount(), out.token_counts[k + 1].patches);
                assert_eq!(r.entering.len(), out.token_counts[k].patches);
                let expected_protos = usize::from(!r.partition.low.is_empty()) + usize::from(!r.partition.high.is_empty());
                assert_eq!(out.token_counts[k + 1].prototypes, expected_protos);
                pruned_any |= r.surviving.len() < r.entering.len();
            }
            assert_eq!(out.prediction.height, 64);
            assert!(out.prediction.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(pruned_any, "strong heads should prune at default thresholds");
    }

    #[test]
    fn state_machine_rejects_out_of_order_calls() {
        let cfg = EncoderConfig::default();
        let model = CatpModel::random(&cfg, 0).unwrap();
        let img = noise_image(&cfg, 0);
        let thr = PruneThresholds::default();
        let mut st = ForwardState::new(&model, &img).unwrap();
        assert!(st.prune(&model.heads[0], &thr, CompensationMode::None).is_err());
        st.run_next_stage().unwrap();
        assert!(st.run_next_stage().is_err());
        st.prune(&model.heads[0], &thr, CompensationMode::None).unwrap();
        assert!(st.prune(&model.heads[0], &thr, CompensationMode::None).is_err());
        assert!(ForwardState::new(&model, &Image::zeros(32, 64, 3)).is_err());
    }

    #[test]
    fn compensation_modes_change_sequence_length() {
        let cfg = EncoderConfig::default();
        let model = strong_model(&cfg, 4);
        let img = noise_image(&cfg, 5);
        let thr = PruneThresholds::default();
        let none = forward(&model, &img, &thr, CompensationMode::None).unwrap();
        let avg = forward(&model, &img, &thr, CompensationMode::Average).unwrap();
        assert!(none.token_counts.iter().all(|c| c.prototypes == 0));
        // first boundary sees identical tokens in both modes
        assert_eq!(none.records[0].partition, avg.records[0].partition);
        let r = &avg.records[0];
        let nonempty = usize::from(!r.partition.low.is_empty()) + usize::from(!r.partition.high.is_empty());
        assert_eq!(avg.token_counts[1].total(), r.mask.popcount() + 1 + nonempty);
        assert_eq!(none.token_counts[1].total(), r.mask.popcount() + 1);
    }
}
