//! Command implementations behind the `catp` binary: run, sweep, gradcheck
//! and mae. Each produces in-memory results first; writing to disk is a
//! separate step so the same code backs the CLI, tests and bindings.

use std::path::Path;

use serde::Serialize;

use crate::compensation::CompensationMode;
use crate::config::RunConfig;
use crate::cost::{pipeline_flops, threshold_sweep, CostReport, StageTokenCount, SweepEntry};
use crate::encoder::{EncoderConfig, Origin};
use crate::error::{Error, Result};
use crate::image::{encode_pgm, to_byte, write_bytes, Image};
use crate::model::CatpModel;
use crate::numerics::{gaussian_init, Matrix, Rng};
use crate::pipeline::{forward, ModelSource, PipelineOutput};
use crate::pruning::{score_jacobian, score_tokens, ScoringHead};
use crate::refill::PredictionMap;
use crate::weights::read_weight_file;

/// Resolves the model for a run: weight file if configured, seeded
/// initialization for everything it lacks.
pub fn load_model(config: &RunConfig) -> Result<CatpModel> {
    let map = match &config.weights_path {
        Some(p) => read_weight_file(p)?,
        None => Default::default(),
    };
    CatpModel::from_weight_map(&config.encoder, &map, config.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: usize,
    pub entering: usize,
    pub low: usize,
    pub mid: usize,
    pub high: usize,
    pub retained: usize,
    pub prototypes: Vec<Origin>,
    pub fallback: bool,
    /// Scores exactly equal to either threshold (these stay in the middle band).
    pub threshold_hits: usize,
    pub retained_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageInfo {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub image: ImageInfo,
    pub stages: Vec<StageSummary>,
    /// Sequence length (cls + patches + prototypes) processed by each stage.
    pub token_counts: Vec<usize>,
    pub patch_counts: Vec<usize>,
    pub cost: CostReport,
}

/// Everything `catp run` produces: the raw pipeline output, the report, and
/// the encoded files keyed by file name.
pub struct RunArtifacts {
    pub output: PipelineOutput,
    pub report: RunReport,
    pub files: Vec<(String, Vec<u8>)>,
}

impl RunArtifacts {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in &self.files {
            write_bytes(&dir.join(name), bytes)?;
        }
        Ok(())
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Invariant(format!("json encoding: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn summarize(out: &PipelineOutput, config: &RunConfig) -> Vec<StageSummary> {
    let thr = &config.thresholds;
    out.records
        .iter()
        .map(|r| StageSummary {
            stage: r.stage,
            entering: r.entering_count(),
            low: r.partition.low.len(),
            mid: r.partition.mid.len(),
            high: r.partition.high.len(),
            retained: r.surviving_count(),
            prototypes: r.prototypes.iter().map(|p| p.origin).collect(),
            fallback: r.fallback,
            threshold_hits: r.scores.iter().filter(|&&p| p == thr.theta_d || p == thr.theta_u).count(),
            retained_positions: r.surviving.positions().to_vec(),
        })
        .collect()
}

/// Runs the full pipeline on one image and encodes `prediction.pgm`,
/// `mask_{s}.pgm`, `heatmap_{s}.pgm` for every boundary `s`, and
/// `report.json`.
pub fn run(config: &RunConfig, model: &CatpModel, image: &Image) -> Result<RunArtifacts> {
    let enc = &config.encoder;
    let output = forward(model, image, &config.thresholds, config.compensation)?;
    let cost = pipeline_flops(enc, &output.token_counts, config.compensation)?;
    let report = RunReport {
        config: config.clone(),
        image: ImageInfo {
            height: image.height,
            width: image.width,
            channels: image.channels,
        },
        stages: summarize(&output, config),
        token_counts: output.token_counts.iter().map(StageTokenCount::total).collect(),
        patch_counts: output.token_counts.iter().map(|c| c.patches).collect(),
        cost,
    };

    let (gw, gh) = (enc.grid_w(), enc.grid_h());
    let mut files = Vec::new();
    let pred = &output.prediction;
    let pixels: Vec<u8> = pred.values.iter().map(|&v| to_byte(v)).collect();
    files.push(("prediction.pgm".to_owned(), encode_pgm(pred.width, pred.height, &pixels)?));
    for ((record, mask), heat) in output.records.iter().zip(output.retention_masks()).zip(output.heatmaps()?) {
        let mask_px: Vec<u8> = mask.iter().map(|&kept| if kept { 255 } else { 0 }).collect();
        files.push((format!("mask_{}.pgm", record.stage), encode_pgm(gw, gh, &mask_px)?));
        let heat_px: Vec<u8> = heat.iter().map(|&v| to_byte(v)).collect();
        files.push((format!("heatmap_{}.pgm", record.stage), encode_pgm(gw, gh, &heat_px)?));
    }
    files.push(("report.json".to_owned(), to_json(&report)?));
    Ok(RunArtifacts { output, report, files })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub compensation: CompensationMode,
    pub tau: f64,
    pub entries: Vec<SweepEntry>,
}

/// Cost report for every threshold pair, using real forward passes of
/// `model` on `image`.
pub fn sweep(config: &RunConfig, model: &CatpModel, image: &Image, grid: &[(f64, f64)]) -> SweepReport {
    let source = ModelSource { model, image };
    SweepReport {
        compensation: config.compensation,
        tau: config.thresholds.tau,
        entries: threshold_sweep(&source, grid, config.thresholds.tau, config.compensation, &config.encoder),
    }
}

/// A centered high-contrast disk on a lightly textured background.
#[derive(Debug, Clone)]
pub struct DiskScene {
    pub image: Image,
    pub center_y: f64,
    pub center_x: f64,
    pub radius: f64,
}

impl DiskScene {
    /// Disk of radius `0.3 * min(h, w)` centered within a couple of pixels
    /// of the image center; foreground 0.8, background 0.2, each pixel
    /// jittered by up to 0.05.
    pub fn generate(height: usize, width: usize, channels: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let center_y = height as f64 / 2.0 + rng.uniform(-2.0, 2.0);
        let center_x = width as f64 / 2.0 + rng.uniform(-2.0, 2.0);
        let radius = 0.3 * height.min(width) as f64;
        let mut image = Image::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                let inside = Self::inside_at(center_y, center_x, radius, y, x);
                let base = if inside { 0.8 } else { 0.2 };
                for c in 0..channels {
                    image.set(y, x, c, base + rng.uniform(-0.05, 0.05));
                }
            }
        }
        Self {
            image,
            center_y,
            center_x,
            radius,
        }
    }

    fn inside_at(cy: f64, cx: f64, r: f64, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - cy;
        let dx = x as f64 + 0.5 - cx;
        dy * dy + dx * dx <= r * r
    }

    pub fn inside(&self, y: usize, x: usize) -> bool {
        Self::inside_at(self.center_y, self.center_x, self.radius, y, x)
    }

    /// Fraction of each `p x p` patch's pixels inside the disk, grid order.
    pub fn patch_coverage(&self, p: usize) -> Vec<f64> {
        let (gh, gw) = (self.image.height / p, self.image.width / p);
        let mut out = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut n = 0;
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        n += usize::from(self.inside(y, x));
                    }
                }
                out.push(n as f64 / (p * p) as f64);
            }
        }
        out
    }
}

/// Input for commands that were not given an image.
pub fn default_image(config: &EncoderConfig, seed: u64) -> Image {
    DiskScene::generate(config.image_h, config.image_w, config.channels, seed).image
}

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauScaling {
    pub tau: f64,
    /// Frobenius norm of the score Jacobian on a fixed draw.
    pub jacobian_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub draws: usize,
    pub tau: f64,
    pub step: f64,
    pub max_rel_error: f64,
    pub zero_weight_max_abs: f64,
    pub tau_scaling: Vec<TauScaling>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central-difference Jacobian of each token's score with respect to its
/// own feature row.
pub fn finite_difference_jacobian(patches: &Matrix, head: &ScoringHead, tau: f64, step: f64) -> Result<Matrix> {
    let mut jac = Matrix::zeros(patches.rows(), patches.cols());
    let mut probe = patches.clone();
    for t in 0..patches.rows() {
        for j in 0..patches.cols() {
            let orig = patches.get(t, j);
            probe.set(t, j, orig + step);
            let plus = score_tokens(&probe, head, tau)?[t];
            probe.set(t, j, orig - step);
            let minus = score_tokens(&probe, head, tau)?[t];
            probe.set(t, j, orig);
            jac.set(t, j, (plus - minus) / (2.0 * step));
        }
    }
    Ok(jac)
}

/// Largest per-row relative error `max|a - f| / max(max|a|, max|f|)`; rows
/// where both are exactly zero count as zero error.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic
        .row_iter()
        .zip(numeric.row_iter())
        .map(|(a, f)| {
            let diff = a.iter().zip(f).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let scale = a.iter().chain(f).map(|v| v.abs()).fold(0.0, f64::max);
            if scale == 0.0 {
                0.0
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}

fn random_draw(rng: &mut Rng, n: usize, c: usize) -> Result<(Matrix, ScoringHead)> {
    let patches = gaussian_init(rng, n, c, 1.0)?;
    let weight = gaussian_init(rng, 1, c, 1.0)?.into_data();
    let bias = rng.normal();
    Ok((patches, ScoringHead { weight, bias }))
}

/// Checks the analytic score Jacobian against central differences on
/// `draws` random (tokens, head) pairs at the configured width and tau.
pub fn gradcheck(config: &RunConfig, draws: usize) -> Result<GradcheckReport> {
    let tau = config.thresholds.tau;
    let c = config.encoder.embed_dim;
    let n = config.encoder.num_patches();
    let mut rng = Rng::new(config.seed);

    let mut max_rel_error: f64 = 0.0;
    for _ in 0..draws {
        let (patches, head) = random_draw(&mut rng, n, c)?;
        let analytic = score_jacobian(&patches, &head, tau)?;
        let numeric = finite_difference_jacobian(&patches, &head, tau, GRADCHECK_STEP)?;
        max_rel_error = max_rel_error.max(max_relative_error(&analytic, &numeric));
    }

    let (patches, head) = random_draw(&mut rng, n, c)?;
    let zero = ScoringHead::zeros(c);
    let za = score_jacobian(&patches, &zero, tau)?;
    let zn = finite_difference_jacobian(&patches, &zero, tau, GRADCHECK_STEP)?;
    let zero_weight_max_abs = za.data().iter().chain(zn.data()).map(|v| v.abs()).fold(0.0, f64::max);

    let tau_scaling = (0..4)
        .map(|k| {
            let t = tau * 10f64.powi(k);
            let jac = score_jacobian(&patches, &head, t)?;
            Ok(TauScaling {
                tau: t,
                jacobian_norm: jac.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(GradcheckReport {
        draws,
        tau,
        step: GRADCHECK_STEP,
        max_rel_error,
        zero_weight_max_abs,
        tau_scaling,
        tolerance: GRADCHECK_TOLERANCE,
        passed: max_rel_error <= GRADCHECK_TOLERANCE && zero_weight_max_abs == 0.0,
    })
}

impl PredictionMap {
    /// Reads a gray image as a prediction map (color is averaged).
    pub fn from_image(image: &Image) -> Result<Self> {
        let gray = image.with_channels(1)?;
        Ok(Self {
            height: gray.height,
            width: gray.width,
            values: gray.data,
        })
    }
}

/// Mean absolute error between a prediction and a reference image in [0, 1].
pub fn compute_mae(pred: &PredictionMap, reference: &Image) -> Result<f64> {
    let reference = reference.with_channels(1)?;
    if reference.height != pred.height || reference.width != pred.width {
        return Err(Error::invalid(format!(
            "prediction is {}x{}, reference is {}x{}",
            pred.height, pred.width, reference.height, reference.width
        )));
    }
    let n = pred.values.len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(pred.values.iter().zip(&reference.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64)
}
