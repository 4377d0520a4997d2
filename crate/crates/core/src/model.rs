//! The full parameter set and its mapping to canonical tensor names.
//!
//! | name | shape |
//! |------|-------|
//! | `patch_embed.weight` | `P*P*channels x C` |
//! | `patch_embed.bias` | `C` |
//! | `cls_token` | `C` |
//! | `pos_embed` | `(T+1) x C` |
//! | `blocks.{i}.ln1.gamma`, `.ln1.beta`, `.ln2.gamma`, `.ln2.beta` | `C` |
//! | `blocks.{i}.attn.{q,k,v,out}.weight` | `C x C` |
//! | `blocks.{i}.attn.{q,k,v,out}.bias` | `C` |
//! | `blocks.{i}.mlp.fc1.weight` / `.fc1.bias` | `C x rC` / `rC` |
//! | `blocks.{i}.mlp.fc2.weight` / `.fc2.bias` | `rC x C` / `C` |
//! | `scoring.{s}.weight` / `scoring.{s}.bias` | `C` / `1`, for stages `s = 2..=S` |
//! | `decoder.level{s}.weight` / `.bias` | `C x D` / `D`, for `s = 1..=S` |
//! | `decoder.out.weight` / `decoder.out.bias` | `D` / `1` |
//!
//! Blocks are numbered from 0, stages from 1. Projections are stored
//! input-major so that `y = x W + b`.

use crate::encoder::{EncoderConfig, EncoderWeights, LayerWeights};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_init, Matrix, Rng};
use crate::pruning::ScoringHead;
use crate::refill::DecoderWeights;
use crate::weights::{Tensor, WeightMap};

/// Standard deviation of the fallback Gaussian initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// A fully resolved model: encoder, one scoring head per boundary and the
/// pyramid decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CatpModel {
    pub config: EncoderConfig,
    pub encoder: EncoderWeights,
    /// `heads[i]` scores the tokens entering stage `i + 2`.
    pub heads: Vec<ScoringHead>,
    pub decoder: DecoderWeights,
}

struct Resolver<'a> {
    map: &'a WeightMap,
    seed: u64,
    missing: Vec<String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

impl Resolver<'_> {
    fn tensor(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Vec<f64>> {
        if let Some(t) = self.map.get(name) {
            let same = t.dims == dims || (t.data.len() == dims.iter().product::<usize>() && dims.len() == 1 && t.dims.len() <= 1);
            if !same {
                return Err(Error::WeightFormat(format!(
                    "tensor {name} has dims {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            return Ok(t.to_f64());
        }
        self.missing.push(name.to_owned());
        let n: usize = dims.iter().product();
        Ok(match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal => {
                let mut rng = Rng::new(self.seed ^ fnv1a(name.as_bytes()));
                gaussian_init(&mut rng, 1, n, INIT_STD)?.into_data()
            }
        })
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<Matrix> {
        Matrix::new(rows, cols, self.tensor(name, &[rows, cols], init)?)
    }
}

impl CatpModel {
    /// Resolves every canonical tensor from `map`; absent tensors get a
    /// deterministic per-name initialization derived from `seed` (Gaussian
    /// with std 0.02 for projections, embeddings and scoring heads, ones for
    /// layer-norm gains, zeros for biases).
    pub fn from_weight_map(config: &EncoderConfig, map: &WeightMap, seed: u64) -> Result<Self> {
        config.validate()?;
        let known = canonical_names(config);
        for name in map.keys() {
            if !known.contains(name) {
                log::warn!("ignoring unknown tensor {name}");
            }
        }
        let mut r = Resolver {
            map,
            seed,
            missing: Vec::new(),
        };
        let c = config.embed_dim;
        let hidden = config.mlp_hidden();
        let t = config.num_patches();
        let d = config.decoder_dim();

        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("blocks.{i}");
            layers.push(LayerWeights {
                ln1_gamma: r.tensor(&format!("{p}.ln1.gamma"), &[c], Init::Ones)?,
                ln1_beta: r.tensor(&format!("{p}.ln1.beta"), &[c], Init::Zeros)?,
                wq: r.matrix(&format!("{p}.attn.q.weight"), c, c, Init::Normal)?,
                bq: r.tensor(&format!("{p}.attn.q.bias"), &[c], Init::Zeros)?,
                wk: r.matrix(&format!("{p}.attn.k.weight"), c, c, Init::Normal)?,
                bk: r.tensor(&format!("{p}.attn.k.bias"), &[c], Init::Zeros)?,
                wv: r.matrix(&format!("{p}.attn.v.weight"), c, c, Init::Normal)?,
                bv: r.tensor(&format!("{p}.attn.v.bias"), &[c], Init::Zeros)?,
                wo: r.matrix(&format!("{p}.attn.out.weight"), c, c, Init::Normal)?,
                bo: r.tensor(&format!("{p}.attn.out.bias"), &[c], Init::Zeros)?,
                ln2_gamma: r.tensor(&format!("{p}.ln2.gamma"), &[c], Init::Ones)?,
                ln2_beta: r.tensor(&format!("{p}.ln2.beta"), &[c], Init::Zeros)?,
                w1: r.matrix(&format!("{p}.mlp.fc1.weight"), c, hidden, Init::Normal)?,
                b1: r.tensor(&format!("{p}.mlp.fc1.bias"), &[hidden], Init::Zeros)?,
                w2: r.matrix(&format!("{p}.mlp.fc2.weight"), hidden, c, Init::Normal)?,
                b2: r.tensor(&format!("{p}.mlp.fc2.bias"), &[c], Init::Zeros)?,
            });
        }
        let encoder = EncoderWeights {
            patch_proj: r.matrix("patch_embed.weight", config.patch_dim(), c, Init::Normal)?,
            patch_bias: r.tensor("patch_embed.bias", &[c], Init::Zeros)?,
            cls: r.tensor("cls_token", &[c], Init::Normal)?,
            pos_embed: r.matrix("pos_embed", t + 1, c, Init::Normal)?,
            layers,
        };
        let heads = (2..=config.num_stages())
            .map(|s| {
                Ok(ScoringHead {
                    weight: r.tensor(&format!("scoring.{s}.weight"), &[c], Init::Normal)?,
                    bias: r.tensor(&format!("scoring.{s}.bias"), &[1], Init::Zeros)?[0],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let level_proj = (1..=config.num_stages())
            .map(|s| {
                Ok((
                    r.matrix(&format!("decoder.level{s}.weight"), c, d, Init::Normal)?,
                    r.tensor(&format!("decoder.level{s}.bias"), &[d], Init::Zeros)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = DecoderWeights {
            level_proj,
            out_weight: r.tensor("decoder.out.weight", &[d], Init::Normal)?,
            out_bias: r.tensor("decoder.out.bias", &[1], Init::Zeros)?[0],
        };
        if !r.missing.is_empty() {
            log::info!(
                "{} of {} tensors not in weight file, initialized from seed {seed}",
                r.missing.len(),
                known.len()
            );
            for name in &r.missing {
                log::debug!("initialized {name}");
            }
        }
        Ok(Self {
            config: config.clone(),
            encoder,
            heads,
            decoder,
        })
    }

    /// Every tensor drawn from the seed.
    pub fn random(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Self::from_weight_map(config, &WeightMap::new(), seed)
    }

    /// All parameters under their canonical names, as `f32`.
    pub fn to_weight_map(&self) -> Result<WeightMap> {
        let mut map = WeightMap::new();
        let put_m = |map: &mut WeightMap, name: String, m: &Matrix| -> Result<()> {
            map.insert(name, Tensor::from_f64(vec![m.rows(), m.cols()], m.data())?);
            Ok(())
        };
        let put_v = |map: &mut WeightMap, name: String, v: &[f64]| -> Result<()> {
            map.insert(name, Tensor::from_f64(vec![v.len()], v)?);
            Ok(())
        };
        let e = &self.encoder;
        put_m(&mut map, "patch_embed.weight".into(), &e.patch_proj)?;
        put_v(&mut map, "patch_embed.bias".into(), &e.patch_bias)?;
        put_v(&mut map, "cls_token".into(), &e.cls)?;
        put_m(&mut map, "pos_embed".into(), &e.pos_embed)?;
        for (i, l) in e.layers.iter().enumerate() {
            let p = format!("blocks.{i}");
            put_v(&mut map, format!("{p}.ln1.gamma"), &l.ln1_gamma)?;
            put_v(&mut map, format!("{p}.ln1.beta"), &l.ln1_beta)?;
            put_v(&mut map, format!("{p}.ln2.gamma"), &l.ln2_gamma)?;
            put_v(&mut map, format!("{p}.ln2.beta"), &l.ln2_beta)?;
            for (n, w, b) in [("q", &l.wq, &l.bq), ("k", &l.wk, &l.bk), ("v", &l.wv, &l.bv), ("out", &l.wo, &l.bo)] {
                put_m(&mut map, format!("{p}.attn.{n}.weight"), w)?;
                put_v(&mut map, format!("{p}.attn.{n}.bias"), b)?;
            }
            put_m(&mut map, format!("{p}.mlp.fc1.weight"), &l.w1)?;
            put_v(&mut map, format!("{p}.mlp.fc1.bias"), &l.b1)?;
            put_m(&mut map, format!("{p}.mlp.fc2.weight"), &l.w2)?;
            put_v(&mut map, format!("{p}.mlp.fc2.bias"), &l.b2)?;
        }
        for (i, h) in self.heads.iter().enumerate() {
            put_v(&mut map, format!("scoring.{}.weight", i + 2), &h.weight)?;
            put_v(&mut map, format!("scoring.{}.bias", i + 2), &[h.bias])?;
        }
        for (i, (w, b)) in self.decoder.level_proj.iter().enumerate() {
            put_m(&mut map, format!("decoder.level{}.weight", i + 1), w)?;
            put_v(&mut map, format!("decoder.level{}.bias", i + 1), b)?;
        }
        put_v(&mut map, "decoder.out.weight".into(), &self.decoder.out_weight)?;
        put_v(&mut map, "decoder.out.bias".into(), &[self.decoder.out_bias])?;
        Ok(map)
    }
}

/// Canonical names expected for `config`, sorted.
pub fn canonical_names(config: &EncoderConfig) -> std::collections::BTreeSet<String> {
    let mut names: std::collections::BTreeSet<String> =
        ["patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed", "decoder.out.weight", "decoder.out.bias"]
            .into_iter()
            .map(String::from)
            .collect();
    for i in 0..config.num_layers {
        for suffix in [
            "ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta", "attn.q.weight", "attn.q.bias", "attn.k.weight",
            "attn.k.bias", "attn.v.weight", "attn.v.bias", "attn.out.weight", "attn.out.bias", "mlp.fc1.weight",
            "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias",
        ] {
            names.insert(format!("blocks.{i}.{suffix}"));
        }
    }
    for s in 2..=config.num_stages() {
        names.insert(format!("scoring.{s}.weight"));
        names.insert(format!("scoring.{s}.bias"));
    }
    for s in 1..=config.num_stages() {
        names.insert(format!("decoder.level{s}.weight"));
        names.insert(format!("decoder.level{s}.bias"));
    }
    names
}
