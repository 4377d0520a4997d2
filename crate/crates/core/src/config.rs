//! `key = value` run configuration.
//!
//! Blank lines are ignored and `#` starts a comment. Recognized keys:
//!
//! ```text
//! image_h, image_w, channels, patch_size, embed_dim, num_layers, num_heads,
//! mlp_ratio, stage_boundaries (comma separated), theta_d, theta_u, tau,
//! compensation (none | average | weighted), seed, weights_path, output_dir
//! ```
//!
//! Anything not set keeps the desk-scale default.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::compensation::CompensationMode;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pruning::PruneThresholds;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub thresholds: PruneThresholds,
    pub compensation: CompensationMode,
    pub seed: u64,
    #[serde(skip)]
    pub weights_path: Option<PathBuf>,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            thresholds: PruneThresholds::default(),
            compensation: CompensationMode::Weighted,
            seed: DEFAULT_SEED,
            weights_path: None,
            output_dir: PathBuf::from("."),
        }
    }
}

const ENCODER_KEYS: &[&str] = &[
    "image_h",
    "image_w",
    "channels",
    "patch_size",
    "embed_dim",
    "num_layers",
    "num_heads",
    "mlp_ratio",
    "stage_boundaries",
];

fn parse_num<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("{key}: cannot parse {value:?}"),
    })
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: HashMap<&'static str, usize> = HashMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected `key = value`, got {content:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let e = &mut cfg.encoder;
        let canonical: &'static str = match key {
            "image_h" => {
                e.image_h = parse_num(value, line, key)?;
                "image_h"
            }
            "image_w" => {
                e.image_w = parse_num(value, line, key)?;
                "image_w"
            }
            "channels" => {
                e.channels = parse_num(value, line, key)?;
                "channels"
            }
            "patch_size" => {
                e.patch_size = parse_num(value, line, key)?;
                "patch_size"
            }
            "embed_dim" => {
                e.embed_dim = parse_num(value, line, key)?;
                "embed_dim"
            }
            "num_layers" => {
                e.num_layers = parse_num(value, line, key)?;
                "num_layers"
            }
            "num_heads" => {
                e.num_heads = parse_num(value, line, key)?;
                "num_heads"
            }
            "mlp_ratio" => {
                e.mlp_ratio = parse_num(value, line, key)?;
                "mlp_ratio"
            }
            "stage_boundaries" => {
                e.stage_boundaries = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(s, line, key))
                    .collect::<Result<_>>()?;
                "stage_boundaries"
            }
            "theta_d" => {
                cfg.thresholds.theta_d = parse_num(value, line, key)?;
                "theta_d"
            }
            "theta_u" => {
                cfg.thresholds.theta_u = parse_num(value, line, key)?;
                "theta_u"
            }
            "tau" => {
                cfg.thresholds.tau = parse_num(value, line, key)?;
                "tau"
            }
            "compensation" => {
                cfg.compensation = value.parse().map_err(|e: Error| Error::Config {
                    line,
                    message: e.to_string(),
                })?;
                "compensation"
            }
            "seed" => {
                cfg.seed = parse_num(value, line, key)?;
                "seed"
            }
            "weights_path" => {
                cfg.weights_path = Some(PathBuf::from(value));
                "weights_path"
            }
            "output_dir" => {
                cfg.output_dir = PathBuf::from(value);
                "output_dir"
            }
            other => {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key {other:?}"),
                })
            }
        };
        if let Some(prev) = seen.insert(canonical, line) {
            return Err(Error::Config {
                line,
                message: format!("{key} already set on line {prev}"),
            });
        }
    }

    let last_line_of = |keys: &[&str]| keys.iter().filter_map(|k| seen.get(k)).copied().max().unwrap_or(0);
    cfg.thresholds.validate().map_err(|e| Error::Config {
        line: last_line_of(&["theta_d", "theta_u", "tau"]),
        message: e.to_string(),
    })?;
    cfg.encoder.validate().map_err(|e| Error::Config {
        line: last_line_of(ENCODER_KEYS),
        message: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
