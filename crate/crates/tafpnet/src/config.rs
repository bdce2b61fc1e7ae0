//! INI-style run configuration.
//!
//! `[section]` headers group `key = value` lines; `#` and `;` start comments.
//! Every key has a default, so an empty file (or no file) runs the smoke
//! profile. Unknown sections or keys are errors: a typo must not silently
//! fall back to a default.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::scenes::SceneSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    // [model]
    pub d: usize,
    pub num_heads: usize,
    pub k_q: usize,
    pub num_stages: usize,
    pub num_kernel_pairs: usize,
    pub decoder_rounds: usize,
    pub mode: Mode,
    pub widths: [usize; 4],
    // [data]
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_instruments: usize,
    pub num_anatomies: usize,
    pub velocity_lo: f64,
    pub velocity_hi: f64,
    pub blur_strength: f64,
    pub occlusion_bias: f64,
    pub texture_similarity: f64,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    // [train]
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub train_seed: u64,
    // [paths]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 32,
            num_heads: 4,
            k_q: 8,
            num_stages: 2,
            num_kernel_pairs: 3,
            decoder_rounds: 3,
            mode: Mode::TafpNet,
            widths: [16, 32, 48, 64],
            frames: 5,
            height: 64,
            width: 128,
            num_instruments: 1,
            num_anatomies: 2,
            velocity_lo: 1.0,
            velocity_hi: 3.0,
            blur_strength: 1.0,
            occlusion_bias: 0.5,
            texture_similarity: 0.5,
            data_seed: 0,
            n_train: 8,
            n_val: 2,
            iterations: 200,
            batch: 2,
            learning_rate: 1e-4,
            train_seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an unsigned integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an unsigned integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

impl RunConfig {
    /// Parse INI text on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", idx + 1));
            if let Some(inner) = line.strip_prefix('[') {
                let Some(name) = inner.strip_suffix(']') else {
                    return Err(at(format!("malformed section header {line:?}")));
                };
                section = name.trim().to_lowercase();
                if !matches!(section.as_str(), "model" | "data" | "train" | "paths") {
                    return Err(at(format!("unknown section [{section}]")));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(at(format!("expected key = value, got {line:?}")));
            };
            if section.is_empty() {
                return Err(at(format!(
                    "key {:?} appears before any [section] header",
                    key.trim()
                )));
            }
            cfg.assign(&section, key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Apply one `section.key=value` override (the `--set` flag).
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let Some((path, value)) = spec.split_once('=') else {
            return Err(Error::Config(format!(
                "--set expects section.key=value, got {spec:?}"
            )));
        };
        let Some((section, key)) = path.trim().split_once('.') else {
            return Err(Error::Config(format!(
                "--set expects section.key=value, got {spec:?}"
            )));
        };
        self.assign(&section.to_lowercase(), key.trim(), value.trim())
    }

    fn assign(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let key = key.to_lowercase();
        match (section, key.as_str()) {
            ("model", "d") => self.d = parse_usize("model.d", value)?,
            ("model", "num_heads") => self.num_heads = parse_usize("model.num_heads", value)?,
            ("model", "k_q") => self.k_q = parse_usize("model.k_q", value)?,
            ("model", "num_stages") => self.num_stages = parse_usize("model.num_stages", value)?,
            ("model", "num_kernel_pairs") => {
                self.num_kernel_pairs = parse_usize("model.num_kernel_pairs", value)?
            }
            ("model", "decoder_rounds") => {
                self.decoder_rounds = parse_usize("model.decoder_rounds", value)?
            }
            ("model", "mode") => self.mode = Mode::parse(value)?,
            ("model", "widths") => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse_usize("model.widths", p.trim()))
                    .collect::<Result<_>>()?;
                let n = parts.len();
                self.widths = parts.try_into().map_err(|_| {
                    Error::Config(format!("model.widths: expected 4 values, got {n}"))
                })?;
            }
            ("data", "frames") => self.frames = parse_usize("data.frames", value)?,
            ("data", "height") => self.height = parse_usize("data.height", value)?,
            ("data", "width") => self.width = parse_usize("data.width", value)?,
            ("data", "num_instruments") => {
                self.num_instruments = parse_usize("data.num_instruments", value)?
            }
            ("data", "num_anatomies") => {
                self.num_anatomies = parse_usize("data.num_anatomies", value)?
            }
            ("data", "velocity_lo") => self.velocity_lo = parse_f64("data.velocity_lo", value)?,
            ("data", "velocity_hi") => self.velocity_hi = parse_f64("data.velocity_hi", value)?,
            ("data", "blur_strength") => {
                self.blur_strength = parse_f64("data.blur_strength", value)?
            }
            ("data", "occlusion_bias") => {
                self.occlusion_bias = parse_f64("data.occlusion_bias", value)?
            }
            ("data", "texture_similarity") => {
                self.texture_similarity = parse_f64("data.texture_similarity", value)?
            }
            ("data", "seed") => self.data_seed = parse_u64("data.seed", value)?,
            ("data", "n_train") => self.n_train = parse_usize("data.n_train", value)?,
            ("data", "n_val") => self.n_val = parse_usize("data.n_val", value)?,
            ("train", "iterations") => self.iterations = parse_usize("train.iterations", value)?,
            ("train", "batch") => self.batch = parse_usize("train.batch", value)?,
            ("train", "learning_rate") => {
                self.learning_rate = parse_f64("train.learning_rate", value)?
            }
            ("train", "seed") => self.train_seed = parse_u64("train.seed", value)?,
            ("paths", "out_dir") => self.out_dir = PathBuf::from(value),
            _ => {
                return Err(Error::Config(format!("unknown key {section}.{key}")));
            }
        }
        Ok(())
    }

    /// Scene template for dataset generation; per-clip seeds come from the
    /// split derivation, so the template's own seed is the master seed.
    pub fn scene_template(&self) -> SceneSpec {
        SceneSpec {
            seed: self.data_seed,
            frames: self.frames,
            height: self.height,
            width: self.width,
            num_instruments: self.num_instruments,
            num_anatomies: self.num_anatomies,
            velocity_range: (self.velocity_lo, self.velocity_hi),
            blur_strength: self.blur_strength,
            occlusion_bias: self.occlusion_bias,
            texture_similarity: self.texture_similarity,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            widths: self.widths,
            embed_dim: self.d,
            clip_len: self.frames,
            num_queries: self.k_q,
            num_heads: self.num_heads,
            num_stages: self.num_stages,
            num_kernel_pairs: self.num_kernel_pairs,
            decoder_rounds: self.decoder_rounds,
            num_classes: 2,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch,
            learning_rate: self.learning_rate,
            seed: self.train_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_template().validate()?;
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "train.learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}
