//! The full segmentation model: a dual-pathway stage stack over the feature
//! pyramid (transformer pathway at the stride-16 working level, convolution
//! pathway over all levels) plus a query decoder producing per-query class
//! logits and stride-4 mask logits.
//!
//! Three ablation rungs share this code path: `BaseNet` skips the stage loop
//! entirely (decoder on the raw compressed pyramid), `AfpNet` runs stages
//! with the transformer pathway disabled, `TafpNet` runs both pathways.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aafp::Aafp;
use crate::backbone::{Backbone, FeaturePyramid, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::tensor::{GradTape, ParamSet, Parameter, Tensor, Var, xavier_uniform};
use crate::tqp::{Tqp, cell_rows, multi_head_attention};

/// Pyramid level the transformer pathway operates on (stride 16).
pub const WORKING_LEVEL: usize = 2;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    BaseNet,
    AfpNet,
    TafpNet,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "basenet" => Ok(Mode::BaseNet),
            "afpnet" => Ok(Mode::AfpNet),
            "tafpnet" => Ok(Mode::TafpNet),
            other => Err(Error::Config(format!(
                "unknown ablation mode {other:?} (expected basenet | afpnet | tafpnet)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::BaseNet => "basenet",
            Mode::AfpNet => "afpnet",
            Mode::TafpNet => "tafpnet",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Pyramid channel widths per level (strides 4, 8, 16, 32).
    pub widths: [usize; 4],
    /// Shared embedding width d of the transformer pathway.
    pub embed_dim: usize,
    /// Clip length T (odd).
    pub clip_len: usize,
    /// Number of object queries K_q.
    pub num_queries: usize,
    pub num_heads: usize,
    /// Fusion stage count M.
    pub num_stages: usize,
    /// How many (dense, strip) kernel-size pairs each enhancement bank uses.
    pub num_kernel_pairs: usize,
    pub decoder_rounds: usize,
    /// Foreground classes; the class head adds one no-object slot.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [16, 32, 48, 64],
            embed_dim: 32,
            clip_len: 5,
            num_queries: 8,
            num_heads: 4,
            num_stages: 2,
            num_kernel_pairs: 3,
            decoder_rounds: 3,
            num_classes: 2,
        }
    }
}

struct DecoderRound {
    self_q: Parameter,
    self_k: Parameter,
    self_v: Parameter,
    cross_q: Parameter,
    cross_k: Parameter,
    cross_v: Parameter,
}

pub struct Decoder {
    /// Learned query seeds `[K_q, d]`.
    pub query_embed: Parameter,
    rounds: Vec<DecoderRound>,
    /// Pointwise projection of the stride-4 pyramid level to d channels.
    pub pixel_proj: Parameter,
    /// `[d, d]` map from refined queries to mask embeddings.
    pub mask_embed: Parameter,
    pub class_w: Parameter,
    pub class_b: Parameter,
}

impl Decoder {
    fn new(cfg: &ModelConfig, set: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let rounds = (0..cfg.decoder_rounds)
            .map(|r| {
                let mut mk =
                    |name: &str| set.add(format!("decoder.round{r}.{name}"), xavier_uniform(rng, &[d, d]));
                DecoderRound {
                    self_q: mk("self.w_q"),
                    self_k: mk("self.w_k"),
                    self_v: mk("self.w_v"),
                    cross_q: mk("cross.w_q"),
                    cross_k: mk("cross.w_k"),
                    cross_v: mk("cross.w_v"),
                }
            })
            .collect();
        Decoder {
            query_embed: set.add("decoder.query_embed", xavier_uniform(rng, &[cfg.num_queries, d])),
            rounds,
            pixel_proj: set.add(
                "decoder.pixel_proj",
                xavier_uniform(rng, &[d, cfg.widths[0], 1, 1, 1]),
            ),
            mask_embed: set.add("decoder.mask_embed", xavier_uniform(rng, &[d, d])),
            class_w: set.add(
                "decoder.class.w",
                xavier_uniform(rng, &[cfg.num_classes + 1, d]),
            ),
            class_b: set.add("decoder.class.b", Tensor::zeros(&[cfg.num_classes + 1])),
        }
    }
}

/// One fusion stage: per-level perception banks plus (in TAFPNet) a TQP.
struct Stage {
    aafp: Vec<Aafp>,
    tqp: Option<Tqp>,
}

/// Both pathway states at a stage boundary.
pub struct StageState {
    /// `[d, T, H', W']` transformer-pathway embedding at the working level.
    pub embedding: Var,
    pub pyramid: FeaturePyramid,
}

pub struct Prediction {
    /// `[K_q, num_classes+1]`, last column is no-object.
    pub class_logits: Var,
    /// `[K_q, T, H/4, W/4]`.
    pub mask_logits: Var,
}

/// Forward pass results plus the intermediates the inspection tooling dumps.
pub struct Forward {
    pub prediction: Prediction,
    pub state: StageState,
    /// Flat cell indices selected by the last stage's TQP, if any ran.
    pub query_indices: Option<Vec<usize>>,
    /// Last stage's per-level attention maps (detached), if any stage ran.
    pub attention_maps: Vec<Tensor>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub mode: Mode,
    pub backbone: Backbone,
    /// Per-level `[d, C_l, 1, 1, 1]` projections, shared across stages.
    compress: Vec<Parameter>,
    /// Per-level `[C_l, d, 1, 1, 1]` back-projections; absent in BaseNet.
    decompress: Option<Vec<Parameter>>,
    stages: Vec<Stage>,
    pub decoder: Decoder,
    params: ParamSet,
}

impl Model {
    pub fn new(cfg: ModelConfig, mode: Mode, seed: u64) -> Result<Model> {
        if cfg.clip_len % 2 == 0 {
            return Err(Error::Config(format!(
                "clip length must be odd, got {}",
                cfg.clip_len
            )));
        }
        if cfg.embed_dim % cfg.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                cfg.embed_dim, cfg.num_heads
            )));
        }
        if cfg.num_kernel_pairs == 0 || cfg.num_kernel_pairs > crate::aafp::DEFAULT_PAIRS.len() {
            return Err(Error::Config(format!(
                "num_kernel_pairs must lie in 1..={}, got {}",
                crate::aafp::DEFAULT_PAIRS.len(),
                cfg.num_kernel_pairs
            )));
        }
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(cfg.widths, &mut set, &mut rng);
        let compress = (0..NUM_LEVELS)
            .map(|l| {
                set.add(
                    format!("compress.level{l}"),
                    xavier_uniform(&mut rng, &[cfg.embed_dim, cfg.widths[l], 1, 1, 1]),
                )
            })
            .collect();
        let num_stages = if mode == Mode::BaseNet { 0 } else { cfg.num_stages };
        let decompress = (num_stages > 0).then(|| {
            (0..NUM_LEVELS)
                .map(|l| {
                    set.add(
                        format!("decompress.level{l}"),
                        xavier_uniform(&mut rng, &[cfg.widths[l], cfg.embed_dim, 1, 1, 1]),
                    )
                })
                .collect()
        });
        let stages = (0..num_stages)
            .map(|s| {
                let aafp = (0..NUM_LEVELS)
                    .map(|l| {
                        Aafp::with_pairs(
                            &format!("stage{s}.level{l}"),
                            cfg.widths[l],
                            cfg.clip_len,
                            &crate::aafp::DEFAULT_PAIRS[..cfg.num_kernel_pairs],
                            &mut set,
                            &mut rng,
                        )
                    })
                    .collect();
                let tqp = (mode == Mode::TafpNet)
                    .then(|| {
                        Tqp::new(
                            &format!("stage{s}.tqp"),
                            cfg.embed_dim,
                            cfg.num_queries,
                            cfg.num_heads,
                            &mut set,
                            &mut rng,
                        )
                    })
                    .transpose()?;
                Ok(Stage { aafp, tqp })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&cfg, &mut set, &mut rng);
        Ok(Model { cfg, mode, backbone, compress, decompress, stages, decoder, params: set })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Project every level to d channels, resample to the working level's
    /// spatial size, and sum.
    pub fn compress_pyramid(&self, tape: &GradTape, pyramid: &FeaturePyramid) -> Result<Var> {
        let wshape = pyramid.levels[WORKING_LEVEL].shape();
        let (h, w) = (wshape[2], wshape[3]);
        let mut sum: Option<Var> = None;
        for (level, proj) in pyramid.levels.iter().zip(&self.compress) {
            let projected = level.conv3d(&tape.param(proj), None, (1, 1, 1), (0, 0, 0))?;
            let resampled = resample_nearest(&projected, h, w)?;
            sum = Some(match sum {
                None => resampled,
                Some(acc) => acc.add(&resampled)?,
            });
        }
        sum.ok_or_else(|| Error::shape("compress_pyramid", "empty pyramid"))
    }

    /// Back-project the working-level embedding to every level's channel
    /// width and spatial size.
    fn decompress_to_levels(&self, tape: &GradTape, embedding: &Var) -> Result<Vec<Var>> {
        let projs = self
            .decompress
            .as_ref()
            .expect("decompress projections exist whenever stages run");
        let mut out = Vec::with_capacity(NUM_LEVELS);
        for proj in projs {
            let projected = embedding.conv3d(&tape.param(proj), None, (1, 1, 1), (0, 0, 0))?;
            out.push(projected);
        }
        Ok(out)
    }

    /// One fusion stage. The transformer pathway refines the embedding via
    /// TQP (when enabled); the convolution pathway runs the perception banks
    /// over the pyramid and compresses their maps. The pathways cross-add:
    /// the new embedding is t_out + c_out, and each pyramid level is
    /// refreshed with its attention map plus the back-projected embedding.
    pub fn run_stage(
        &self,
        tape: &GradTape,
        stage_index: usize,
        state: &StageState,
    ) -> Result<(StageState, StageArtifacts)> {
        let stage = &self.stages[stage_index];
        let mut attention_maps = Vec::with_capacity(NUM_LEVELS);
        let mut enhanced = Vec::with_capacity(NUM_LEVELS);
        for (aafp, level) in stage.aafp.iter().zip(&state.pyramid.levels) {
            let e = aafp.forward(tape, level)?;
            attention_maps.push(e.value());
            enhanced.push(e);
        }
        let enhanced = FeaturePyramid { levels: enhanced };
        let c_out = self.compress_pyramid(tape, &enhanced)?;

        let (embedding, query_indices) = match &stage.tqp {
            Some(tqp) => {
                let out = tqp.forward(tape, &state.embedding)?;
                (out.expanded.add(&c_out)?, Some(out.queries.indices))
            }
            None => (c_out, None),
        };

        let decompressed = self.decompress_to_levels(tape, &embedding)?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for ((old, e_map), back) in state
            .pyramid
            .levels
            .iter()
            .zip(&enhanced.levels)
            .zip(&decompressed)
        {
            let shape = old.shape();
            let resampled = resample_nearest(back, shape[2], shape[3])?;
            levels.push(old.add(e_map)?.add(&resampled)?);
        }
        let next = StageState { embedding, pyramid: FeaturePyramid { levels } };
        Ok((next, StageArtifacts { query_indices, attention_maps }))
    }

    /// Decoder: rounds of query self-attention and cross-attention to the
    /// fused embedding's cells, then class and mask heads. Mask logits are
    /// per-query dot products with stride-4 pixel embeddings.
    pub fn decode_masks(&self, tape: &GradTape, state: &StageState) -> Result<Prediction> {
        let cells = cell_rows(&state.embedding)?;
        let mut q = tape.param(&self.decoder.query_embed);
        for round in &self.decoder.rounds {
            let sq = q.linear(&tape.param(&round.self_q), None)?;
            let sk = q.linear(&tape.param(&round.self_k), None)?;
            let sv = q.linear(&tape.param(&round.self_v), None)?;
            q = q.add(&multi_head_attention(&sq, &sk, &sv, self.cfg.num_heads)?)?;
            let cq = q.linear(&tape.param(&round.cross_q), None)?;
            let ck = cells.linear(&tape.param(&round.cross_k), None)?;
            let cv = cells.linear(&tape.param(&round.cross_v), None)?;
            q = q.add(&multi_head_attention(&cq, &ck, &cv, self.cfg.num_heads)?)?;
        }
        let class_logits = q.linear(
            &tape.param(&self.decoder.class_w),
            Some(&tape.param(&self.decoder.class_b)),
        )?;
        let pix = state.pyramid.levels[0].conv3d(
            &tape.param(&self.decoder.pixel_proj),
            None,
            (1, 1, 1),
            (0, 0, 0),
        )?;
        let pshape = pix.shape();
        let pixel_cells = cell_rows(&pix)?;
        let mask_embed = q.linear(&tape.param(&self.decoder.mask_embed), None)?;
        let mask_logits = mask_embed
            .matmul(&pixel_cells.transpose2d()?)?
            .reshape(&[self.cfg.num_queries, pshape[1], pshape[2], pshape[3]])?;
        Ok(Prediction { class_logits, mask_logits })
    }

    /// Backbone, initial compression, M stages, decoder.
    pub fn forward(&self, tape: &GradTape, clip: &Tensor) -> Result<Forward> {
        if clip.rank() == 4 && clip.shape()[1] != self.cfg.clip_len {
            return Err(Error::AxisMismatch {
                op: "model_forward",
                axis: "T",
                expected: self.cfg.clip_len,
                got: clip.shape()[1],
            });
        }
        let clip = tape.constant(clip.clone());
        let pyramid = self.backbone.forward(tape, &clip)?;
        let embedding = self.compress_pyramid(tape, &pyramid)?;
        let mut state = StageState { embedding, pyramid };
        let mut query_indices = None;
        let mut attention_maps = Vec::new();
        for s in 0..self.stages.len() {
            let (next, artifacts) = self.run_stage(tape, s, &state)?;
            state = next;
            if artifacts.query_indices.is_some() {
                query_indices = artifacts.query_indices;
            }
            attention_maps = artifacts.attention_maps;
        }
        let prediction = self.decode_masks(tape, &state)?;
        Ok(Forward { prediction, state, query_indices, attention_maps })
    }
}

pub struct StageArtifacts {
    pub query_indices: Option<Vec<usize>>,
    pub attention_maps: Vec<Tensor>,
}

/// Nearest-neighbor spatial resample of a `[C, T, h, w]` map to `(new_h,
/// new_w)`, differentiable (backward scatter-adds into source cells).
/// Source index = floor(dst_index * src_extent / dst_extent).
pub fn resample_nearest(x: &Var, new_h: usize, new_w: usize) -> Result<Var> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "resample_nearest",
            format!("expected rank-4 input, got {shape:?}"),
        ));
    }
    let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h == new_h && w == new_w {
        return Ok(x.clone());
    }
    // Width: view as [c*t*h, w], move columns to rows, gather, restore.
    let mut out = x.reshape(&[c * t * h, w])?;
    if w != new_w {
        let cols: Vec<usize> = (0..new_w).map(|ox| ox * w / new_w).collect();
        out = out.transpose2d()?.gather_rows(&cols)?.transpose2d()?;
    }
    // Height: rows are (c, t, y) triples; remap y within each (c, t) block.
    if h != new_h {
        let mut rows = Vec::with_capacity(c * t * new_h);
        for ct in 0..c * t {
            for oy in 0..new_h {
                rows.push(ct * h + oy * h / new_h);
            }
        }
        out = out.gather_rows(&rows)?;
    }
    out.reshape(&[c, t, new_h, new_w])
}
