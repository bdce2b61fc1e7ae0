//! Video backbone: a small stack of 3D convolutions producing a 4-level
//! feature pyramid at strides {4, 8, 16, 32}.
//!
//! Two stride-2 blocks reach stride 4 (level 0), then one block per extra
//! level. Every block is conv3d 3x3x3 (temporal stride 1, spatial stride 2,
//! "same" temporal padding) with bias, followed by ReLU.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradTape, ParamSet, Parameter, Tensor, Var, he_uniform};

pub const NUM_LEVELS: usize = 4;
pub const STRIDES: [usize; NUM_LEVELS] = [4, 8, 16, 32];

/// Widths per pyramid level, level 0 first.
pub const DEFAULT_WIDTHS: [usize; NUM_LEVELS] = [16, 32, 48, 64];

/// Multi-resolution features of one clip, level 0 (stride 4) first.
/// Level `l` has shape `[C_l, T, H/2^(l+2), W/2^(l+2)]`.
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|v| v.shape()).collect()
    }
}

struct Block {
    w: Parameter,
    b: Parameter,
}

pub struct Backbone {
    blocks: Vec<Block>,
    widths: [usize; NUM_LEVELS],
}

impl Backbone {
    /// Register a fresh backbone. Weights are He-uniform, biases zero.
    pub fn new(widths: [usize; NUM_LEVELS], set: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let chans = [3, widths[0], widths[0], widths[1], widths[2], widths[3]];
        let blocks = (0..5)
            .map(|i| {
                let shape = [chans[i + 1], chans[i], 3, 3, 3];
                Block {
                    w: set.add(format!("backbone.block{i}.w"), he_uniform(rng, &shape)),
                    b: set.add(format!("backbone.block{i}.b"), Tensor::zeros(&[chans[i + 1]])),
                }
            })
            .collect();
        Backbone { blocks, widths }
    }

    pub fn widths(&self) -> [usize; NUM_LEVELS] {
        self.widths
    }

    /// Clip `[3, T, H, W]` with H, W divisible by 32 -> 4-level pyramid.
    pub fn forward(&self, tape: &GradTape, clip: &Var) -> Result<FeaturePyramid> {
        let shape = clip.shape();
        if shape.len() != 4 || shape[0] != 3 {
            return Err(Error::shape(
                "backbone",
                format!("clip must be [3, T, H, W], got {shape:?}"),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(
                "backbone",
                format!("H and W must be divisible by 32, got {h}x{w}"),
            ));
        }
        let mut x = clip.clone();
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for (i, block) in self.blocks.iter().enumerate() {
            let w = tape.param(&block.w);
            let b = tape.param(&block.b);
            x = x.conv3d(&w, Some(&b), (1, 2, 2), (1, 1, 1))?.relu()?;
            if i >= 1 {
                levels.push(x.clone());
            }
        }
        Ok(FeaturePyramid { levels })
    }
}
