//! Anatomy-aware asymmetric feature pyramid: a full-clip temporal stem, a
//! symmetric dense branch tuned to irregular polygon anatomy, an asymmetric
//! strip-pair branch tuned to elongated instruments, and a gated aggregation
//! that combines them into an attention map per pyramid level.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradTape, ParamSet, Parameter, Var, he_uniform};

/// (spatial size, temporal extent) of each kernel pair.
pub const DEFAULT_PAIRS: [(usize, usize); 3] = [(3, 1), (5, 3), (7, 5)];

/// Dense k×k×t kernels, or vertical/horizontal strip pairs (k×1×t, 1×k×t).
pub enum Branch {
    Anatomy(Vec<Parameter>),
    Instrument(Vec<(Parameter, Parameter)>),
}

/// One perception block: temporal stem, branch kernels, aggregation conv.
/// All convs are bias-free and shape-preserving under zero "same" padding.
pub struct KernelBank {
    pub pairs: Vec<(usize, usize)>,
    /// `[C, C, T, 5, 5]` full-clip temporal aggregation stem.
    pub stem: Parameter,
    /// `[C, C, T, 1, 1]` pointwise-in-space aggregation conv.
    pub agg: Parameter,
    pub branch: Branch,
}

impl KernelBank {
    pub fn anatomy(
        prefix: &str,
        channels: usize,
        clip_len: usize,
        pairs: &[(usize, usize)],
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kernels = pairs
            .iter()
            .enumerate()
            .map(|(m, &(k, t))| {
                set.add(
                    format!("{prefix}.pair{m}"),
                    he_uniform(rng, &[channels, channels, t, k, k]),
                )
            })
            .collect();
        KernelBank::with_branch(prefix, channels, clip_len, pairs, Branch::Anatomy(kernels), set, rng)
    }

    pub fn instrument(
        prefix: &str,
        channels: usize,
        clip_len: usize,
        pairs: &[(usize, usize)],
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kernels = pairs
            .iter()
            .enumerate()
            .map(|(m, &(k, t))| {
                let v = set.add(
                    format!("{prefix}.pair{m}.v"),
                    he_uniform(rng, &[channels, channels, t, k, 1]),
                );
                let h = set.add(
                    format!("{prefix}.pair{m}.h"),
                    he_uniform(rng, &[channels, channels, t, 1, k]),
                );
                (v, h)
            })
            .collect();
        KernelBank::with_branch(
            prefix,
            channels,
            clip_len,
            pairs,
            Branch::Instrument(kernels),
            set,
            rng,
        )
    }

    fn with_branch(
        prefix: &str,
        channels: usize,
        clip_len: usize,
        pairs: &[(usize, usize)],
        branch: Branch,
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem = set.add(
            format!("{prefix}.stem"),
            he_uniform(rng, &[channels, channels, clip_len, 5, 5]),
        );
        let agg = set.add(
            format!("{prefix}.agg"),
            he_uniform(rng, &[channels, channels, clip_len, 1, 1]),
        );
        KernelBank { pairs: pairs.to_vec(), stem, agg, branch }
    }

    /// Full-clip 5×5×T conv producing the aggregating map F_temp.
    pub fn temporal_aggregate(&self, tape: &GradTape, level: &Var) -> Result<Var> {
        let want_t = self.stem.shape()[2];
        let got_t = level.shape()[1];
        if want_t != got_t {
            return Err(Error::AxisMismatch {
                op: "temporal_aggregate",
                axis: "T",
                expected: want_t,
                got: got_t,
            });
        }
        level.conv3d_same(&tape.param(&self.stem), None)
    }

    /// One shape-preserving conv output per kernel pair. Dense kernels for
    /// the anatomy branch; summed vertical+horizontal strips for instruments.
    pub fn branch_outputs(&self, tape: &GradTape, f_temp: &Var) -> Result<Vec<Var>> {
        match &self.branch {
            Branch::Anatomy(kernels) => kernels
                .iter()
                .map(|k| f_temp.conv3d_same(&tape.param(k), None))
                .collect(),
            Branch::Instrument(kernels) => kernels
                .iter()
                .map(|(v, h)| {
                    let vert = f_temp.conv3d_same(&tape.param(v), None)?;
                    let horiz = f_temp.conv3d_same(&tape.param(h), None)?;
                    vert.add(&horiz)
                })
                .collect(),
        }
    }

    /// E_temp = Conv_{1×1×T}(Σ_m F^P_m + F_temp) ⊙ F_temp.
    pub fn aggregate(&self, tape: &GradTape, outputs: &[Var], f_temp: &Var) -> Result<Var> {
        let mut sum = f_temp.clone();
        for o in outputs {
            sum = sum.add(o)?;
        }
        let gate = sum.conv3d_same(&tape.param(&self.agg), None)?;
        gate.mul(f_temp)
    }

    /// Stem, branch, and gated aggregation in one pass.
    pub fn forward(&self, tape: &GradTape, level: &Var) -> Result<Var> {
        let f_temp = self.temporal_aggregate(tape, level)?;
        let outputs = self.branch_outputs(tape, &f_temp)?;
        self.aggregate(tape, &outputs, &f_temp)
    }
}

/// Anatomy and instrument perception blocks over one pyramid level.
pub struct Aafp {
    pub anatomy: KernelBank,
    pub instrument: KernelBank,
}

impl Aafp {
    pub fn new(
        prefix: &str,
        channels: usize,
        clip_len: usize,
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_pairs(prefix, channels, clip_len, &DEFAULT_PAIRS, set, rng)
    }

    pub fn with_pairs(
        prefix: &str,
        channels: usize,
        clip_len: usize,
        pairs: &[(usize, usize)],
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Aafp {
            anatomy: KernelBank::anatomy(
                &format!("{prefix}.anatomy"),
                channels,
                clip_len,
                pairs,
                set,
                rng,
            ),
            instrument: KernelBank::instrument(
                &format!("{prefix}.instrument"),
                channels,
                clip_len,
                pairs,
                set,
                rng,
            ),
        }
    }

    /// Sum of the two blocks' attention maps; shape equals the input level.
    pub fn forward(&self, tape: &GradTape, level: &Var) -> Result<Var> {
        let e_anatomy = self.anatomy.forward(tape, level)?;
        let e_instrument = self.instrument.forward(tape, level)?;
        e_anatomy.add(&e_instrument)
    }
}
