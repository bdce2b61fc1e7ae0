//! Set-prediction losses: soft dice + BCE on matched masks, cross-entropy on
//! classes with a down-weighted no-object slot. Ground truth is supervised at
//! the mask head's stride; full-resolution masks are reduced by majority vote.

use crate::error::{Error, Result};
use crate::matching::MatchResult;
use crate::model::Prediction;
use crate::tensor::{GradTape, Tensor, Var, cross_entropy_rows};

/// Weight of the no-object class in the classification term.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;
/// Numerator/denominator smoothing of the soft dice ratio.
pub const DICE_EPS: f64 = 1.0;

/// One annotated instance at full resolution.
#[derive(Clone, Debug)]
pub struct GroundTruthInstance {
    pub class_id: usize,
    /// Binary `[T, H, W]`.
    pub mask: Tensor,
}

/// Instance with its mask reduced to the supervision stride.
#[derive(Clone, Debug)]
pub struct PreparedGt {
    pub class_id: usize,
    /// Binary `[T, H/s, W/s]`.
    pub mask: Tensor,
}

/// Majority-vote block reduction of a binary `[T, H, W]` mask by `factor`
/// along both spatial axes. A block maps to 1 iff strictly more than half of
/// its cells are 1 (ties go to background).
pub fn downsample_majority(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let shape = mask.shape();
    if shape.len() != 3 {
        return Err(Error::shape(
            "downsample_majority",
            format!("expected [T, H, W], got {shape:?}"),
        ));
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "downsample_majority",
            format!("spatial extents {h}x{w} not divisible by {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[t, oh, ow]);
    let half = (factor * factor) as f64 / 2.0;
    for ft in 0..t {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut ones = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        ones += mask.at(&[ft, oy * factor + dy, ox * factor + dx]);
                    }
                }
                if ones > half {
                    out.set(&[ft, oy, ox], 1.0);
                }
            }
        }
    }
    Ok(out)
}

pub fn prepare_targets(gts: &[GroundTruthInstance], factor: usize) -> Result<Vec<PreparedGt>> {
    gts.iter()
        .map(|g| {
            Ok(PreparedGt {
                class_id: g.class_id,
                mask: downsample_majority(&g.mask, factor)?,
            })
        })
        .collect()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft dice between a probability map and a binary mask, both flat:
/// (2·Σ p·g + ε) / (Σ p + Σ g + ε).
pub fn soft_dice_value(probs: &[f64], gt: &[f64]) -> f64 {
    debug_assert_eq!(probs.len(), gt.len());
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (p, g) in probs.iter().zip(gt) {
        inter += p * g;
        psum += p;
        gsum += g;
    }
    (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS)
}

/// Mean binary cross-entropy from logits, numerically stable:
/// mean of g·softplus(−l) + (1−g)·softplus(l).
pub fn bce_mean_value(logits: &[f64], gt: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), gt.len());
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let total: f64 = logits
        .iter()
        .zip(gt)
        .map(|(&l, &g)| g * softplus(-l) + (1.0 - g) * softplus(l))
        .sum();
    total / logits.len() as f64
}

/// Per-component loss values for logging; `total` is their plain sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub dice: f64,
    pub bce: f64,
    pub class: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.dice + self.bce + self.class
    }
}

/// Σ over matched pairs of (1 − soft-dice) + mean-BCE, plus cross-entropy on
/// all queries with unmatched queries targeting the no-object slot at weight
/// 0.1. The match is taken as given and is not differentiated through.
pub fn total_loss(
    tape: &GradTape,
    pred: &Prediction,
    gts: &[PreparedGt],
    m: &MatchResult,
    num_classes: usize,
) -> Result<(Var, LossParts)> {
    let k = pred.class_logits.shape()[0];
    let cells: usize = pred.mask_logits.shape()[1..].iter().product();
    let flat_masks = pred.mask_logits.reshape(&[k, cells])?;

    let mut parts = LossParts::default();
    let mut mask_terms: Option<Var> = None;
    for &(q, g) in &m.pairs {
        let gt = &gts[g];
        if gt.mask.numel() != cells {
            return Err(Error::shape(
                "total_loss",
                format!(
                    "gt mask has {} cells, mask logits have {cells}",
                    gt.mask.numel()
                ),
            ));
        }
        let logits = flat_masks.gather_rows(&[q])?;
        let gt_row = tape.constant(gt.mask.clone().reshaped(&[1, cells])?);
        let probs = logits.sigmoid()?;

        let inter = probs.mul(&gt_row)?.sum_all()?;
        let denom = probs.sum_all()?.add(&gt_row.sum_all()?)?;
        let dice = inter
            .scale(2.0)?
            .add_scalar(DICE_EPS)?
            .div(&denom.add_scalar(DICE_EPS)?)?;
        let dice_loss = dice.neg()?.add_scalar(1.0)?;

        let ones = tape.constant(Tensor::ones(&[1, cells]));
        let sp_neg = logits.neg()?.softplus()?;
        let sp_pos = logits.softplus()?;
        let bce = gt_row
            .mul(&sp_neg)?
            .add(&ones.sub(&gt_row)?.mul(&sp_pos)?)?
            .mean_all()?;

        parts.dice += dice_loss.item();
        parts.bce += bce.item();
        let term = dice_loss.add(&bce)?;
        mask_terms = Some(match mask_terms {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }

    let mut targets = vec![num_classes; k];
    for &(q, g) in &m.pairs {
        targets[q] = gts[g].class_id;
    }
    let mut weights = vec![1.0; num_classes + 1];
    weights[num_classes] = NO_OBJECT_WEIGHT;
    let class_loss = cross_entropy_rows(&pred.class_logits, &targets, &weights)?;
    parts.class = class_loss.item();

    let total = match mask_terms {
        None => class_loss,
        Some(masks) => masks.add(&class_loss)?,
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{CostWeights, hungarian_match};
    use crate::tensor::{ParamSet, rand_uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pred_from(tape: &GradTape, class_logits: Tensor, mask_logits: Tensor) -> Prediction {
        Prediction {
            class_logits: tape.constant(class_logits),
            mask_logits: tape.constant(mask_logits),
        }
    }

    #[test]
    fn majority_vote_downsampling() {
        // 4x4 -> 2x2 blocks of 2x2 cells; >2 ones per block required... for
        // factor 2 a block has 4 cells, so 3+ ones map to foreground.
        let mask = Tensor::from_vec(
            &[1, 4, 4],
            vec![
                1.0, 1.0, 0.0, 1.0, //
                1.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 1.0, 1.0, //
            ],
        )
        .unwrap();
        let ds = downsample_majority(&mask, 2).unwrap();
        assert_eq!(ds.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn majority_ties_go_to_background() {
        let mask = Tensor::from_vec(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let ds = downsample_majority(&mask, 2).unwrap();
        assert_eq!(ds.data(), &[0.0]);
    }

    #[test]
    fn saturated_perfect_prediction_has_negligible_loss() {
        let tape = GradTape::new();
        let gt_mask = Tensor::from_vec(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let mask_logits = Tensor::from_vec(&[1, 1, 2, 2], vec![20.0, 20.0, -20.0, -20.0]).unwrap();
        let class_logits = Tensor::from_vec(&[1, 3], vec![20.0, 0.0, 0.0]).unwrap();
        let pred = pred_from(&tape, class_logits, mask_logits);
        let gts = [PreparedGt { class_id: 0, mask: gt_mask }];
        let m = MatchResult { pairs: vec![(0, 0)] };
        let (loss, _) = total_loss(&tape, &pred, &gts, &m, 2).unwrap();
        assert!(loss.item() <= 1e-6, "loss {}", loss.item());
    }

    #[test]
    fn complement_mask_dice_term_is_near_one() {
        let tape = GradTape::new();
        let cells = 256usize;
        let gt: Vec<f64> = (0..cells).map(|i| if i < 128 { 1.0 } else { 0.0 }).collect();
        let logits: Vec<f64> = gt.iter().map(|&g| if g > 0.5 { -30.0 } else { 30.0 }).collect();
        let pred = pred_from(
            &tape,
            Tensor::zeros(&[1, 3]),
            Tensor::from_vec(&[1, 1, 16, 16], logits).unwrap(),
        );
        let gts = [PreparedGt {
            class_id: 0,
            mask: Tensor::from_vec(&[1, 16, 16], gt).unwrap(),
        }];
        let m = MatchResult { pairs: vec![(0, 0)] };
        let (_, parts) = total_loss(&tape, &pred, &gts, &m, 2).unwrap();
        assert!(parts.dice >= 0.99, "dice term {}", parts.dice);
    }

    #[test]
    fn empty_gts_uniform_logits_cost_point_one_log_classes() {
        let tape = GradTape::new();
        let num_classes = 2usize;
        let k = 4usize;
        let pred = pred_from(
            &tape,
            Tensor::zeros(&[k, num_classes + 1]),
            Tensor::zeros(&[k, 1, 2, 2]),
        );
        let (loss, parts) = total_loss(&tape, &pred, &[], &MatchResult::default(), num_classes)
            .unwrap();
        let want = NO_OBJECT_WEIGHT * ((num_classes + 1) as f64).ln();
        assert!((loss.item() - want).abs() <= 1e-12);
        assert_eq!(parts.dice, 0.0);
        assert_eq!(parts.bce, 0.0);
    }

    #[test]
    fn loss_is_invariant_under_simultaneous_query_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let class_logits = rand_uniform(&mut rng, &[3, 3], -1.0, 1.0);
        let mask_logits = rand_uniform(&mut rng, &[3, 1, 2, 2], -2.0, 2.0);
        let gts = [
            PreparedGt {
                class_id: 0,
                mask: Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
            },
            PreparedGt {
                class_id: 1,
                mask: Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
            },
        ];
        let m = hungarian_match(&class_logits, &mask_logits, &gts, &CostWeights::default());

        let tape = GradTape::new();
        let pred = pred_from(&tape, class_logits.clone(), mask_logits.clone());
        let (base, _) = total_loss(&tape, &pred, &gts, &m, 2).unwrap();

        // Permute queries (0 1 2) -> (2 0 1) and remap the match.
        let perm = [2usize, 0, 1];
        let mut pc = Tensor::zeros(&[3, 3]);
        let mut pm = Tensor::zeros(&[3, 1, 2, 2]);
        for q in 0..3 {
            for c in 0..3 {
                pc.set(&[perm[q], c], class_logits.at(&[q, c]));
            }
            for i in 0..4 {
                pm.set(&[perm[q], 0, i / 2, i % 2], mask_logits.at(&[q, 0, i / 2, i % 2]));
            }
        }
        let pm_match = MatchResult {
            pairs: m.pairs.iter().map(|&(q, g)| (perm[q], g)).collect(),
        };
        let tape2 = GradTape::new();
        let pred2 = pred_from(&tape2, pc, pm);
        let (permuted, _) = total_loss(&tape2, &pred2, &gts, &pm_match, 2).unwrap();
        assert!((base.item() - permuted.item()).abs() <= 1e-12);
    }

    #[test]
    fn loss_parts_sum_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = GradTape::new();
        let pred = pred_from(
            &tape,
            rand_uniform(&mut rng, &[2, 3], -1.0, 1.0),
            rand_uniform(&mut rng, &[2, 1, 2, 2], -1.0, 1.0),
        );
        let gts = [PreparedGt {
            class_id: 1,
            mask: Tensor::from_vec(&[1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap(),
        }];
        let m = MatchResult { pairs: vec![(1, 0)] };
        let (loss, parts) = total_loss(&tape, &pred, &gts, &m, 2).unwrap();
        assert!((loss.item() - parts.total()).abs() <= 1e-12);
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        use crate::gradcheck::spot_check_params;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut set = ParamSet::new();
        let pc = set.add("class_logits", rand_uniform(&mut rng, &[3, 3], -0.8, 0.8));
        let pm = set.add("mask_logits", rand_uniform(&mut rng, &[3, 2, 2, 2], -0.8, 0.8));
        let gts = vec![
            PreparedGt {
                class_id: 0,
                mask: Tensor::from_vec(&[2, 2, 2], vec![1., 0., 1., 0., 1., 0., 0., 0.]).unwrap(),
            },
            PreparedGt {
                class_id: 1,
                mask: Tensor::from_vec(&[2, 2, 2], vec![0., 1., 0., 1., 0., 1., 1., 1.]).unwrap(),
            },
        ];
        let m = MatchResult { pairs: vec![(0, 1), (2, 0)] };
        let build = || -> Result<Var> {
            let tape = GradTape::new();
            let pred = Prediction {
                class_logits: tape.param(&pc),
                mask_logits: tape.param(&pm),
            };
            let (loss, _) = total_loss(&tape, &pred, &gts, &m, 2)?;
            Ok(loss)
        };
        let (max_rel, pass) = spot_check_params(&set, &build, 8, 1e-4, &mut rng).unwrap();
        assert!(pass, "loss FD failed: {max_rel:.3e}");
    }

    #[test]
    fn end_to_end_model_loss_gradients_pass_finite_differences() {
        use crate::gradcheck::spot_check_params;
        use crate::model::{Mode, Model, ModelConfig};
        let cfg = ModelConfig {
            widths: [3, 4, 6, 8],
            embed_dim: 6,
            clip_len: 3,
            num_queries: 3,
            num_heads: 2,
            num_stages: 1,
            num_kernel_pairs: 1,
            decoder_rounds: 1,
            num_classes: 2,
        };
        let model = Model::new(cfg, Mode::TafpNet, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let clip = rand_uniform(&mut rng, &[3, 3, 32, 32], -1.0, 1.0);
        // Ground truth at stride 4 of a 32x32 frame: 8x8 masks.
        let mut gt_mask = Tensor::zeros(&[3, 8, 8]);
        for t in 0..3 {
            for y in 2..6 {
                for x in 1..5 {
                    gt_mask.set(&[t, y, x], 1.0);
                }
            }
        }
        let gts = vec![PreparedGt { class_id: 1, mask: gt_mask }];
        // Freeze the match so finite differences see a smooth function.
        let m = MatchResult { pairs: vec![(1, 0)] };
        let build = || -> Result<Var> {
            let tape = GradTape::new();
            let out = model.forward(&tape, &clip)?;
            let (loss, _) = total_loss(&tape, &out.prediction, &gts, &m, 2)?;
            Ok(loss)
        };
        let (max_rel, pass) = spot_check_params(model.params(), &build, 5, 1e-3, &mut rng).unwrap();
        assert!(pass, "end-to-end FD failed: {max_rel:.3e}");
    }
}
