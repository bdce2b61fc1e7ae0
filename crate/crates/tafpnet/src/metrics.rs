//! Evaluation: pooled-count semantic IoU/Dice, greedy-matched instance
//! average precision over ten mask-IoU thresholds, and the box-IoU variant
//! on tight bounding boxes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::GroundTruthInstance;
use crate::tensor::Tensor;

/// Mask-overlap thresholds tau in {0.50, 0.55, ..., 0.95}. Built from
/// integer percents so an IoU of exactly 0.6 compares equal to the 0.60 rung.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Pooled per-class pixel counts; IoU and Dice come from the pooled totals,
/// never from per-frame averages, so Dice == 2*IoU/(1+IoU) holds exactly.
pub struct SemanticCounts {
    num_classes: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl SemanticCounts {
    pub fn new(num_classes: usize) -> SemanticCounts {
        SemanticCounts {
            num_classes,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn accumulate(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape(
                "semantic_scores",
                format!("label shapes differ: {:?} vs {:?}", pred.shape(), gt.shape()),
            ));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let (p, g) = (as_label(p, self.num_classes)?, as_label(g, self.num_classes)?);
            if p == g {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    /// Per-class (IoU, Dice) for classes present in prediction or truth.
    pub fn per_class(&self) -> BTreeMap<usize, (f64, f64)> {
        let mut out = BTreeMap::new();
        for c in 0..self.num_classes {
            let (tp, fp, fn_) = (self.tp[c] as f64, self.fp[c] as f64, self.fn_[c] as f64);
            if tp + fp + fn_ == 0.0 {
                continue;
            }
            let iou = tp / (tp + fp + fn_);
            let dice = 2.0 * tp / (2.0 * tp + fp + fn_);
            out.insert(c, (iou, dice));
        }
        out
    }

    /// (mIoU, mDice): means over classes present in prediction or truth.
    pub fn means(&self) -> (f64, f64) {
        let per = self.per_class();
        if per.is_empty() {
            return (0.0, 0.0);
        }
        let n = per.len() as f64;
        let miou = per.values().map(|&(i, _)| i).sum::<f64>() / n;
        let mdice = per.values().map(|&(_, d)| d).sum::<f64>() / n;
        (miou, mdice)
    }
}

fn as_label(v: f64, num_classes: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v >= num_classes as f64 {
        return Err(Error::Data(format!(
            "label {v} is not an integer below {num_classes}"
        )));
    }
    Ok(v as usize)
}

/// One-shot semantic scoring of a single label volume pair.
pub fn semantic_scores(
    pred: &Tensor,
    gt: &Tensor,
    num_classes: usize,
) -> Result<(f64, f64, BTreeMap<usize, (f64, f64)>)> {
    let mut counts = SemanticCounts::new(num_classes);
    counts.accumulate(pred, gt)?;
    let (miou, mdice) = counts.means();
    Ok((miou, mdice, counts.per_class()))
}

/// One scored mask in one image (frame).
#[derive(Clone)]
pub struct InstanceDetection {
    pub image: usize,
    pub class_id: usize,
    pub score: f64,
    pub mask: Tensor,
}

/// One ground-truth mask in one image (frame).
#[derive(Clone)]
pub struct InstanceTruth {
    pub image: usize,
    pub class_id: usize,
    pub mask: Tensor,
}

pub fn mask_iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mask_iou",
            format!("mask shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Tight bounding box (y0, x0, y1, x1) of a nonempty 2D mask, half-open:
/// the box spans rows y0..y1 and columns x0..x1, so a full-frame mask maps
/// to [0, 0, H, W].
pub fn tight_box(mask: &Tensor) -> Result<[usize; 4]> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "tight_box",
            format!("expected a 2D mask, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[0], shape[1]);
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] != 0.0 {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y + 1);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 == usize::MAX {
        return Err(Error::Data("tight_box: empty mask".into()));
    }
    Ok([y0, x0, y1, x1])
}

/// IoU of half-open boxes (y0, x0, y1, x1).
pub fn box_iou(a: [usize; 4], b: [usize; 4]) -> f64 {
    let area = |r: [usize; 4]| ((r[2] - r[0]) * (r[3] - r[1])) as f64;
    let y0 = a[0].max(b[0]);
    let x0 = a[1].max(b[1]);
    let y1 = a[2].min(b[2]);
    let x1 = a[3].min(b[3]);
    if y1 <= y0 || x1 <= x0 {
        return 0.0;
    }
    let inter = ((y1 - y0) * (x1 - x0)) as f64;
    inter / (area(a) + area(b) - inter)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdCounts {
    pub tau: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug)]
pub struct ApBreakdown {
    /// Mean AP over thresholds then classes (classes with ground truth only).
    pub map: f64,
    /// Per-class AP, already averaged over the ten thresholds.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Pooled TP/FP/FN over those classes, one row per threshold.
    pub counts: Vec<ThresholdCounts>,
}

/// All-points interpolated area under the precision-recall curve.
/// `hits` are TP flags in score-descending order; `num_gt` > 0.
fn all_points_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut precs = Vec::with_capacity(hits.len());
    let mut recalls = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        precs.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // Monotone envelope from the right, then sum over recall increments.
    let mut ap = 0.0;
    let mut best = 0.0f64;
    for i in (0..hits.len()).rev() {
        best = best.max(precs[i]);
        let prev_recall = if i == 0 { 0.0 } else { recalls[i - 1] };
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * best;
        }
    }
    ap
}

/// Canonical detection order: score descending, then image, then mask
/// content, so equal-score results never depend on input order.
fn content_key(mask: &Tensor) -> Vec<u8> {
    let mut key = Vec::with_capacity(8 * (mask.shape().len() + mask.data().len()));
    for &d in mask.shape() {
        key.extend_from_slice(&(d as u64).to_be_bytes());
    }
    for &v in mask.data() {
        key.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    key
}

/// Shared AP machinery: `overlap(det, gt)` supplies the IoU flavor.
fn ap_breakdown(
    dets: &[(usize, usize, f64)],
    det_keys: &[Vec<u8>],
    gts: &[(usize, usize)],
    overlap: &dyn Fn(usize, usize) -> f64,
) -> ApBreakdown {
    let taus = iou_thresholds();
    let classes: std::collections::BTreeSet<usize> = gts.iter().map(|&(_, c)| c).collect();
    let mut per_class_ap = BTreeMap::new();
    let mut counts: Vec<ThresholdCounts> = taus
        .iter()
        .map(|&tau| ThresholdCounts { tau, tp: 0, fp: 0, fn_: 0 })
        .collect();
    for &class in &classes {
        let class_dets: Vec<usize> = {
            let mut ids: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].1 == class).collect();
            ids.sort_by(|&a, &b| {
                dets[b].2
                    .partial_cmp(&dets[a].2)
                    .unwrap()
                    .then(dets[a].0.cmp(&dets[b].0))
                    .then(det_keys[a].cmp(&det_keys[b]))
            });
            ids
        };
        let class_gts: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].1 == class).collect();
        let mut ap_sum = 0.0;
        for (ti, &tau) in taus.iter().enumerate() {
            let mut matched = vec![false; class_gts.len()];
            let mut hits = Vec::with_capacity(class_dets.len());
            for &di in &class_dets {
                let mut best: Option<(usize, f64)> = None;
                for (slot, &gj) in class_gts.iter().enumerate() {
                    if matched[slot] || gts[gj].0 != dets[di].0 {
                        continue;
                    }
                    let ov = overlap(di, gj);
                    if ov >= tau && best.map_or(true, |(_, b)| ov > b) {
                        best = Some((slot, ov));
                    }
                }
                if let Some((slot, _)) = best {
                    matched[slot] = true;
                    hits.push(true);
                } else {
                    hits.push(false);
                }
            }
            let tp = hits.iter().filter(|&&h| h).count();
            counts[ti].tp += tp;
            counts[ti].fp += hits.len() - tp;
            counts[ti].fn_ += class_gts.len() - tp;
            ap_sum += all_points_ap(&hits, class_gts.len());
        }
        per_class_ap.insert(class, ap_sum / taus.len() as f64);
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    ApBreakdown { map, per_class_ap, counts }
}

/// Segmentation AP on full-resolution binary masks, matched greedily per
/// image per class in score-descending order, each truth used at most once.
pub fn instance_map(dets: &[InstanceDetection], gts: &[InstanceTruth]) -> Result<ApBreakdown> {
    for d in dets {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Data(format!("detection score {} outside [0, 1]", d.score)));
        }
    }
    let mut cache: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            if d.image == g.image && d.class_id == g.class_id {
                cache.insert((i, j), mask_iou(&d.mask, &g.mask)?);
            }
        }
    }
    let det_rows: Vec<(usize, usize, f64)> =
        dets.iter().map(|d| (d.image, d.class_id, d.score)).collect();
    let order_keys: Vec<Vec<u8>> = dets.iter().map(|d| content_key(&d.mask)).collect();
    let gt_rows: Vec<(usize, usize)> = gts.iter().map(|g| (g.image, g.class_id)).collect();
    Ok(ap_breakdown(&det_rows, &order_keys, &gt_rows, &|i, j| {
        cache.get(&(i, j)).copied().unwrap_or(0.0)
    }))
}

/// Detection AP: same machinery on tight mask bounding boxes.
pub fn detection_map(dets: &[InstanceDetection], gts: &[InstanceTruth]) -> Result<ApBreakdown> {
    for d in dets {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Data(format!("detection score {} outside [0, 1]", d.score)));
        }
    }
    let det_boxes: Vec<[usize; 4]> = dets
        .iter()
        .map(|d| tight_box(&d.mask))
        .collect::<Result<_>>()?;
    let gt_boxes: Vec<[usize; 4]> = gts
        .iter()
        .map(|g| tight_box(&g.mask))
        .collect::<Result<_>>()?;
    let det_rows: Vec<(usize, usize, f64)> =
        dets.iter().map(|d| (d.image, d.class_id, d.score)).collect();
    let order_keys: Vec<Vec<u8>> = dets.iter().map(|d| content_key(&d.mask)).collect();
    let gt_rows: Vec<(usize, usize)> = gts.iter().map(|g| (g.image, g.class_id)).collect();
    Ok(ap_breakdown(&det_rows, &order_keys, &gt_rows, &|i, j| {
        box_iou(det_boxes[i], gt_boxes[j])
    }))
}

/// Raw per-clip prediction values, as produced by the model's heads.
pub struct ClipPrediction {
    /// `[K, C+1]` class logits; column C is "no object".
    pub class_logits: Tensor,
    /// `[K, T, H/s, W/s]` mask logits at some integer stride s.
    pub mask_logits: Tensor,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / s).collect()
}

/// Per query: Some((foreground class, its probability)) when the argmax over
/// all C+1 classes is not "no object".
pub fn query_activations(class_logits: &Tensor) -> Vec<Option<(usize, f64)>> {
    let shape = class_logits.shape();
    let (k, cols) = (shape[0], shape[1]);
    (0..k)
        .map(|q| {
            let probs = softmax_row(&class_logits.data()[q * cols..(q + 1) * cols]);
            let arg = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if arg == cols - 1 {
                None
            } else {
                Some((arg, probs[arg]))
            }
        })
        .collect()
}

/// Turn one clip's raw heads into evaluation artifacts: a semantic label
/// volume (highest-scoring active query above mask probability 0.5 per
/// pixel; 0 = background, foreground labels are class_id + 1) and per-frame
/// detections (nearest-upsampled thresholded masks; empty ones dropped).
/// Frame t of this clip becomes image `image_base + t`.
pub fn assemble_clip(
    pred: &ClipPrediction,
    full_h: usize,
    full_w: usize,
    image_base: usize,
) -> Result<(Tensor, Vec<InstanceDetection>)> {
    let ms = pred.mask_logits.shape();
    if ms.len() != 4 {
        return Err(Error::shape(
            "assemble_clip",
            format!("mask logits must be [K,T,h,w], got {ms:?}"),
        ));
    }
    let (k, t_len, mh, mw) = (ms[0], ms[1], ms[2], ms[3]);
    if mh == 0 || mw == 0 || full_h % mh != 0 || full_w % mw != 0 || full_h / mh != full_w / mw {
        return Err(Error::shape(
            "assemble_clip",
            format!("mask grid {mh}x{mw} does not divide frame {full_h}x{full_w} evenly"),
        ));
    }
    let stride = full_h / mh;
    let cs = pred.class_logits.shape();
    if cs.len() != 2 || cs[0] != k {
        return Err(Error::shape(
            "assemble_clip",
            format!("class logits must be [{k}, C+1], got {cs:?}"),
        ));
    }
    let active = query_activations(&pred.class_logits);
    let plane = full_h * full_w;
    let mut labels = vec![0.0f64; t_len * plane];
    let mut best = vec![f64::NEG_INFINITY; t_len * plane];
    let mut dets = Vec::new();
    for q in 0..k {
        let Some((class, score)) = active[q] else { continue };
        for t in 0..t_len {
            let logits = &pred.mask_logits.data()[(q * t_len + t) * mh * mw..][..mh * mw];
            let mut mask = vec![0.0f64; plane];
            let mut any = false;
            for y in 0..full_h {
                for x in 0..full_w {
                    if logits[(y / stride) * mw + x / stride] > 0.0 {
                        mask[y * full_w + x] = 1.0;
                        any = true;
                        let p = t * plane + y * full_w + x;
                        if score > best[p] {
                            best[p] = score;
                            labels[p] = (class + 1) as f64;
                        }
                    }
                }
            }
            if any {
                dets.push(InstanceDetection {
                    image: image_base + t,
                    class_id: class,
                    score,
                    mask: Tensor::new(vec![full_h, full_w], mask)?,
                });
            }
        }
    }
    Ok((Tensor::new(vec![t_len, full_h, full_w], labels)?, dets))
}

/// Rasterize ground-truth instances to a semantic label volume (painted in
/// z-order, so later instances win) plus per-frame truths (empty frames of
/// an instance dropped).
pub fn rasterize_gt(
    instances: &[GroundTruthInstance],
    image_base: usize,
) -> Result<(Tensor, Vec<InstanceTruth>)> {
    let first = instances
        .first()
        .ok_or_else(|| Error::Data("rasterize_gt: no instances".into()))?;
    let shape = first.mask.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "rasterize_gt",
            format!("instance masks must be [T,H,W], got {shape:?}"),
        ));
    }
    let (t_len, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let mut labels = vec![0.0f64; t_len * plane];
    let mut truths = Vec::new();
    for inst in instances {
        if inst.mask.shape() != shape {
            return Err(Error::shape(
                "rasterize_gt",
                format!("instance mask {:?} != {:?}", inst.mask.shape(), shape),
            ));
        }
        for t in 0..t_len {
            let frame = &inst.mask.data()[t * plane..(t + 1) * plane];
            if frame.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (p, &v) in frame.iter().enumerate() {
                if v != 0.0 {
                    labels[t * plane + p] = (inst.class_id + 1) as f64;
                }
            }
            truths.push(InstanceTruth {
                image: image_base + t,
                class_id: inst.class_id,
                mask: Tensor::new(vec![h, w], frame.to_vec())?,
            });
        }
    }
    Ok((Tensor::new(vec![t_len, h, w], labels)?, truths))
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub miou: f64,
    pub mdice: f64,
    pub per_class_iou: BTreeMap<usize, f64>,
    pub per_class_dice: BTreeMap<usize, f64>,
    pub map_50_95: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub detection_map_50_95: f64,
    pub seg_counts: Vec<ThresholdCounts>,
    pub det_counts: Vec<ThresholdCounts>,
}

/// Score a dataset of clip predictions against instance ground truth.
/// Semantic counts pool over every pixel of every frame and clip; instance
/// detections pool per frame across clips into one PR curve per class and
/// threshold.
pub fn evaluate_dataset(
    preds: &[ClipPrediction],
    gts: &[Vec<GroundTruthInstance>],
    num_semantic_classes: usize,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth clips",
            preds.len(),
            gts.len()
        )));
    }
    let mut counts = SemanticCounts::new(num_semantic_classes);
    let mut dets = Vec::new();
    let mut truths = Vec::new();
    let mut image_base = 0usize;
    for (pred, clip_gts) in preds.iter().zip(gts) {
        let shape = clip_gts
            .first()
            .map(|g| g.mask.shape())
            .ok_or_else(|| Error::Data("clip without ground-truth instances".into()))?;
        let (gt_sem, gt_inst) = rasterize_gt(clip_gts, image_base)?;
        let (pred_sem, pred_inst) = assemble_clip(pred, shape[1], shape[2], image_base)?;
        counts.accumulate(&pred_sem, &gt_sem)?;
        dets.extend(pred_inst);
        truths.extend(gt_inst);
        image_base += shape[0];
    }
    let (miou, mdice) = counts.means();
    let per = counts.per_class();
    let seg = instance_map(&dets, &truths)?;
    let nonempty_dets: Vec<InstanceDetection> = dets
        .iter()
        .filter(|d| d.mask.data().iter().any(|&v| v != 0.0))
        .cloned()
        .collect();
    let det = detection_map(&nonempty_dets, &truths)?;
    Ok(MetricsReport {
        miou,
        mdice,
        per_class_iou: per.iter().map(|(&c, &(i, _))| (c, i)).collect(),
        per_class_dice: per.iter().map(|(&c, &(_, d))| (c, d)).collect(),
        map_50_95: seg.map,
        per_class_ap: seg.per_class_ap,
        detection_map_50_95: det.map,
        seg_counts: seg.counts,
        det_counts: det.counts,
    })
}

impl MetricsReport {
    /// A flat JSON object, one key per line, keys sorted.
    pub fn render(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("miou".into(), format!("{:.6}", self.miou)),
            ("mdice".into(), format!("{:.6}", self.mdice)),
            ("map_50_95".into(), format!("{:.6}", self.map_50_95)),
            (
                "detection_map_50_95".into(),
                format!("{:.6}", self.detection_map_50_95),
            ),
        ];
        for (&c, &v) in &self.per_class_iou {
            rows.push((format!("iou_class_{c}"), format!("{v:.6}")));
        }
        for (&c, &v) in &self.per_class_dice {
            rows.push((format!("dice_class_{c}"), format!("{v:.6}")));
        }
        for (&c, &v) in &self.per_class_ap {
            rows.push((format!("ap_class_{c}"), format!("{v:.6}")));
        }
        for (prefix, counts) in [("seg", &self.seg_counts), ("det", &self.det_counts)] {
            for c in counts {
                let pct = (c.tau * 100.0).round() as usize;
                rows.push((format!("{prefix}_tp_{pct}"), c.tp.to_string()));
                rows.push((format!("{prefix}_fp_{pct}"), c.fp.to_string()));
                rows.push((format!("{prefix}_fn_{pct}"), c.fn_.to_string()));
            }
        }
        rows.sort();
        let mut out = String::from("{\n");
        let last = rows.len().saturating_sub(1);
        for (i, (k, v)) in rows.iter().enumerate() {
            let comma = if i == last { "" } else { "," };
            let _ = writeln!(out, "  \"{k}\": {v}{comma}");
        }
        out.push_str("}\n");
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::mask_iou_loop;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn mask2(h: usize, w: usize, ones: &[(usize, usize)]) -> Tensor {
        let mut m = Tensor::zeros(&[h, w]);
        for &(y, x) in ones {
            m.set(&[y, x], 1.0);
        }
        m
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = labels(&[1, 2, 2], &[0.0, 1.0, 2.0, 1.0]);
        let (miou, mdice, _) = semantic_scores(&gt, &gt, 3).unwrap();
        assert_eq!(miou, 1.0);
        assert_eq!(mdice, 1.0);
    }

    #[test]
    fn disjoint_single_class_masks_score_zero() {
        let pred = labels(&[1, 1, 2], &[1.0, 0.0]);
        let gt = labels(&[1, 1, 2], &[0.0, 1.0]);
        let (miou, mdice, per) = semantic_scores(&pred, &gt, 2).unwrap();
        assert_eq!(per[&1], (0.0, 0.0));
        assert_eq!(miou, 0.0);
        assert_eq!(mdice, 0.0);
    }

    #[test]
    fn two_by_two_cross_case() {
        // gt class 1 = left column, pred class 1 = top row.
        let gt = labels(&[1, 2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let pred = labels(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        let (_, _, per) = semantic_scores(&pred, &gt, 2).unwrap();
        let (iou, dice) = per[&1];
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((dice - 0.5).abs() < 1e-15);
        for &(i, d) in per.values() {
            assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-15);
        }
    }

    #[test]
    fn dice_iou_identity_on_random_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut counts = SemanticCounts::new(4);
        for _ in 0..5 {
            let p: Vec<f64> = (0..60).map(|_| rng.gen_range(0..4) as f64).collect();
            let g: Vec<f64> = (0..60).map(|_| rng.gen_range(0..4) as f64).collect();
            counts
                .accumulate(&labels(&[3, 4, 5], &p), &labels(&[3, 4, 5], &g))
                .unwrap();
        }
        for &(iou, dice) in counts.per_class().values() {
            assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_and_label_validation() {
        let mut c = SemanticCounts::new(2);
        assert!(c
            .accumulate(&labels(&[1, 1, 1], &[0.0]), &labels(&[1, 1, 2], &[0.0, 0.0]))
            .is_err());
        assert!(c
            .accumulate(&labels(&[1, 1, 1], &[5.0]), &labels(&[1, 1, 1], &[0.0]))
            .is_err());
    }

    #[test]
    fn exact_match_gives_map_one() {
        let m = mask2(4, 4, &[(0, 0), (0, 1), (1, 0)]);
        let dets = [InstanceDetection {
            image: 0,
            class_id: 0,
            score: 0.3,
            mask: m.clone(),
        }];
        let gts = [InstanceTruth {
            image: 0,
            class_id: 0,
            mask: m,
        }];
        let out = instance_map(&dets, &gts).unwrap();
        assert_eq!(out.map, 1.0);
        assert_eq!(out.per_class_ap[&0], 1.0);
    }

    #[test]
    fn iou_point_six_crosses_three_thresholds() {
        // Overlap 3, union 5 -> IoU exactly 0.6: TP at 0.50/0.55/0.60 only.
        let pred = mask2(2, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let gt = mask2(2, 4, &[(0, 1), (0, 2), (0, 3), (1, 3)]);
        assert_eq!(mask_iou(&pred, &gt).unwrap(), 0.6);
        let out = instance_map(
            &[InstanceDetection {
                image: 0,
                class_id: 1,
                score: 0.9,
                mask: pred,
            }],
            &[InstanceTruth {
                image: 0,
                class_id: 1,
                mask: gt,
            }],
        )
        .unwrap();
        assert!((out.map - 0.3).abs() < 1e-12, "map {}", out.map);
        assert_eq!(out.counts[2], ThresholdCounts { tau: 0.6, tp: 1, fp: 0, fn_: 0 });
        assert_eq!(out.counts[3], ThresholdCounts { tau: 0.65, tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn no_predictions_means_zero_map() {
        let gts = [InstanceTruth {
            image: 0,
            class_id: 0,
            mask: mask2(2, 2, &[(0, 0)]),
        }];
        let out = instance_map(&[], &gts).unwrap();
        assert_eq!(out.map, 0.0);
        assert_eq!(out.counts[0].fn_, 1);
    }

    #[test]
    fn greedy_matching_consumes_each_truth_once() {
        let m = mask2(3, 3, &[(1, 1), (1, 2)]);
        let dets = [
            InstanceDetection { image: 0, class_id: 0, score: 0.9, mask: m.clone() },
            InstanceDetection { image: 0, class_id: 0, score: 0.5, mask: m.clone() },
        ];
        let gts = [InstanceTruth { image: 0, class_id: 0, mask: m }];
        let out = instance_map(&dets, &gts).unwrap();
        // The duplicate becomes an FP but never displaces the first match.
        assert_eq!(out.map, 1.0);
        assert_eq!(out.counts[0], ThresholdCounts { tau: 0.5, tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn all_points_interpolation_hand_case() {
        // Hits [TP, FP, TP] with 3 truths: AP = 1/3 + (1/3)*(2/3) = 5/9.
        let ap = all_points_ap(&[true, false, true], 3);
        assert!((ap - 5.0 / 9.0).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn classes_without_truth_are_excluded() {
        let m = mask2(2, 2, &[(0, 0)]);
        let dets = [
            InstanceDetection { image: 0, class_id: 0, score: 0.8, mask: m.clone() },
            InstanceDetection { image: 0, class_id: 7, score: 0.9, mask: m.clone() },
        ];
        let gts = [InstanceTruth { image: 0, class_id: 0, mask: m }];
        let out = instance_map(&dets, &gts).unwrap();
        assert_eq!(out.map, 1.0);
        assert!(!out.per_class_ap.contains_key(&7));
    }

    #[test]
    fn detections_only_match_within_their_image() {
        let m = mask2(2, 2, &[(0, 0)]);
        let dets = [InstanceDetection { image: 1, class_id: 0, score: 0.8, mask: m.clone() }];
        let gts = [InstanceTruth { image: 0, class_id: 0, mask: m }];
        let out = instance_map(&dets, &gts).unwrap();
        assert_eq!(out.map, 0.0);
    }

    #[test]
    fn mask_iou_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let a: Vec<f64> = (0..24).map(|_| (rng.gen_range(0..2)) as f64).collect();
            let b: Vec<f64> = (0..24).map(|_| (rng.gen_range(0..2)) as f64).collect();
            let ta = labels(&[4, 6], &a);
            let tb = labels(&[4, 6], &b);
            assert_eq!(mask_iou(&ta, &tb).unwrap(), mask_iou_loop(&a, &b));
        }
    }

    #[test]
    fn box_map_and_empty_mask_error() {
        let pred = mask2(6, 6, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let gt = mask2(6, 6, &[(0, 1), (0, 2), (1, 1), (1, 2)]);
        // Boxes 2x2 overlapping in a 2x1 strip: IoU = 2/6 = 1/3 < 0.5.
        let dets = [InstanceDetection { image: 0, class_id: 0, score: 0.9, mask: pred }];
        let gts = [InstanceTruth { image: 0, class_id: 0, mask: gt.clone() }];
        let out = detection_map(&dets, &gts).unwrap();
        assert_eq!(out.map, 0.0);

        let same = [InstanceDetection { image: 0, class_id: 0, score: 0.9, mask: gt.clone() }];
        assert_eq!(detection_map(&same, &gts).unwrap().map, 1.0);

        let empty = [InstanceDetection {
            image: 0,
            class_id: 0,
            score: 0.9,
            mask: Tensor::zeros(&[6, 6]),
        }];
        assert!(detection_map(&empty, &gts).is_err());
    }

    #[test]
    fn box_iou_arithmetic_cases() {
        assert_eq!(box_iou([0, 0, 10, 10], [0, 0, 10, 10]), 1.0);
        // 10x10 boxes overlapping in a 5x10 strip: 50 / 150.
        let v = box_iou([0, 0, 10, 10], [0, 5, 10, 15]);
        assert!((v - 1.0 / 3.0).abs() < 1e-15, "{v}");
        let full = Tensor::full(&[6, 8], 1.0).unwrap();
        assert_eq!(tight_box(&full).unwrap(), [0, 0, 6, 8]);
    }

    #[test]
    fn prediction_order_does_not_change_scores() {
        // Tied scores with different masks: the canonical content ordering
        // must make every input permutation score identically.
        let gt = mask2(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let good = gt.clone();
        let half = mask2(4, 4, &[(0, 0), (0, 1)]);
        let stray = mask2(4, 4, &[(3, 3)]);
        let dets = vec![
            InstanceDetection { image: 0, class_id: 0, score: 0.7, mask: good },
            InstanceDetection { image: 0, class_id: 0, score: 0.7, mask: half },
            InstanceDetection { image: 0, class_id: 0, score: 0.7, mask: stray },
        ];
        let gts = [InstanceTruth { image: 0, class_id: 0, mask: gt }];
        let orders: [[usize; 3]; 4] = [[0, 1, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1]];
        let base = instance_map(&dets, &gts).unwrap();
        for order in orders {
            let shuffled: Vec<InstanceDetection> =
                order.iter().map(|&i| dets[i].clone()).collect();
            let out = instance_map(&shuffled, &gts).unwrap();
            assert_eq!(out.map, base.map);
            assert_eq!(out.counts, base.counts);
        }
    }

    #[test]
    fn greedy_matching_against_exhaustive_oracle() {
        // Max-matching count by brute force over injective assignments.
        fn best_match_count(ious: &[Vec<f64>], tau: f64) -> usize {
            let (np, ng) = (ious.len(), ious.first().map_or(0, |r| r.len()));
            let mut best = 0;
            let mut assignment = vec![usize::MAX; np];
            fn rec(
                ious: &[Vec<f64>],
                tau: f64,
                row: usize,
                used: &mut Vec<bool>,
                assignment: &mut Vec<usize>,
                best: &mut usize,
            ) {
                if row == ious.len() {
                    let count = assignment
                        .iter()
                        .enumerate()
                        .filter(|&(p, &g)| g != usize::MAX && ious[p][g] >= tau)
                        .count();
                    *best = (*best).max(count);
                    return;
                }
                assignment[row] = usize::MAX;
                rec(ious, tau, row + 1, used, assignment, best);
                for g in 0..used.len() {
                    if !used[g] {
                        used[g] = true;
                        assignment[row] = g;
                        rec(ious, tau, row + 1, used, assignment, best);
                        assignment[row] = usize::MAX;
                        used[g] = false;
                    }
                }
            }
            let mut used = vec![false; ng];
            rec(ious, tau, 0, &mut used, &mut assignment, &mut best);
            best
        }

        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for case in 0..60 {
            let np = rng.gen_range(1..=3);
            let ng = rng.gen_range(1..=3);
            let rand_mask = |rng: &mut ChaCha8Rng| {
                let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0..2) as f64).collect();
                Tensor::new(vec![4, 4], data).unwrap()
            };
            let dets: Vec<InstanceDetection> = (0..np)
                .map(|i| InstanceDetection {
                    image: 0,
                    class_id: 0,
                    // Distinct scores so greedy order is total.
                    score: 0.9 - 0.1 * i as f64,
                    mask: rand_mask(&mut rng),
                })
                .collect();
            let gts: Vec<InstanceTruth> = (0..ng)
                .map(|_| InstanceTruth { image: 0, class_id: 0, mask: rand_mask(&mut rng) })
                .collect();
            let ious: Vec<Vec<f64>> = dets
                .iter()
                .map(|d| gts.iter().map(|g| mask_iou(&d.mask, &g.mask).unwrap()).collect())
                .collect();
            let out = instance_map(&dets, &gts).unwrap();
            for (ti, &tau) in iou_thresholds().iter().enumerate() {
                let optimal = best_match_count(&ious, tau);
                let greedy = out.counts[ti].tp;
                assert!(greedy <= optimal, "case {case}: greedy beat the optimum");
                let candidates_per_pred: Vec<usize> = ious
                    .iter()
                    .map(|row| row.iter().filter(|&&v| v >= tau).count())
                    .collect();
                if candidates_per_pred.iter().all(|&c| c <= 1) {
                    assert_eq!(greedy, optimal, "case {case} tau {tau}: greedy suboptimal");
                }
            }
        }
    }

    #[test]
    fn score_outside_unit_interval_rejected() {
        let m = mask2(2, 2, &[(0, 0)]);
        let dets = [InstanceDetection { image: 0, class_id: 0, score: 1.5, mask: m.clone() }];
        assert!(instance_map(&dets, &[]).is_err());
    }

    #[test]
    fn assemble_upsamples_and_labels_by_best_query() {
        // Query 0: class 0, strong; query 1: no-object; query 2: class 1,
        // weaker, overlapping mask.
        let class_logits = labels(
            &[3, 3],
            &[
                4.0, 0.0, 0.0, // class 0, prob ~0.96
                0.0, 0.0, 4.0, // no-object
                0.0, 2.0, 0.0, // class 1, prob ~0.79
            ],
        );
        // [K=3, T=1, 2, 2] grid; stride 2 against a 4x4 frame.
        let mut mask_logits = Tensor::zeros(&[3, 1, 2, 2]);
        mask_logits.set(&[0, 0, 0, 0], 3.0); // query 0 claims top-left cell
        mask_logits.set(&[2, 0, 0, 0], 3.0); // query 2 overlaps it
        mask_logits.set(&[2, 0, 1, 1], 3.0); // and claims bottom-right alone
        mask_logits.set(&[1, 0, 1, 0], 9.0); // inactive query, must not show
        let pred = ClipPrediction { class_logits, mask_logits };
        let (sem, dets) = assemble_clip(&pred, 4, 4, 10).unwrap();
        // Top-left 2x2 block: the stronger query 0 wins -> label 1.
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(sem.at(&[0, y, x]), 1.0);
        }
        // Bottom-right block: only query 2 -> label 2.
        for (y, x) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            assert_eq!(sem.at(&[0, y, x]), 2.0);
        }
        // Bottom-left block: inactive query suppressed -> background.
        assert_eq!(sem.at(&[0, 2, 0]), 0.0);
        assert_eq!(dets.len(), 2);
        assert!(dets.iter().all(|d| d.image == 10));
        let q0 = dets.iter().find(|d| d.class_id == 0).unwrap();
        assert_eq!(q0.mask.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn rasterize_gt_paints_in_z_order() {
        let mut under = Tensor::zeros(&[1, 2, 2]);
        under.set(&[0, 0, 0], 1.0);
        under.set(&[0, 0, 1], 1.0);
        let mut over = Tensor::zeros(&[1, 2, 2]);
        over.set(&[0, 0, 1], 1.0);
        let (sem, truths) = rasterize_gt(
            &[
                GroundTruthInstance { class_id: 0, mask: under },
                GroundTruthInstance { class_id: 1, mask: over },
            ],
            0,
        )
        .unwrap();
        assert_eq!(sem.at(&[0, 0, 0]), 1.0);
        assert_eq!(sem.at(&[0, 0, 1]), 2.0, "later instance wins the overlap");
        assert_eq!(truths.len(), 2);
    }

    #[test]
    fn report_lines_are_key_sorted() {
        let gt = labels(&[1, 2, 2], &[0.0, 1.0, 2.0, 1.0]);
        let mut counts = SemanticCounts::new(3);
        counts.accumulate(&gt, &gt).unwrap();
        let (miou, mdice) = counts.means();
        let per = counts.per_class();
        let report = MetricsReport {
            miou,
            mdice,
            per_class_iou: per.iter().map(|(&c, &(i, _))| (c, i)).collect(),
            per_class_dice: per.iter().map(|(&c, &(_, d))| (c, d)).collect(),
            map_50_95: 0.3,
            per_class_ap: [(0, 0.3)].into(),
            detection_map_50_95: 0.2,
            seg_counts: vec![ThresholdCounts { tau: 0.5, tp: 1, fp: 0, fn_: 0 }],
            det_counts: vec![],
        };
        let text = report.render();
        assert!(text.starts_with("{\n") && text.ends_with("}\n"));
        let keys: Vec<&str> = text
            .lines()
            .filter_map(|l| l.trim().strip_prefix('"'))
            .map(|l| l.split('"').next().unwrap())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(!keys.is_empty());
        assert!(text.contains("\"miou\": 1.000000"));
        assert!(text.contains("\"seg_tp_50\": 1"));
    }

    #[test]
    fn evaluate_dataset_end_to_end_on_ideal_heads() {
        // Build ground truth, then heads that reproduce it exactly.
        let mut gt_mask = Tensor::zeros(&[1, 4, 4]);
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            gt_mask.set(&[0, y, x], 1.0);
        }
        let gts = vec![vec![GroundTruthInstance { class_id: 1, mask: gt_mask }]];
        let class_logits = labels(&[1, 3], &[0.0, 6.0, 0.0]);
        let mut mask_logits = Tensor::zeros(&[1, 1, 2, 2]);
        mask_logits.set(&[0, 0, 0, 0], 5.0);
        let preds = vec![ClipPrediction { class_logits, mask_logits }];
        let report = evaluate_dataset(&preds, &gts, 3).unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.mdice, 1.0);
        assert_eq!(report.map_50_95, 1.0);
        assert_eq!(report.detection_map_50_95, 1.0);
    }
}
