//! Deterministic synthetic clip generator: smooth-polygon "anatomy" bodies
//! with near-identical noise textures, fast bar-shaped "instruments" that
//! occlude them, linear motion blur, and exact pre-blur instance masks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::GroundTruthInstance;
use crate::tensor::Tensor;

/// Instance class ids as used in ground truth (semantic label = id + 1,
/// with 0 reserved for background).
pub const ANATOMY_CLASS: usize = 0;
pub const INSTRUMENT_CLASS: usize = 1;

const CLIP_MAGIC: &[u8; 5] = b"TAFC1";
const INDEX_MAGIC: &str = "TAFI1";
const RETRY_CAP: usize = 64;

const BACKGROUND_BASE: [f64; 3] = [0.06, 0.07, 0.09];
const ANATOMY_COMMON: [f64; 3] = [0.55, 0.30, 0.28];
const ANATOMY_SPREAD: f64 = 0.15;
const BACKGROUND_AMP: f64 = 0.03;
const ANATOMY_AMP: f64 = 0.08;
const INSTRUMENT_AMP: f64 = 0.04;
// Bar length as a fraction of min(H, W); aspect ratio range for length:thickness.
const BAR_LEN_FRAC: (f64, f64) = (0.3, 0.6);
const BAR_ASPECT: (f64, f64) = (4.0, 8.0);
// Anatomy mean radius as a fraction of min(H, W).
const BODY_RADIUS_FRAC: (f64, f64) = (0.15, 0.25);

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_instruments: usize,
    pub num_anatomies: usize,
    /// Instrument speed draw range, pixels per frame.
    pub velocity_range: (f64, f64),
    /// Motion-blur kernel length per unit speed; 0 disables blur.
    pub blur_strength: f64,
    /// 0 = instrument paths placed uniformly, 1 = aimed through an anatomy.
    pub occlusion_bias: f64,
    /// 0 = independent anatomy textures, 1 = near-identical ones.
    pub texture_similarity: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            frames: 5,
            height: 64,
            width: 128,
            num_instruments: 1,
            num_anatomies: 2,
            velocity_range: (1.0, 3.0),
            blur_strength: 1.0,
            occlusion_bias: 0.5,
            texture_similarity: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames % 2 == 0 {
            return Err(Error::Config(format!(
                "clip length must be odd, got {}",
                self.frames
            )));
        }
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "frame size must be divisible by 32, got {}x{}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.velocity_range;
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
            return Err(Error::Config(format!(
                "velocity range must satisfy 0 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !self.blur_strength.is_finite() || self.blur_strength < 0.0 {
            return Err(Error::Config(format!(
                "blur strength must be >= 0, got {}",
                self.blur_strength
            )));
        }
        for (name, v) in [
            ("occlusion_bias", self.occlusion_bias),
            ("texture_similarity", self.texture_similarity),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// One generated clip. `instances` are in z-order: anatomies first, then
/// instruments; a later index is drawn on top of an earlier one. Masks keep
/// the full in-frame footprint even where occluded; `visibility[t][i]` is the
/// unoccluded fraction of instance i's footprint at frame t (0 when the
/// footprint is empty).
#[derive(Clone)]
pub struct ClipSample {
    pub clip: Tensor,
    pub instances: Vec<GroundTruthInstance>,
    pub texture_ids: Vec<[f64; 3]>,
    pub visibility: Vec<Vec<f64>>,
    pub spec: SceneSpec,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash noise in [-1, 1], pure in (seed, y, x).
fn field_noise(seed: u64, y: usize, x: usize) -> f64 {
    let h = mix64(seed ^ mix64(((y as u64) << 32) | x as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

struct Texture {
    base: [f64; 3],
    amp: f64,
    own_seed: u64,
    shared_seed: u64,
    /// Weight of the shared pattern; own pattern gets 1 - blend.
    blend: f64,
}

impl Texture {
    fn sample(&self, y: usize, x: usize) -> [f64; 3] {
        let n = (1.0 - self.blend) * field_noise(self.own_seed, y, x)
            + self.blend * field_noise(self.shared_seed, y, x);
        let d = self.amp * n;
        [self.base[0] + d, self.base[1] + d, self.base[2] + d]
    }
}

struct Body {
    /// Per-frame footprint, row-major H*W. Anatomies repeat one footprint.
    masks: Vec<Vec<bool>>,
    class_id: usize,
    texture: Texture,
}

fn polygon_footprint(h: usize, w: usize, verts: &[(f64, f64)]) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in verts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let ys = (y0.floor().max(0.0) as usize)..=(y1.ceil().min(h as f64 - 1.0) as usize);
    for y in ys {
        let xs = (x0.floor().max(0.0) as usize)..=(x1.ceil().min(w as f64 - 1.0) as usize);
        for x in xs.clone() {
            if point_in_polygon(x as f64, y as f64, verts) {
                mask[y * w + x] = true;
            }
        }
    }
    mask
}

fn bar_footprint(
    h: usize,
    w: usize,
    center: (f64, f64),
    half_len: f64,
    half_thick: f64,
    dir: (f64, f64),
) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let reach_x = half_len * dir.0.abs() + half_thick * dir.1.abs();
    let reach_y = half_len * dir.1.abs() + half_thick * dir.0.abs();
    let y_lo = ((center.1 - reach_y).floor().max(0.0)) as usize;
    let y_hi = ((center.1 + reach_y).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
    let x_lo = ((center.0 - reach_x).floor().max(0.0)) as usize;
    let x_hi = ((center.0 + reach_x).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
    if center.1 + reach_y < 0.0 || center.0 + reach_x < 0.0 {
        return mask;
    }
    for y in y_lo..=y_hi.min(h - 1) {
        for x in x_lo..=x_hi.min(w - 1) {
            let dx = x as f64 - center.0;
            let dy = y as f64 - center.1;
            let along = dx * dir.0 + dy * dir.1;
            let across = -dx * dir.1 + dy * dir.0;
            if along.abs() <= half_len && across.abs() <= half_thick {
                mask[y * w + x] = true;
            }
        }
    }
    mask
}

fn sample_anatomy(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    shared_seed: u64,
) -> ((f64, f64), Vec<bool>, Texture) {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let smin = h.min(w);
    let radius = rng.gen_range(BODY_RADIUS_FRAC.0..=BODY_RADIUS_FRAC.1) * smin;
    let margin = 1.3 * radius;
    let cx = rng.gen_range(margin..=w - 1.0 - margin);
    let cy = rng.gen_range(margin..=h - 1.0 - margin);
    let verts_n = rng.gen_range(8..=14usize);
    // Low-frequency radial jitter: three smooth harmonics, total below 0.3r,
    // so the outline stays star-shaped around (cx, cy).
    let coeffs: Vec<(f64, f64)> = (1..=3)
        .map(|_| (rng.gen_range(0.0..=0.1), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let verts: Vec<(f64, f64)> = (0..verts_n)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / verts_n as f64;
            let jitter: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(m, &(a, phi))| a * ((m + 1) as f64 * theta + phi).cos())
                .sum();
            let r = radius * (1.0 + jitter);
            (cx + r * theta.cos(), cy + r * theta.sin())
        })
        .collect();
    let footprint = polygon_footprint(spec.height, spec.width, &verts);
    let offset: Vec<f64> = (0..3)
        .map(|_| rng.gen_range(-ANATOMY_SPREAD..=ANATOMY_SPREAD))
        .collect();
    let keep = 1.0 - spec.texture_similarity;
    let texture = Texture {
        base: [
            ANATOMY_COMMON[0] + keep * offset[0],
            ANATOMY_COMMON[1] + keep * offset[1],
            ANATOMY_COMMON[2] + keep * offset[2],
        ],
        amp: ANATOMY_AMP,
        own_seed: rng.gen(),
        shared_seed,
        blend: spec.texture_similarity,
    };
    ((cx, cy), footprint, texture)
}

struct BarGeometry {
    masks: Vec<Vec<bool>>,
    speed: f64,
    dir: (f64, f64),
    texture: Texture,
}

fn sample_instrument(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    anatomy_centers: &[(f64, f64)],
) -> BarGeometry {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let smin = h.min(w);
    let len = rng.gen_range(BAR_LEN_FRAC.0..=BAR_LEN_FRAC.1) * smin;
    let aspect = rng.gen_range(BAR_ASPECT.0..=BAR_ASPECT.1);
    let thick = len / aspect;
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = (angle.cos(), angle.sin());
    let speed = rng.gen_range(spec.velocity_range.0..=spec.velocity_range.1);
    let move_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let vel = (speed * move_angle.cos(), speed * move_angle.sin());
    // Place the bar's center-frame position so the whole bar is in frame,
    // then pull it toward an anatomy center by the occlusion bias.
    let reach_x = (len * dir.0.abs() + thick * dir.1.abs()) / 2.0;
    let reach_y = (len * dir.1.abs() + thick * dir.0.abs()) / 2.0;
    let ux = rng.gen_range(reach_x..=w - 1.0 - reach_x);
    let uy = rng.gen_range(reach_y..=h - 1.0 - reach_y);
    let center = if anatomy_centers.is_empty() {
        (ux, uy)
    } else {
        let target = anatomy_centers[rng.gen_range(0..anatomy_centers.len())];
        let b = spec.occlusion_bias;
        (ux + b * (target.0 - ux), uy + b * (target.1 - uy))
    };
    let tc = (spec.frames - 1) as f64 / 2.0;
    let masks = (0..spec.frames)
        .map(|t| {
            let dt = t as f64 - tc;
            let c = (center.0 + vel.0 * dt, center.1 + vel.1 * dt);
            bar_footprint(spec.height, spec.width, c, len / 2.0, thick / 2.0, dir)
        })
        .collect();
    let g = rng.gen_range(0.72..=0.88);
    let texture = Texture {
        base: [g, g, g + 0.04],
        amp: INSTRUMENT_AMP,
        own_seed: rng.gen(),
        shared_seed: 0,
        blend: 0.0,
    };
    BarGeometry { masks, speed, dir, texture }
}

fn motion_blur(frame: &mut [f64], h: usize, w: usize, dir: (f64, f64), taps: usize) {
    let src = frame.to_vec();
    let half = (taps - 1) as f64 / 2.0;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..taps {
                let s = i as f64 - half;
                let sy = ((y as f64 + dir.1 * s).round().clamp(0.0, h as f64 - 1.0)) as usize;
                let sx = ((x as f64 + dir.0 * s).round().clamp(0.0, w as f64 - 1.0)) as usize;
                acc += src[sy * w + sx];
            }
            frame[y * w + x] = acc / taps as f64;
        }
    }
}

/// Generate one clip. Pure in `spec`: repeated calls are bit-identical.
pub fn generate(spec: &SceneSpec) -> Result<ClipSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg_seed: u64 = rng.gen();
    let shared_anatomy_seed: u64 = rng.gen();
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);

    let mut bodies: Vec<Body> = Vec::new();
    let mut anatomy_centers = Vec::new();
    for i in 0..spec.num_anatomies {
        let mut placed = false;
        for _ in 0..RETRY_CAP {
            let (center, footprint, texture) = sample_anatomy(spec, &mut rng, shared_anatomy_seed);
            if footprint.iter().any(|&b| b) {
                anatomy_centers.push(center);
                bodies.push(Body {
                    masks: vec![footprint; t_len],
                    class_id: ANATOMY_CLASS,
                    texture,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "anatomy {i} never entered the frame after {RETRY_CAP} attempts"
            )));
        }
    }
    let mut blur_dominant: Option<(f64, (f64, f64))> = None;
    for i in 0..spec.num_instruments {
        let mut placed = false;
        for _ in 0..RETRY_CAP {
            let bar = sample_instrument(spec, &mut rng, &anatomy_centers);
            if bar.masks.iter().any(|m| m.iter().any(|&b| b)) {
                let move_dir = if bar.speed > 0.0 {
                    (bar.dir.0, bar.dir.1)
                } else {
                    (1.0, 0.0)
                };
                // Blur follows the fastest instrument's motion.
                let speed = bar.speed;
                if blur_dominant.map_or(true, |(s, _)| speed > s) {
                    blur_dominant = Some((speed, move_dir));
                }
                bodies.push(Body {
                    masks: bar.masks,
                    class_id: INSTRUMENT_CLASS,
                    texture: bar.texture,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "instrument {i} never entered the frame after {RETRY_CAP} attempts"
            )));
        }
    }

    let background = Texture {
        base: BACKGROUND_BASE,
        amp: BACKGROUND_AMP,
        own_seed: bg_seed,
        shared_seed: 0,
        blend: 0.0,
    };

    // Painter's algorithm: background, anatomies, then instruments.
    let mut pixels = vec![0.0f64; 3 * t_len * h * w];
    let plane = h * w;
    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                let mut rgb = background.sample(y, x);
                for body in &bodies {
                    if body.masks[t][y * w + x] {
                        rgb = body.texture.sample(y, x);
                    }
                }
                for (c, &v) in rgb.iter().enumerate() {
                    pixels[c * t_len * plane + t * plane + y * w + x] = v;
                }
            }
        }
    }

    // Visibility before blur: fraction of each footprint not covered above.
    let mut visibility = vec![vec![0.0f64; bodies.len()]; t_len];
    for t in 0..t_len {
        let mut covered = vec![false; plane];
        for (i, body) in bodies.iter().enumerate().rev() {
            let mut total = 0usize;
            let mut seen = 0usize;
            for p in 0..plane {
                if body.masks[t][p] {
                    total += 1;
                    if !covered[p] {
                        seen += 1;
                    }
                }
            }
            visibility[t][i] = if total == 0 { 0.0 } else { seen as f64 / total as f64 };
            for p in 0..plane {
                covered[p] |= body.masks[t][p];
            }
        }
    }

    if spec.blur_strength > 0.0 {
        if let Some((speed, dir)) = blur_dominant {
            let taps = (spec.blur_strength * speed).round() as usize;
            if taps >= 2 {
                for c in 0..3 {
                    for t in 0..t_len {
                        let start = c * t_len * plane + t * plane;
                        motion_blur(&mut pixels[start..start + plane], h, w, dir, taps);
                    }
                }
            }
        }
    }

    let clip = Tensor::new(vec![3, t_len, h, w], pixels)?;
    let mut instances = Vec::with_capacity(bodies.len());
    let mut texture_ids = Vec::with_capacity(bodies.len());
    for body in &bodies {
        let mut mask = Tensor::zeros(&[t_len, h, w]);
        for t in 0..t_len {
            for p in 0..plane {
                if body.masks[t][p] {
                    mask.data_mut()[t * plane + p] = 1.0;
                }
            }
        }
        texture_ids.push(body.texture.base);
        instances.push(GroundTruthInstance {
            class_id: body.class_id,
            mask,
        });
    }
    Ok(ClipSample {
        clip,
        instances,
        texture_ids,
        visibility,
        spec: spec.clone(),
    })
}

/// Generate clips for two explicit seed ranges, which must be disjoint.
pub fn generate_split(
    template: &SceneSpec,
    train_seeds: Range<u64>,
    val_seeds: Range<u64>,
) -> Result<(Vec<ClipSample>, Vec<ClipSample>)> {
    if train_seeds.start < val_seeds.end && val_seeds.start < train_seeds.end {
        return Err(Error::Config(format!(
            "split seed ranges overlap: {train_seeds:?} vs {val_seeds:?}"
        )));
    }
    let gen_range = |r: Range<u64>| -> Result<Vec<ClipSample>> {
        r.map(|seed| generate(&SceneSpec { seed, ..template.clone() }))
            .collect()
    };
    Ok((gen_range(train_seeds)?, gen_range(val_seeds)?))
}

/// Train seeds [master, master+n_train) and val seeds following them.
pub fn split_seed_ranges(
    master_seed: u64,
    n_train: usize,
    n_val: usize,
) -> Result<(Range<u64>, Range<u64>)> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::Config(format!(
            "split sizes must be >= 1, got train={n_train} val={n_val}"
        )));
    }
    let t_end = master_seed + n_train as u64;
    Ok((master_seed..t_end, t_end..t_end + n_val as u64))
}

/// Derive split seed ranges from a master seed, then generate both splits.
pub fn make_split(
    template: &SceneSpec,
    master_seed: u64,
    n_train: usize,
    n_val: usize,
) -> Result<(Vec<ClipSample>, Vec<ClipSample>)> {
    let (train, val) = split_seed_ranges(master_seed, n_train, n_val)?;
    generate_split(template, train, val)
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Run-length encode a binary mask: alternating run lengths, zeros first.
fn rle_encode(mask: &[f64]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &v in mask {
        let bit = v != 0.0;
        if bit == current {
            len += 1;
        } else {
            runs.push(len);
            current = bit;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn rle_decode(runs: &[u32], expected: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(expected);
    let mut bit = false;
    for &run in runs {
        out.extend(std::iter::repeat(if bit { 1.0 } else { 0.0 }).take(run as usize));
        bit = !bit;
    }
    if out.len() != expected {
        return Err(Error::Data(format!(
            "mask run lengths sum to {}, expected {expected}",
            out.len()
        )));
    }
    Ok(out)
}

/// Write a clip file: magic, spec echo, pixel payload, RLE instance masks,
/// then per-frame visibility fractions.
pub fn write_clip(path: &Path, sample: &ClipSample) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CLIP_MAGIC)?;
    let s = &sample.spec;
    w.write_all(&s.seed.to_le_bytes())?;
    for v in [
        s.frames,
        s.height,
        s.width,
        s.num_instruments,
        s.num_anatomies,
    ] {
        write_u32(&mut w, v as u32)?;
    }
    for v in [
        s.velocity_range.0,
        s.velocity_range.1,
        s.blur_strength,
        s.occlusion_bias,
        s.texture_similarity,
    ] {
        write_f64(&mut w, v)?;
    }
    for &v in sample.clip.data() {
        write_f64(&mut w, v)?;
    }
    write_u32(&mut w, sample.instances.len() as u32)?;
    for (inst, id) in sample.instances.iter().zip(&sample.texture_ids) {
        w.write_all(&[inst.class_id as u8])?;
        for &c in id {
            write_f64(&mut w, c)?;
        }
        let runs = rle_encode(inst.mask.data());
        write_u32(&mut w, runs.len() as u32)?;
        for run in runs {
            write_u32(&mut w, run)?;
        }
    }
    for row in &sample.visibility {
        for &v in row {
            write_f64(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<ClipSample> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CLIP_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad clip magic {magic:?}",
            path.display()
        )));
    }
    let seed = read_u64(&mut r)?;
    let frames = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    let num_instruments = read_u32(&mut r)? as usize;
    let num_anatomies = read_u32(&mut r)? as usize;
    let velocity_range = (read_f64(&mut r)?, read_f64(&mut r)?);
    let blur_strength = read_f64(&mut r)?;
    let occlusion_bias = read_f64(&mut r)?;
    let texture_similarity = read_f64(&mut r)?;
    let spec = SceneSpec {
        seed,
        frames,
        height,
        width,
        num_instruments,
        num_anatomies,
        velocity_range,
        blur_strength,
        occlusion_bias,
        texture_similarity,
    };
    spec.validate()?;
    let plane = frames * height * width;
    let mut pixels = Vec::with_capacity(3 * plane);
    for _ in 0..3 * plane {
        pixels.push(read_f64(&mut r)?);
    }
    let clip = Tensor::new(vec![3, frames, height, width], pixels)?;
    let n = read_u32(&mut r)? as usize;
    let mut instances = Vec::with_capacity(n);
    let mut texture_ids = Vec::with_capacity(n);
    for _ in 0..n {
        let mut class = [0u8; 1];
        r.read_exact(&mut class)?;
        let mut id = [0.0; 3];
        for c in &mut id {
            *c = read_f64(&mut r)?;
        }
        let num_runs = read_u32(&mut r)? as usize;
        let runs: Vec<u32> = (0..num_runs)
            .map(|_| read_u32(&mut r))
            .collect::<Result<_>>()?;
        let mask = Tensor::new(vec![frames, height, width], rle_decode(&runs, plane)?)?;
        texture_ids.push(id);
        instances.push(GroundTruthInstance {
            class_id: class[0] as usize,
            mask,
        });
    }
    let mut visibility = vec![vec![0.0; n]; frames];
    for row in &mut visibility {
        for v in row.iter_mut() {
            *v = read_f64(&mut r)?;
        }
    }
    Ok(ClipSample {
        clip,
        instances,
        texture_ids,
        visibility,
        spec,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub split: String,
    pub seed: u64,
    pub file: String,
}

/// Plain-text split index: one `split seed filename` line per clip.
pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{INDEX_MAGIC}")?;
    for e in entries {
        writeln!(w, "{} {} {}", e.split, e.seed, e.file)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_MAGIC) {
        return Err(Error::Data(format!(
            "{}: bad index header",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(split), Some(seed), Some(file)) => Ok(IndexEntry {
                    split: split.to_string(),
                    seed: seed
                        .parse()
                        .map_err(|_| Error::Data(format!("bad index seed: {l}")))?,
                    file: file.to_string(),
                }),
                _ => Err(Error::Data(format!("bad index line: {l}"))),
            }
        })
        .collect()
}
