//! Command-line front end.
//!
//! Five subcommands (generate | train | eval | gradcheck | inspect) share one
//! INI config plus `--set` overrides. Exit codes are a stable contract:
//! 0 success, 2 usage/config/missing-file errors, 3 numeric failures (NaN in
//! training, gradient checks out of tolerance).

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{FD_TOLERANCE, operator_checks, run_cases, spot_check_params};
use crate::loss::GroundTruthInstance;
use crate::metrics::{ClipPrediction, evaluate_dataset};
use crate::model::{Model, ModelConfig};
use crate::scenes::{self, ClipSample, IndexEntry, SceneSpec};
use crate::tensor::{GradTape, Tensor, Var, rand_uniform, write_snapshot};
use crate::train::{TrainSample, train_loop};

pub const USAGE: &str = "\
usage: tafp <command> [options]

commands:
  generate   write synthetic train/val clips and their index to the output dir
  train      fit the model on the train split; writes checkpoint + loss CSV
  eval       score a checkpoint (or prediction clips) on the val split
  gradcheck  finite-difference check every operator and a model spot sample
  inspect    dump pyramid/query/attention/mask artifacts for one clip

options:
  --config FILE        INI config file (defaults apply when omitted)
  --set SEC.KEY=VALUE  override one config key (repeatable)
  --force              allow generate to overwrite existing files
  --checkpoint FILE    weights file for eval/inspect (default: OUT/model.tafw)
  --clip FILE          clip file for inspect
  --predictions DIR    eval scores clip files in DIR instead of a checkpoint

environment:
  TAFP_THREADS         caps worker threads for generate (default: all cores)
";

struct Cli {
    command: String,
    config: Option<PathBuf>,
    sets: Vec<String>,
    force: bool,
    checkpoint: Option<PathBuf>,
    clip: Option<PathBuf>,
    predictions: Option<PathBuf>,
}

fn parse_args(args: &[String]) -> Result<Cli> {
    let mut it = args.iter();
    let command = it
        .next()
        .ok_or_else(|| Error::Config("missing command".into()))?
        .clone();
    let mut cli = Cli {
        command,
        config: None,
        sets: Vec::new(),
        force: false,
        checkpoint: None,
        clip: None,
        predictions: None,
    };
    while let Some(flag) = it.next() {
        let mut value = |name: &str| -> Result<String> {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Config(format!("{name} expects a value")))
        };
        match flag.as_str() {
            "--config" => cli.config = Some(PathBuf::from(value("--config")?)),
            "--set" => cli.sets.push(value("--set")?),
            "--force" => cli.force = true,
            "--checkpoint" => cli.checkpoint = Some(PathBuf::from(value("--checkpoint")?)),
            "--clip" => cli.clip = Some(PathBuf::from(value("--clip")?)),
            "--predictions" => cli.predictions = Some(PathBuf::from(value("--predictions")?)),
            other => {
                return Err(Error::Config(format!("unknown flag {other:?}")));
            }
        }
    }
    Ok(cli)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

/// Parse arguments, dispatch, and map errors to the exit-code contract.
pub fn run(args: &[String]) -> i32 {
    if args.is_empty()
        || matches!(args[0].as_str(), "help" | "--help" | "-h")
    {
        print!("{USAGE}");
        return if args.is_empty() { 2 } else { 0 };
    }
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let cli = parse_args(args)?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        cfg.apply_set(s)?;
    }
    cfg.validate()?;
    match cli.command.as_str() {
        "generate" => cmd_generate(&cfg, cli.force),
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg, cli.checkpoint.as_deref(), cli.predictions.as_deref()),
        "gradcheck" => cmd_gradcheck(&cfg),
        "inspect" => cmd_inspect(&cfg, cli.checkpoint.as_deref(), cli.clip.as_deref()),
        other => Err(Error::Config(format!(
            "unknown command {other:?} (expected generate | train | eval | gradcheck | inspect)"
        ))),
    }
}

fn worker_count(jobs: usize) -> Result<usize> {
    let cap = match std::env::var("TAFP_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("TAFP_THREADS must be a positive integer, got {v:?}"))
        })?,
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    Ok(cap.min(jobs).max(1))
}

fn index_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("index.tafi")
}

fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<()> {
    let (train_seeds, val_seeds) = scenes::split_seed_ranges(cfg.data_seed, cfg.n_train, cfg.n_val)?;
    let template = cfg.scene_template();
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut jobs: Vec<(IndexEntry, PathBuf)> = Vec::new();
    for (split, seeds) in [("train", train_seeds), ("val", val_seeds)] {
        for (i, seed) in seeds.enumerate() {
            let file = format!("clip_{split}_{i:04}.tafc");
            let path = cfg.out_dir.join(&file);
            jobs.push((IndexEntry { split: split.into(), seed, file }, path));
        }
    }
    if !force {
        for p in jobs.iter().map(|(_, p)| p).chain(std::iter::once(&index_path(cfg))) {
            if p.exists() {
                return Err(Error::Config(format!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
    }

    let workers = worker_count(jobs.len())?;
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(usize, Error)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((entry, path)) = jobs.get(i) else { break };
                    let spec = SceneSpec { seed: entry.seed, ..template.clone() };
                    let result = scenes::generate(&spec)
                        .and_then(|clip| scenes::write_clip(path, &clip));
                    if let Err(e) = result {
                        failures.lock().unwrap().push((i, e));
                    }
                }
            });
        }
    });
    let mut failures = failures.into_inner().unwrap();
    failures.sort_by_key(|&(i, _)| i);
    if let Some((_, e)) = failures.into_iter().next() {
        return Err(e);
    }

    let entries: Vec<IndexEntry> = jobs.into_iter().map(|(e, _)| e).collect();
    scenes::write_index(&index_path(cfg), &entries)?;
    println!(
        "wrote {} train + {} val clips to {}",
        cfg.n_train,
        cfg.n_val,
        cfg.out_dir.display()
    );
    Ok(())
}

/// Load one split's clips via the index file.
fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<ClipSample>> {
    let index = index_path(cfg);
    let entries = scenes::read_index(&index)
        .map_err(|e| Error::Config(format!("{}: {e}; run generate first", index.display())))?;
    let mut clips = Vec::new();
    for entry in entries.iter().filter(|e| e.split == split) {
        clips.push(scenes::read_clip(&cfg.out_dir.join(&entry.file))?);
    }
    if clips.is_empty() {
        return Err(Error::Data(format!(
            "{}: no {split} clips listed",
            index.display()
        )));
    }
    Ok(clips)
}

fn checkpoint_path(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("model.tafw"))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let clips = load_split(cfg, "train")?;
    let samples: Vec<TrainSample> = clips
        .into_iter()
        .map(|c| TrainSample { clip: c.clip, instances: c.instances })
        .collect();
    let model = Model::new(cfg.model_config(), cfg.mode, cfg.train_seed)?;
    let mut csv = std::fs::File::create(cfg.out_dir.join("train_loss.csv"))?;
    let outcome = train_loop(
        &model,
        &samples,
        &cfg.train_config(),
        Some(&mut csv),
        Some(&cfg.out_dir),
    )?;
    let ckpt = cfg.out_dir.join("model.tafw");
    model.params().save(&ckpt)?;
    if outcome.curve.is_empty() {
        println!(
            "trained 0 iterations; checkpoint {} equals initialization",
            ckpt.display()
        );
    } else {
        println!(
            "trained {} iterations on {} clips: loss {:.4} -> {:.4}; checkpoint {}",
            cfg.iterations,
            samples.len(),
            outcome.first_loss(),
            outcome.final_loss(),
            ckpt.display()
        );
    }
    Ok(())
}

/// Stand-in heads that reproduce a clip's instances exactly: one active query
/// per instance, full-resolution ±1 mask logits, and class scores rising with
/// instance index so overlaps resolve in z-order like the ground truth.
fn prediction_from_instances(instances: &[GroundTruthInstance]) -> Result<ClipPrediction> {
    if instances.is_empty() {
        return Err(Error::Data("prediction clip has no instances".into()));
    }
    let shape = instances[0].mask.shape().to_vec();
    let (t_len, h, w) = (shape[0], shape[1], shape[2]);
    let classes = 1 + instances.iter().map(|i| i.class_id).max().unwrap_or(0).max(1);
    let k = instances.len();
    let mut class_logits = Tensor::zeros(&[k, classes + 1]);
    let mut mask_logits = Tensor::full(&[k, t_len, h, w], -1.0)?;
    for (q, inst) in instances.iter().enumerate() {
        class_logits.set(&[q, inst.class_id], 6.0 + 0.01 * q as f64);
        for (p, &v) in inst.mask.data().iter().enumerate() {
            if v != 0.0 {
                mask_logits.data_mut()[q * t_len * h * w + p] = 1.0;
            }
        }
    }
    Ok(ClipPrediction { class_logits, mask_logits })
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
) -> Result<()> {
    let val = load_split(cfg, "val")?;
    let gts: Vec<Vec<GroundTruthInstance>> = val.iter().map(|c| c.instances.clone()).collect();

    let preds: Vec<ClipPrediction> = match predictions {
        Some(dir) => {
            let index = index_path(cfg);
            let entries = scenes::read_index(&index)?;
            entries
                .iter()
                .filter(|e| e.split == "val")
                .map(|e| {
                    let clip = scenes::read_clip(&dir.join(&e.file))?;
                    prediction_from_instances(&clip.instances)
                })
                .collect::<Result<_>>()?
        }
        None => {
            let model = Model::new(cfg.model_config(), cfg.mode, cfg.train_seed)?;
            model.params().load(&checkpoint_path(cfg, checkpoint))?;
            val.iter()
                .map(|c| {
                    let tape = GradTape::new();
                    let out = model.forward(&tape, &c.clip)?;
                    Ok(ClipPrediction {
                        class_logits: out.prediction.class_logits.value(),
                        mask_logits: out.prediction.mask_logits.value(),
                    })
                })
                .collect::<Result<_>>()?
        }
    };

    // Semantic labels: 0 background, 1 anatomy, 2 instrument.
    let report = evaluate_dataset(&preds, &gts, 3)?;
    let report_path = cfg.out_dir.join(format!("metrics_{}.txt", cfg.mode.name()));
    report.write(&report_path)?;

    let cell = |v: Option<&f64>| match v {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    };
    println!("method    iou_anatomy  iou_instrument  miou    mdice   map_50_95");
    println!(
        "{:<9} {:>11}  {:>14}  {:.4}  {:.4}  {:.4}",
        cfg.mode.name(),
        cell(report.per_class_iou.get(&1)),
        cell(report.per_class_iou.get(&2)),
        report.miou,
        report.mdice,
        report.map_50_95
    );
    println!("report written to {}", report_path.display());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let cases = operator_checks(11);
    let results = run_cases(&cases, 12)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<22} max_rel {:9.3e} over {:2} points  {}",
            r.name,
            r.max_rel_err,
            r.points,
            if r.pass { "pass" } else { "FAIL" }
        );
        if !r.pass {
            failed.push(r.name.clone());
        }
    }

    // Model-level spot check on a scaled-down network in the configured mode.
    let spot_cfg = ModelConfig {
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
    let model = Model::new(spot_cfg, cfg.mode, 13)?;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let clip = rand_uniform(&mut rng, &[3, 3, 32, 32], -1.0, 1.0);
    let probe = rand_uniform(&mut rng, &[3, 3, 8, 8], -1.0, 1.0);
    let build = || -> Result<Var> {
        let tape = GradTape::new();
        let out = model.forward(&tape, &clip)?;
        let m = out
            .prediction
            .mask_logits
            .mul(&tape.constant(probe.clone()))?
            .sum_all()?;
        out.prediction.class_logits.sum_all()?.add(&m)
    };
    let (max_rel, pass) = spot_check_params(model.params(), &build, 6, FD_TOLERANCE, &mut rng)?;
    println!(
        "{:<22} max_rel {:9.3e} over  6 points  {}",
        format!("model_spot_{}", cfg.mode.name()),
        max_rel,
        if pass { "pass" } else { "FAIL" }
    );
    if !pass {
        failed.push("model_spot".into());
    }

    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

/// Binary 8-bit PGM.
fn write_pgm(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out)?;
    Ok(())
}

/// Grayscale render of one [H, W] slice, scaled so `hi` maps to 255.
fn gray(values: &[f64], hi: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&v| {
            if hi <= 0.0 {
                0
            } else {
                (v.max(0.0) / hi * 255.0).round().min(255.0) as u8
            }
        })
        .collect()
}

fn cmd_inspect(cfg: &RunConfig, checkpoint: Option<&Path>, clip: Option<&Path>) -> Result<()> {
    let clip_path = clip.ok_or_else(|| Error::Config("inspect requires --clip FILE".into()))?;
    let sample = scenes::read_clip(clip_path)?;
    let model = Model::new(cfg.model_config(), cfg.mode, cfg.train_seed)?;
    model.params().load(&checkpoint_path(cfg, checkpoint))?;

    let dir = cfg.out_dir.join("inspect");
    std::fs::create_dir_all(&dir)?;
    let tape = GradTape::new();
    let out = model.forward(&tape, &sample.clip)?;

    for (l, level) in out.state.pyramid.levels.iter().enumerate() {
        write_snapshot(&dir.join(format!("pyramid_l{l}.taft")), &level.value())?;
    }
    for (l, map) in out.attention_maps.iter().enumerate() {
        write_snapshot(&dir.join(format!("attention_l{l}.taft")), map)?;
    }

    // Temporal embedding: full snapshot plus per-frame channel-norm images.
    let emb = out.state.embedding.value();
    write_snapshot(&dir.join("embedding.taft"), &emb)?;
    let es = emb.shape().to_vec();
    let (d, t_len, eh, ew) = (es[0], es[1], es[2], es[3]);
    for t in 0..t_len {
        let mut norms = vec![0.0f64; eh * ew];
        for c in 0..d {
            for p in 0..eh * ew {
                let v = emb.data()[(c * t_len + t) * eh * ew + p];
                norms[p] += v * v;
            }
        }
        for v in &mut norms {
            *v = v.sqrt();
        }
        let hi = norms.iter().cloned().fold(0.0f64, f64::max);
        write_pgm(&dir.join(format!("embedding_t{t}.pgm")), eh, ew, &gray(&norms, hi))?;
    }

    // Query tubes: flat cell indices decoded to (t, y, x) per selected query.
    let tubes = dir.join("query_tubes.txt");
    match &out.query_indices {
        Some(indices) => {
            let mut text = String::from("q t y x\n");
            for (q, &flat) in indices.iter().enumerate() {
                let (t, rest) = (flat / (eh * ew), flat % (eh * ew));
                text.push_str(&format!("{q} {t} {} {}\n", rest / ew, rest % ew));
            }
            std::fs::write(&tubes, text)?;
        }
        None => std::fs::write(&tubes, "no temporal queries in this mode\n")?,
    }

    // Predicted semantic masks, one grayscale frame per time step.
    let pred = ClipPrediction {
        class_logits: out.prediction.class_logits.value(),
        mask_logits: out.prediction.mask_logits.value(),
    };
    let cs = sample.clip.shape().to_vec();
    let (full_h, full_w) = (cs[2], cs[3]);
    let (sem, _) = crate::metrics::assemble_clip(&pred, full_h, full_w, 0)?;
    for t in 0..cs[1] {
        let frame = &sem.data()[t * full_h * full_w..(t + 1) * full_h * full_w];
        let bytes = gray(frame, model.cfg.num_classes as f64);
        write_pgm(&dir.join(format!("mask_t{t}.pgm")), full_h, full_w, &bytes)?;
    }

    println!("wrote inspection artifacts to {}", dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn args_parse_flags_and_values() {
        let cli = parse_args(&s(&[
            "eval",
            "--config",
            "run.ini",
            "--set",
            "model.d=16",
            "--set",
            "train.seed=3",
            "--force",
            "--checkpoint",
            "w.tafw",
        ]))
        .unwrap();
        assert_eq!(cli.command, "eval");
        assert_eq!(cli.config.as_deref(), Some(Path::new("run.ini")));
        assert_eq!(cli.sets, vec!["model.d=16", "train.seed=3"]);
        assert!(cli.force);
        assert_eq!(cli.checkpoint.as_deref(), Some(Path::new("w.tafw")));
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        assert!(parse_args(&s(&[])).is_err());
        assert!(parse_args(&s(&["train", "--bogus"])).is_err());
        assert!(parse_args(&s(&["train", "--config"])).is_err(), "missing value");
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite { op: "x" }), 3);
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x"))),
            2
        );
    }

    #[test]
    fn unknown_command_is_a_usage_error() {
        assert_eq!(run(&s(&["frobnicate"])), 2);
    }

    #[test]
    fn ideal_predictions_reproduce_their_instances() {
        let mut a = Tensor::zeros(&[1, 4, 4]);
        for x in 0..3 {
            a.set(&[0, 0, x], 1.0);
        }
        let mut b = Tensor::zeros(&[1, 4, 4]);
        for x in 1..4 {
            b.set(&[0, 0, x], 1.0);
        }
        let instances = vec![
            GroundTruthInstance { class_id: 0, mask: a },
            GroundTruthInstance { class_id: 1, mask: b },
        ];
        let pred = prediction_from_instances(&instances).unwrap();
        let (sem, dets) = crate::metrics::assemble_clip(&pred, 4, 4, 0).unwrap();
        let (gt_sem, _) = crate::metrics::rasterize_gt(&instances, 0).unwrap();
        assert_eq!(sem.data(), gt_sem.data(), "overlap must resolve in z-order");
        assert_eq!(dets.len(), 2);
    }
}
