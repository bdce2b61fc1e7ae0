//! Desk-scale ablation: BaseNet (convolution pathway only), AFPNet (adds the
//! enhancement banks' attention maps), TAFPNet (adds temporal query
//! propagation). All three share one backbone and code path, so parameter
//! sets nest strictly; this prints the three models trained briefly on the
//! same occlusion-heavy data and scored on held-out clips.
//!
//!     cargo run --release --example ablation_benchmark

use tafpnet::loss::GroundTruthInstance;
use tafpnet::metrics::{ClipPrediction, evaluate_dataset};
use tafpnet::model::{Mode, Model, ModelConfig};
use tafpnet::scenes::{SceneSpec, make_split};
use tafpnet::tensor::GradTape;
use tafpnet::train::{TrainConfig, TrainSample, train_loop};

fn main() {
    let template = SceneSpec {
        frames: 3,
        height: 32,
        width: 32,
        occlusion_bias: 1.0,
        blur_strength: 1.0,
        ..SceneSpec::default()
    };
    let (train, val) = make_split(&template, 100, 3, 2).expect("scenes fit");
    let samples: Vec<TrainSample> = train
        .into_iter()
        .map(|c| TrainSample { clip: c.clip, instances: c.instances })
        .collect();
    let gts: Vec<Vec<GroundTruthInstance>> = val.iter().map(|c| c.instances.clone()).collect();

    let cfg = ModelConfig {
        widths: [4, 6, 8, 10],
        embed_dim: 8,
        clip_len: 3,
        num_queries: 4,
        num_heads: 2,
        num_stages: 1,
        num_kernel_pairs: 1,
        decoder_rounds: 1,
        num_classes: 2,
    };
    let tc = TrainConfig { iterations: 40, batch_size: 1, learning_rate: 3e-4, seed: 9 };

    println!("{:<9} {:>7} {:>9} {:>9} {:>8}", "mode", "params", "loss", "miou", "mdice");
    let mut param_counts = Vec::new();
    for mode in [Mode::BaseNet, Mode::AfpNet, Mode::TafpNet] {
        let model = Model::new(cfg.clone(), mode, 17).unwrap();
        let outcome = train_loop(&model, &samples, &tc, None, None).expect("finite training");
        let preds: Vec<ClipPrediction> = val
            .iter()
            .map(|c| {
                let tape = GradTape::new();
                let out = model.forward(&tape, &c.clip).unwrap();
                ClipPrediction {
                    class_logits: out.prediction.class_logits.value(),
                    mask_logits: out.prediction.mask_logits.value(),
                }
            })
            .collect();
        let report = evaluate_dataset(&preds, &gts, 3).unwrap();
        println!(
            "{:<9} {:>7} {:>9.4} {:>9.4} {:>8.4}",
            mode.name(),
            model.params().total_elements(),
            outcome.final_loss(),
            report.miou,
            report.mdice
        );
        param_counts.push(model.params().total_elements());
    }
    assert!(
        param_counts[0] < param_counts[1] && param_counts[1] < param_counts[2],
        "parameter sets must nest strictly"
    );
    println!("\nparameter counts nest: basenet < afpnet < tafpnet");
    println!("(the acceptance benchmark runs this at full size with a frozen margin)");
}
