//! Overfit a small model on a single synthetic clip and watch the summed
//! dice + mask-BCE + class loss fall. A fast, scaled-down rehearsal of the
//! full-size smoke test the acceptance suite runs.
//!
//!     cargo run --release --example overfit_clip

use tafpnet::model::{Mode, Model, ModelConfig};
use tafpnet::scenes::{self, SceneSpec};
use tafpnet::train::{TrainConfig, TrainSample, train_loop};

fn main() {
    let spec = SceneSpec {
        seed: 3,
        frames: 3,
        height: 32,
        width: 32,
        ..SceneSpec::default()
    };
    let sample = scenes::generate(&spec).expect("scene fits");
    let data = vec![TrainSample { clip: sample.clip, instances: sample.instances }];

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
    let model = Model::new(cfg, Mode::TafpNet, 5).unwrap();
    let train = TrainConfig {
        iterations: 60,
        batch_size: 1,
        learning_rate: 3e-4,
        seed: 11,
    };
    let out = train_loop(&model, &data, &train, None, None).expect("training stays finite");

    for (it, parts) in out.curve.iter().step_by(10) {
        println!(
            "iter {it:3}  loss {:9.4}  (dice {:.4}  bce {:.4}  class {:.4})",
            parts.total(),
            parts.dice,
            parts.bce,
            parts.class
        );
    }
    let (first, last) = (out.first_loss(), out.final_loss());
    println!("\nloss {first:.4} -> {last:.4} ({:+.1}%)", (last / first - 1.0) * 100.0);
    assert!(last < first, "loss should fall when overfitting one clip");
}
