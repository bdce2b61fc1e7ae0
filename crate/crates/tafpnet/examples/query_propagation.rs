//! Temporal query propagation on a hand-built feature volume: the scorer
//! picks the brightest spatio-temporal cells as content queries, and position
//! queries spread outward from the center frame through per-step linear maps.
//! With those maps pinned to the identity, every frame's position queries
//! collapse onto the center frame's projection exactly.
//!
//!     cargo run --release --example query_propagation

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tafpnet::tensor::{GradTape, ParamSet, Tensor};
use tafpnet::tqp::Tqp;

fn main() {
    let (d, t_len, h, w) = (4usize, 5usize, 6usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut set = ParamSet::new();
    let tqp = Tqp::new("tqp", d, 3, 2, &mut set, &mut rng).unwrap();

    // Mostly-flat features with three bright cells tracing a moving object.
    let mut features = Tensor::zeros(&[d, t_len, h, w]);
    let track = [(0usize, 2usize, 1usize), (2, 3, 3), (4, 4, 5)];
    for &(t, y, x) in &track {
        for c in 0..d {
            features.set(&[c, t, y, x], 2.0 + c as f64);
        }
    }

    let tape = GradTape::new();
    let fv = tape.constant(features);
    let out = tqp.forward(&tape, &fv).unwrap();

    println!("selected query tubes (flat index -> t, y, x):");
    for (q, &flat) in out.queries.indices.iter().enumerate() {
        let (t, rest) = (flat / (h * w), flat % (h * w));
        println!("  q{q}: cell {flat:3} -> frame {t}, y {}, x {}", rest / w, rest % w);
    }
    let picked: Vec<usize> = out.queries.indices.clone();
    let expected: Vec<usize> = track.iter().map(|&(t, y, x)| (t * h + y) * w + x).collect();
    assert_eq!(
        {
            let mut p = picked.clone();
            p.sort();
            p
        },
        expected,
        "the bright track is what gets selected"
    );

    println!("\nposition queries: one [K_q, d] set per frame, built from the center frame");
    for (t, p) in out.queries.position.iter().enumerate() {
        let steps = (t as isize - (t_len / 2) as isize).unsigned_abs();
        println!("  frame {t}: shape {:?}, {steps} propagation step(s) from center", p.shape());
    }

    // Pin both chain maps to the identity: propagation becomes a no-op and
    // every frame's position queries equal the center frame's projection.
    let eye = {
        let mut m = Tensor::zeros(&[d, d]);
        for i in 0..d {
            m.set(&[i, i], 1.0);
        }
        m
    };
    tqp.proj.fwd_linear.set_value(eye.clone());
    tqp.proj.bwd_linear.set_value(eye);
    // Fresh tape: a tape snapshots parameter values when it first sees them.
    let tape = GradTape::new();
    let fv = tape.constant(fv.value());
    let out = tqp.forward(&tape, &fv).unwrap();
    let center = out.queries.position[t_len / 2].value();
    for (t, p) in out.queries.position.iter().enumerate() {
        let diff = p.value().max_abs_diff(&center);
        println!("  identity chain, frame {t}: max |pos - center| = {diff:.1e}");
        assert_eq!(diff, 0.0, "identity propagation must be frame-invariant");
    }
}
