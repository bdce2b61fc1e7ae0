//! Central finite-difference verification of analytic gradients.
//!
//! Each check case owns its parameters and a builder that re-runs the forward
//! pass from the parameters' current values on a fresh tape. The checker
//! compares tape gradients against (f(θ+ε) − f(θ−ε)) / 2ε at randomly sampled
//! coordinates. Everything is f64; ε = 1e-3; error is relative with a unit
//! floor: |g_an − g_fd| / max(1, |g_fd|).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{
    GradTape, ParamSet, Parameter, Tensor, Var, cross_entropy_rows, rand_uniform, stack_rows,
    topk_select,
};

pub const FD_EPSILON: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_POINTS_PER_PARAM: usize = 5;

/// One named scenario: parameters plus a loss builder over their current values.
pub struct CheckCase {
    pub name: String,
    pub params: Vec<Parameter>,
    pub build: Box<dyn Fn() -> Result<Var>>,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub points: usize,
    pub pass: bool,
}

impl CheckCase {
    /// Compare analytic and central-difference gradients at sampled points.
    pub fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
        for p in &self.params {
            p.zero_grad();
        }
        let loss = (self.build)()?;
        loss.backward()?;
        let analytic: Vec<Tensor> = self.params.iter().map(|p| p.grad()).collect();

        let mut max_rel = 0.0f64;
        let mut points = 0;
        for (p, ga) in self.params.iter().zip(&analytic) {
            let n = p.numel();
            for _ in 0..FD_POINTS_PER_PARAM.min(n) {
                let i = rng.gen_range(0..n);
                let g_fd = central_difference(p, i, &self.build)?;
                let rel = (ga.data()[i] - g_fd).abs() / g_fd.abs().max(1.0);
                max_rel = max_rel.max(rel);
                points += 1;
            }
        }
        Ok(CheckResult {
            name: self.name.clone(),
            max_rel_err: max_rel,
            points,
            pass: max_rel <= FD_TOLERANCE,
        })
    }
}

fn central_difference(p: &Parameter, i: usize, build: &dyn Fn() -> Result<Var>) -> Result<f64> {
    let original = p.value().clone();
    let mut bumped = original.clone();
    bumped.data_mut()[i] = original.data()[i] + FD_EPSILON;
    p.set_value(bumped);
    let plus = build()?.item();

    let mut bumped = original.clone();
    bumped.data_mut()[i] = original.data()[i] - FD_EPSILON;
    p.set_value(bumped);
    let minus = build()?.item();

    p.set_value(original);
    Ok((plus - minus) / (2.0 * FD_EPSILON))
}

/// Uniform values with magnitude in [0.35, 1.2] and random sign: far enough
/// from ReLU's kink that an ε=1e-3 probe never crosses it.
pub fn kink_safe_random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let mag = rng.gen_range(0.35..1.2);
            if rng.gen_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction")
}

/// FD checks for every tensor-level operator. Module- and model-level cases
/// are registered separately by their owning modules.
pub fn operator_checks(seed: u64) -> Vec<CheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    // Elementwise binary ops over two parameter tensors.
    let binary: &[(&str, fn(&Var, &Var) -> Result<Var>)] = &[
        ("add", |a, b| a.add(b)),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
        ("div", |a, b| a.div(b)),
    ];
    for (name, f) in binary {
        let a = Parameter::new("a", kink_safe_random(&mut rng, &[3, 4]));
        let b = Parameter::new("b", kink_safe_random(&mut rng, &[3, 4]));
        let f = *f;
        cases.push(CheckCase {
            name: (*name).into(),
            params: vec![a.clone(), b.clone()],
            build: Box::new(move |
            | {
                let tape = GradTape::new();
                let av = tape.param(&a);
                let bv = tape.param(&b);
                // Square the result so the loss depends nonlinearly on both.
                let y = f(&av, &bv)?;
                y.mul(&y)?.sum_all()
            }),
        });
    }

    // Elementwise unary ops.
    let unary: &[(&str, fn(&Var) -> Result<Var>)] = &[
        ("neg", |a| a.neg()),
        ("scale", |a| a.scale(-1.7)),
        ("add_scalar", |a| a.add_scalar(0.9)),
        ("relu", |a| a.relu()),
        ("sigmoid", |a| a.sigmoid()),
        ("softplus", |a| a.softplus()),
    ];
    for (name, f) in unary {
        let a = Parameter::new("a", kink_safe_random(&mut rng, &[4, 5]));
        let f = *f;
        cases.push(CheckCase {
            name: (*name).into(),
            params: vec![a.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let av = tape.param(&a);
                let y = f(&av)?;
                y.mul(&y)?.sum_all()
            }),
        });
    }

    // Softmax over both an outer and the innermost axis.
    for axis in [0usize, 2] {
        let a = Parameter::new("a", rand_uniform(&mut rng, &[3, 2, 4], -2.0, 2.0));
        let w = rand_uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        cases.push(CheckCase {
            name: format!("softmax_axis{axis}"),
            params: vec![a.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let av = tape.param(&a);
                let wv = tape.constant(w.clone());
                av.softmax(axis)?.mul(&wv)?.sum_all()
            }),
        });
    }

    // Matmul in all four supported rank pairings.
    let mm_shapes: &[(&str, &[usize], &[usize])] = &[
        ("matmul_2x2", &[3, 4], &[4, 2]),
        ("matmul_3x3", &[2, 3, 4], &[2, 4, 2]),
        ("matmul_3x2", &[2, 3, 4], &[4, 2]),
        ("matmul_2x3", &[3, 4], &[2, 4, 2]),
    ];
    for (name, sa, sb) in mm_shapes {
        let a = Parameter::new("a", rand_uniform(&mut rng, sa, -1.0, 1.0));
        let b = Parameter::new("b", rand_uniform(&mut rng, sb, -1.0, 1.0));
        cases.push(CheckCase {
            name: (*name).into(),
            params: vec![a.clone(), b.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let av = tape.param(&a);
                let bv = tape.param(&b);
                let y = av.matmul(&bv)?;
                y.mul(&y)?.sum_all()
            }),
        });
    }

    // Linear with bias over a batched input.
    {
        let x = Parameter::new("x", rand_uniform(&mut rng, &[3, 5, 4], -1.0, 1.0));
        let w = Parameter::new("w", rand_uniform(&mut rng, &[6, 4], -0.7, 0.7));
        let b = Parameter::new("b", rand_uniform(&mut rng, &[6], -0.5, 0.5));
        cases.push(CheckCase {
            name: "linear".into(),
            params: vec![x.clone(), w.clone(), b.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let xv = tape.param(&x);
                let wv = tape.param(&w);
                let bv = tape.param(&b);
                let y = xv.linear(&wv, Some(&bv))?;
                y.mul(&y)?.sum_all()
            }),
        });
    }

    // Conv3d: same padding, spatial stride 2, and an asymmetric strip kernel.
    let conv_shapes: &[(&str, &[usize], &[usize], (usize, usize, usize), (usize, usize, usize))] = &[
        ("conv3d_same", &[2, 3, 5, 6], &[3, 2, 3, 3, 3], (1, 1, 1), (1, 1, 1)),
        ("conv3d_strided", &[2, 3, 6, 6], &[2, 2, 3, 3, 3], (1, 2, 2), (1, 1, 1)),
        ("conv3d_strip", &[2, 3, 5, 6], &[2, 2, 3, 1, 5], (1, 1, 1), (1, 0, 2)),
    ];
    for (name, sx, sw, stride, pad) in conv_shapes {
        let x = Parameter::new("x", rand_uniform(&mut rng, sx, -1.0, 1.0));
        let w = Parameter::new("w", rand_uniform(&mut rng, sw, -0.6, 0.6));
        let b = Parameter::new("b", rand_uniform(&mut rng, &[sw[0]], -0.3, 0.3));
        let (stride, pad) = (*stride, *pad);
        cases.push(CheckCase {
            name: (*name).into(),
            params: vec![x.clone(), w.clone(), b.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let xv = tape.param(&x);
                let wv = tape.param(&w);
                let bv = tape.param(&b);
                let y = xv.conv3d(&wv, Some(&bv), stride, pad)?;
                y.mul(&y)?.sum_all()
            }),
        });
    }

    // Reshape + transpose composition.
    {
        let a = Parameter::new("a", rand_uniform(&mut rng, &[2, 3, 4], -1.0, 1.0));
        let m = rand_uniform(&mut rng, &[4, 6], -1.0, 1.0);
        cases.push(CheckCase {
            name: "reshape_transpose".into(),
            params: vec![a.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let av = tape.param(&a);
                let mv = tape.constant(m.clone());
                let y = av.reshape(&[6, 4])?.transpose2d()?.reshape(&[4, 6])?.mul(&mv)?;
                y.mul(&y)?.sum_all()
            }),
        });
    }

    // Top-k selection: scores held constant so the selection cannot flip
    // under perturbation; gradient flows through the gathered rows.
    {
        let v = Parameter::new("v", rand_uniform(&mut rng, &[6, 3], -1.0, 1.0));
        let scores = Tensor::from_vec(&[6], vec![0.1, 2.0, -1.0, 1.5, 0.3, 1.0]).unwrap();
        cases.push(CheckCase {
            name: "topk_select".into(),
            params: vec![v.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let vv = tape.param(&v);
                let (_, sel) = topk_select(&scores, &vv, 3)?;
                sel.mul(&sel)?.sum_all()
            }),
        });
    }

    // gather_rows with a repeated index (fan-out through the same row).
    {
        let v = Parameter::new("v", rand_uniform(&mut rng, &[5, 3], -1.0, 1.0));
        cases.push(CheckCase {
            name: "gather_rows".into(),
            params: vec![v.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let vv = tape.param(&v);
                let g = vv.gather_rows(&[4, 1, 1, 0])?;
                g.mul(&g)?.sum_all()
            }),
        });
    }

    // stack_rows over three parameter blocks.
    {
        let a = Parameter::new("a", rand_uniform(&mut rng, &[2, 3], -1.0, 1.0));
        let b = Parameter::new("b", rand_uniform(&mut rng, &[1, 3], -1.0, 1.0));
        let c = Parameter::new("c", rand_uniform(&mut rng, &[3, 3], -1.0, 1.0));
        cases.push(CheckCase {
            name: "stack_rows".into(),
            params: vec![a.clone(), b.clone(), c.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let parts = [tape.param(&a), tape.param(&b), tape.param(&c)];
                let s = stack_rows(&parts)?;
                s.mul(&s)?.sum_all()
            }),
        });
    }

    // Weighted cross-entropy over rows.
    {
        let l = Parameter::new("logits", rand_uniform(&mut rng, &[4, 3], -1.5, 1.5));
        cases.push(CheckCase {
            name: "cross_entropy_rows".into(),
            params: vec![l.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let lv = tape.param(&l);
                cross_entropy_rows(&lv, &[0, 2, 1, 2], &[1.0, 1.0, 0.1])
            }),
        });
    }

    // SumAll through a sigmoid, and a div of scalar aggregates (the soft-dice
    // pattern: ratio of two reductions of the same tensor).
    {
        let a = Parameter::new("a", rand_uniform(&mut rng, &[3, 3], -1.0, 1.0));
        cases.push(CheckCase {
            name: "scalar_ratio".into(),
            params: vec![a.clone()],
            build: Box::new(move || {
                let tape = GradTape::new();
                let av = tape.param(&a);
                let p = av.sigmoid()?;
                let num = p.mul(&p)?.sum_all()?.scale(2.0)?.add_scalar(1.0)?;
                let den = p.sum_all()?.add_scalar(1.0)?;
                num.div(&den)
            }),
        });
    }

    cases
}

/// Run a set of cases, seeding point sampling deterministically.
pub fn run_cases(cases: &[CheckCase], seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases.iter().map(|c| c.run(&mut rng)).collect()
}

/// Random parameter spot checks for a whole model: samples a handful of
/// parameters from the set instead of sweeping everything.
pub fn spot_check_params(
    set: &ParamSet,
    build: &dyn Fn() -> Result<Var>,
    num_params: usize,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, bool)> {
    set.zero_grads();
    let loss = build()?;
    loss.backward()?;
    let all: Vec<&Parameter> = set.iter().collect();
    let mut max_rel = 0.0f64;
    for _ in 0..num_params {
        let p = all[rng.gen_range(0..all.len())];
        let ga = p.grad();
        let i = rng.gen_range(0..p.numel());
        let g_fd = central_difference(p, i, build)?;
        let rel = (ga.data()[i] - g_fd).abs() / g_fd.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok((max_rel, max_rel <= tolerance))
}
