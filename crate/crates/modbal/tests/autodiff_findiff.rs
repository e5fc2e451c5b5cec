//! Reverse-mode gradients of every primitive against central finite
//! differences: 100 randomized shape/value cases per primitive, relative
//! error <= 1e-4 at eps = 1e-5.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use modbal::models::{CoalitionMask, FusionKind, ModelConfig, MultiModalModel, PerModality};
use modbal::tensor::{self, finite_diff_gradient, ParamId, Tape, Tensor};
use modbal::trainer::mpjpe_loss;

const EPS: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const CASES: usize = 100;

type Rng8 = ChaCha8Rng;

fn uniform(rng: &mut Rng8, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Uniform values kept away from zero (for relu and div kinks).
fn uniform_away_from_zero(rng: &mut Rng8, shape: &[usize], hi: f64, min_abs: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(min_abs..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Project `out` to a scalar with fixed random weights so every output
/// coordinate participates in the gradient.
fn weighted_loss(tape: Option<&Tape>, out: &Tensor, w: &Tensor) -> Tensor {
    let prod = tensor::mul(tape, out, w).unwrap();
    tensor::sum(tape, &prod).unwrap()
}

/// Check reverse-mode vs finite differences for one case. `build` maps
/// (tape, differentiable inputs) to the primitive's output.
fn check_case<F>(name: &str, rng: &mut Rng8, inputs: Vec<Tensor>, build: F)
where
    F: Fn(Option<&Tape>, &[Tensor]) -> Tensor,
{
    let out_plain = build(None, &inputs);
    let w = uniform(rng, out_plain.shape(), -1.0, 1.0);

    let tape = Tape::new();
    let leafed: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf_param(ParamId(i), t))
        .collect();
    let out = build(Some(&tape), &leafed);
    assert_eq!(out.shape(), out_plain.shape());
    // traced and untraced kernels must agree bit for bit
    assert!(out
        .data()
        .iter()
        .zip(out_plain.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    let loss = weighted_loss(Some(&tape), &out, &w);
    let specs: Vec<(ParamId, Vec<usize>)> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (ParamId(i), t.shape().to_vec()))
        .collect();
    let ad = tape.backward(&loss, &specs).unwrap();

    let params: BTreeMap<ParamId, Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (ParamId(i), t.clone()))
        .collect();
    let fd = finite_diff_gradient(
        |p: &BTreeMap<ParamId, Tensor>| {
            let ins: Vec<Tensor> = (0..inputs.len()).map(|i| p[&ParamId(i)].clone()).collect();
            weighted_loss(None, &build(None, &ins), &w).item()
        },
        &params,
        EPS,
    );

    for i in 0..inputs.len() {
        let a = ad.get(ParamId(i)).unwrap();
        let f = fd.get(ParamId(i)).unwrap();
        for (k, (&av, &fv)) in a.data().iter().zip(f.data()).enumerate() {
            let rel = (av - fv).abs() / av.abs().max(fv.abs()).max(1.0);
            assert!(
                rel <= RTOL,
                "{name}: input {i} coord {k}: ad {av} vs fd {fv} (rel {rel})"
            );
        }
    }
}

fn small_dim(rng: &mut Rng8) -> usize {
    rng.gen_range(1..5)
}

#[test]
fn elementwise_binary_ops_match_finite_differences() {
    let mut rng = Rng8::seed_from_u64(100);
    for case in 0..CASES {
        let shape = vec![small_dim(&mut rng), small_dim(&mut rng) + 1];
        let a = uniform(&mut rng, &shape, -2.0, 2.0);
        let b = match case % 4 {
            3 => uniform_away_from_zero(&mut rng, &shape, 2.5, 0.5), // div denominator
            _ => uniform(&mut rng, &shape, -2.0, 2.0),
        };
        let op = case % 4;
        check_case(["add", "sub", "mul", "div"][op], &mut rng, vec![a, b], move |t, ins| {
            match op {
                0 => tensor::add(t, &ins[0], &ins[1]).unwrap(),
                1 => tensor::sub(t, &ins[0], &ins[1]).unwrap(),
                2 => tensor::mul(t, &ins[0], &ins[1]).unwrap(),
                _ => tensor::div(t, &ins[0], &ins[1]).unwrap(),
            }
        });
    }
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = Rng8::seed_from_u64(101);
    for case in 0..CASES {
        let (m, k, n, bb) = (
            small_dim(&mut rng),
            small_dim(&mut rng),
            small_dim(&mut rng),
            rng.gen_range(1..4),
        );
        let (a, b) = match case % 3 {
            0 => (
                uniform(&mut rng, &[m, k], -1.5, 1.5),
                uniform(&mut rng, &[k, n], -1.5, 1.5),
            ),
            1 => (
                uniform(&mut rng, &[bb, m, k], -1.5, 1.5),
                uniform(&mut rng, &[bb, k, n], -1.5, 1.5),
            ),
            _ => (
                uniform(&mut rng, &[bb, m, k], -1.5, 1.5),
                uniform(&mut rng, &[k, n], -1.5, 1.5),
            ),
        };
        check_case("matmul", &mut rng, vec![a, b], |t, ins| {
            tensor::matmul(t, &ins[0], &ins[1]).unwrap()
        });
    }
}

#[test]
fn relu_matches_finite_differences() {
    let mut rng = Rng8::seed_from_u64(102);
    for _ in 0..CASES {
        let shape = vec![small_dim(&mut rng), small_dim(&mut rng) + 1];
        let x = uniform_away_from_zero(&mut rng, &shape, 2.0, 0.05);
        check_case("relu", &mut rng, vec![x], |t, ins| tensor::relu(t, &ins[0]).unwrap());
    }
}

#[test]
fn softmax_matches_finite_differences() {
    let mut rng = Rng8::seed_from_u64(103);
    for _ in 0..CASES {
        let shape = vec![small_dim(&mut rng), rng.gen_range(2..6)];
        let x = uniform(&mut rng, &shape, -3.0, 3.0);
        check_case("softmax_lastdim", &mut rng, vec![x], |t, ins| {
            tensor::softmax_lastdim(t, &ins[0]).unwrap()
        });
    }
}

#[test]
fn layernorm_matches_finite_differences() {
    let mut rng = Rng8::seed_from_u64(104);
    for _ in 0..CASES {
        let shape = vec![small_dim(&mut rng), rng.gen_range(2..6)];
        let x = uniform(&mut rng, &shape, -3.0, 3.0);
        check_case("layernorm_lastdim", &mut rng, vec![x], |t, ins| {
            tensor::layernorm_lastdim(t, &ins[0]).unwrap()
        });
    }
}

#[test]
fn reductions_match_finite_differences() {
    let mut rng = Rng8::seed_from_u64(105);
    for case in 0..CASES {
        let rank = rng.gen_range(1..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
        let x = uniform(&mut rng, &shape, -2.0, 2.0);
        let axis = if case % 3 == 0 { None } else { Some(rng.gen_range(0..rank)) };
        match case % 2 {
            0 => check_case("sum", &mut rng, vec![x], |t, ins| tensor::sum(t, &ins[0]).unwrap()),
            _ => check_case("mean", &mut rng, vec![x], move |t, ins| {
                tensor::mean(t, &ins[0], axis).unwrap()
            }),
        }
    }
}

#[test]
fn sqrt_square_match_finite_differences() {
    let mut rng = Rng8::seed_from_u64(106);
    for case in 0..CASES {
        let shape = vec![small_dim(&mut rng), small_dim(&mut rng) + 1];
        if case % 2 == 0 {
            let x = uniform(&mut rng, &shape, 0.3, 3.0);
            check_case("sqrt", &mut rng, vec![x], |t, ins| tensor::sqrt(t, &ins[0]).unwrap());
        } else {
            let x = uniform(&mut rng, &shape, -2.0, 2.0);
            check_case("square", &mut rng, vec![x], |t, ins| tensor::square(t, &ins[0]).unwrap());
        }
    }
}

#[test]
fn l2norm_matches_finite_differences() {
    let mut rng = Rng8::seed_from_u64(107);
    for _ in 0..CASES {
        let rows = small_dim(&mut rng);
        let width = rng.gen_range(2..5);
        // keep rows away from the norm's kink at the origin
        let mut x = uniform(&mut rng, &[rows, width], -2.0, 2.0);
        loop {
            let bad = (0..rows).any(|r| {
                x.data()[r * width..(r + 1) * width]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    < 0.3
            });
            if !bad {
                break;
            }
            x = uniform(&mut rng, &[rows, width], -2.0, 2.0);
        }
        check_case("l2norm_lastdim", &mut rng, vec![x], |t, ins| {
            tensor::l2norm_lastdim(t, &ins[0]).unwrap()
        });
    }
}

#[test]
fn concat_matches_finite_differences() {
    let mut rng = Rng8::seed_from_u64(108);
    for _ in 0..CASES {
        let rows = small_dim(&mut rng);
        let parts = rng.gen_range(2..5);
        let inputs: Vec<Tensor> = (0..parts)
            .map(|_| {
                let w = rng.gen_range(1..4);
                uniform(&mut rng, &[rows, w], -2.0, 2.0)
            })
            .collect();
        check_case("concat_lastdim", &mut rng, inputs, |t, ins| {
            let refs: Vec<&Tensor> = ins.iter().collect();
            tensor::concat_lastdim(t, &refs).unwrap()
        });
    }
}

#[test]
fn slice_matches_finite_differences() {
    let mut rng = Rng8::seed_from_u64(109);
    for _ in 0..CASES {
        let rank = rng.gen_range(1..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(2..5)).collect();
        let axis = rng.gen_range(0..rank);
        let len = rng.gen_range(1..=shape[axis]);
        let start = rng.gen_range(0..=shape[axis] - len);
        let x = uniform(&mut rng, &shape, -2.0, 2.0);
        check_case("slice", &mut rng, vec![x], move |t, ins| {
            tensor::slice(t, &ins[0], axis, start, len).unwrap()
        });
    }
}

#[test]
fn transpose_matches_finite_differences() {
    let mut rng = Rng8::seed_from_u64(110);
    for case in 0..CASES {
        let shape = if case % 2 == 0 {
            vec![small_dim(&mut rng) + 1, small_dim(&mut rng) + 1]
        } else {
            vec![small_dim(&mut rng), small_dim(&mut rng) + 1, small_dim(&mut rng) + 1]
        };
        let x = uniform(&mut rng, &shape, -2.0, 2.0);
        check_case("transpose", &mut rng, vec![x], |t, ins| {
            tensor::transpose(t, &ins[0]).unwrap()
        });
    }
}

#[test]
fn broadcast_matches_finite_differences() {
    let mut rng = Rng8::seed_from_u64(111);
    for case in 0..CASES {
        let trailing = vec![small_dim(&mut rng) + 1];
        let mut target = vec![small_dim(&mut rng) + 1];
        if case % 2 == 0 {
            target.push(small_dim(&mut rng));
        }
        target.extend(&trailing);
        let x = uniform(&mut rng, &trailing, -2.0, 2.0);
        let tgt = target.clone();
        check_case("broadcast", &mut rng, vec![x], move |t, ins| {
            tensor::broadcast(t, &ins[0], &tgt).unwrap()
        });
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = Rng8::seed_from_u64(112);
    for _ in 0..20 {
        let x = uniform(&mut rng, &[3, 4], -2.0, 2.0);
        let w = uniform(&mut rng, &[4, 2], -1.0, 1.0);
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));

        let losses = |t: &Tape, xs: &Tensor| {
            let h = tensor::matmul(Some(t), xs, &w).unwrap();
            let l1 = tensor::sum(Some(t), &tensor::square(Some(t), &h).unwrap()).unwrap();
            let l2 = tensor::sum(Some(t), &tensor::relu(Some(t), &h).unwrap()).unwrap();
            (l1, l2)
        };
        let spec = vec![(ParamId(0), vec![3, 4])];

        let grad_of = |which: u8| {
            let tape = Tape::new();
            let xs = tape.leaf_param(ParamId(0), &x);
            let (l1, l2) = losses(&tape, &xs);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => {
                    let s1 = tensor::mul(Some(&tape), &l1, &Tensor::scalar(a)).unwrap();
                    let s2 = tensor::mul(Some(&tape), &l2, &Tensor::scalar(b)).unwrap();
                    tensor::add(Some(&tape), &s1, &s2).unwrap()
                }
            };
            tape.backward(&loss, &spec).unwrap()
        };

        let g1 = grad_of(1);
        let g2 = grad_of(2);
        let gc = grad_of(0);
        for k in 0..12 {
            let expect = a * g1.get(ParamId(0)).unwrap().data()[k]
                + b * g2.get(ParamId(0)).unwrap().data()[k];
            let got = gc.get(ParamId(0)).unwrap().data()[k];
            assert!((expect - got).abs() < 1e-10, "coord {k}: {expect} vs {got}");
        }
    }
}

/// Full model MPJPE loss against the finite-difference oracle.
#[test]
fn model_mpjpe_gradients_match_finite_differences() {
    for fusion in [FusionKind::Concat, FusionKind::ConcatMlp, FusionKind::Attention] {
        let cfg = ModelConfig {
            input_dims: PerModality([4, 3, 3, 2]),
            hidden: vec![4],
            unified_dim: 3,
            joints: 2,
            fusion,
            attn_layers: 1,
            output_scale: 1.0,
        };
        let model = MultiModalModel::new(cfg.clone(), 31);
        let mut rng = Rng8::seed_from_u64(32);
        let inputs = PerModality::from_fn(|m| uniform(&mut rng, &[3, cfg.input_dims[m]], -1.0, 1.0));
        let targets = uniform(&mut rng, &[3, 2, 3], -50.0, 50.0);

        let tape = Tape::new();
        let pred = model.forward(Some(&tape), &inputs, CoalitionMask::FULL).unwrap();
        let loss = mpjpe_loss(Some(&tape), &pred.values, &targets).unwrap();
        let ad = tape.backward(&loss, &model.params().specs()).unwrap();

        let params = model.params().snapshot_values();
        let fd = finite_diff_gradient(
            |p| {
                let mut m2 = model.clone();
                m2.params_mut().restore_values(p);
                let out = m2.forward(None, &inputs, CoalitionMask::FULL).unwrap();
                mpjpe_loss(None, &out.values, &targets).unwrap().item()
            },
            &params,
            EPS,
        );
        for (id, g) in ad.iter() {
            let f = fd.get(id).unwrap();
            for (&av, &fv) in g.data().iter().zip(f.data()) {
                let rel = (av - fv).abs() / av.abs().max(fv.abs()).max(1.0);
                assert!(
                    rel <= RTOL,
                    "{}: param {} ad {av} vs fd {fv}",
                    fusion.name(),
                    model.params().path(id)
                );
            }
        }
    }
}
