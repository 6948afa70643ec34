//! Backprop against central differences: every tape primitive, random
//! compositions of them, and whole training losses.

use peftcl_core::harness::gradcheck::{relative_error, tiny_config, training_gradient_check, GradMode};
use peftcl_core::rng::{Seed, StreamId};
use peftcl_core::tensor::finite_difference_gradient;
use peftcl_core::{Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Scalarizes `f` with a fixed random projection and checks every input coordinate.
fn check<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let mut rng = Seed(77).stream(StreamId::named("projection"));
    let proj = Tensor::randn(&probe, 1.0, &mut rng);
    let loss = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    // central differences lose about eps * |terms| / h to cancellation
    let roundoff = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars);
        let magnitude: f64 = tape.value(out).iter().zip(proj.data()).map(|(a, b)| (a * b).abs()).sum();
        64.0 * f64::EPSILON * magnitude.max(1.0) / H
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars);
    let p = tape.constant(probe.clone(), proj.data().to_vec()).unwrap();
    let prod = tape.mul(out, p).unwrap();
    let total = tape.sum(prod);
    let grads = tape.backward(total).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |x| {
                let mut ts = inputs.to_vec();
                ts[k] = x.clone();
                loss(&ts)
            },
            input,
            H,
        );
        let zeros = vec![0.0; input.numel()];
        let analytic = grads.get(vars[k]).unwrap_or(&zeros);
        for (i, (a, n)) in analytic.iter().zip(numeric.data()).enumerate() {
            let e = relative_error(*a, *n, 1e-6);
            assert!(
                e < TOL || (a - n).abs() < roundoff,
                "input {k} coord {i}: analytic {a}, numeric {n}, rel {e}, round-off {roundoff:.1e}"
            );
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Seed(seed).stream(StreamId::named("input")))
}

#[test]
fn matmul_and_batch_matmul() {
    check(&[randn(&[3, 4], 1), randn(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1]).unwrap());
    check(&[randn(&[2, 3, 4], 3), randn(&[2, 4, 5], 4)], |t, v| {
        t.batch_matmul(v[0], v[1], false).unwrap()
    });
    check(&[randn(&[2, 3, 4], 5), randn(&[2, 5, 4], 6)], |t, v| {
        t.batch_matmul(v[0], v[1], true).unwrap()
    });
}

#[test]
fn elementwise() {
    let (a, b) = (randn(&[3, 4], 7), randn(&[3, 4], 8));
    check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check(&[a.clone(), randn(&[4], 9)], |t, v| t.add_bias(v[0], v[1]).unwrap());
    check(std::slice::from_ref(&a), |t, v| t.scale(v[0], -0.7));
    check(std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 2.5));
    check(std::slice::from_ref(&a), |t, v| t.mul_rows(v[0], vec![0.5, 0.0, -2.0]).unwrap());
    check(&[a], |t, v| t.gelu(v[0]));
}

#[test]
fn normalizations_and_losses() {
    check(&[randn(&[3, 5], 10)], |t, v| t.softmax_rows(v[0]).unwrap());
    check(&[randn(&[4, 6], 11), randn(&[6], 12), randn(&[6], 13)], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()
    });
    check(&[randn(&[3, 4], 14)], |t, v| {
        t.cross_entropy_masked(v[0], &[0, 3, 1], &[true, true, false, true]).unwrap()
    });
    check(&[randn(&[3, 4], 15), randn(&[3, 4], 16)], |t, v| t.cosine_rows(v[0], v[1]).unwrap());
    check(&[randn(&[2, 3], 17)], |t, v| t.sum(v[0]));
    check(&[randn(&[2, 3], 18)], |t, v| t.mean(v[0]));
}

#[test]
fn data_movement() {
    let (a, b) = (randn(&[2, 3], 19), randn(&[4, 3], 20));
    check(&[a.clone(), b.clone()], |t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap());
    check(std::slice::from_ref(&b), |t, v| t.select_rows(v[0], &[3, 0, 3]).unwrap());
    check(&[a.clone(), b.clone()], |t, v| {
        t.gather(&[v[0], v[1]], vec![(0, 1), (1, 11), (0, 1), (1, 0)], vec![2, 2]).unwrap()
    });
    check(&[randn(&[6, 4], 21)], |t, v| t.split_heads(v[0], 2, 3, 2).unwrap());
    check(&[randn(&[4, 3, 2], 22)], |t, v| t.merge_heads(v[0], 2, 3, 2).unwrap());
    check(&[a], |t, v| t.reshape(v[0], vec![3, 2]).unwrap());
}

/// One step of a random computation graph over `[3, 3]` values.
#[derive(Debug, Clone)]
enum Step {
    Matmul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Gelu(usize),
    Softmax(usize),
    Norm(usize),
    Scale(usize, f64),
}

fn step() -> impl Strategy<Value = Step> {
    let i = 0usize..16;
    prop_oneof![
        (i.clone(), i.clone()).prop_map(|(a, b)| Step::Matmul(a, b)),
        (i.clone(), i.clone()).prop_map(|(a, b)| Step::Add(a, b)),
        (i.clone(), i.clone()).prop_map(|(a, b)| Step::Mul(a, b)),
        i.clone().prop_map(Step::Gelu),
        i.clone().prop_map(Step::Softmax),
        i.clone().prop_map(Step::Norm),
        (i, -2.0f64..2.0).prop_map(|(a, s)| Step::Scale(a, s)),
    ]
}

fn run_graph(t: &mut Tape, v: &[Var], steps: &[Step]) -> Var {
    let mut nodes = v.to_vec();
    let gain = t.constant(vec![3], vec![1.0, 0.5, 2.0]).unwrap();
    let bias = t.constant(vec![3], vec![0.1, 0.0, -0.1]).unwrap();
    for s in steps {
        let pick = |i: usize| nodes[i % nodes.len()];
        let next = match *s {
            Step::Matmul(a, b) => t.matmul(pick(a), pick(b)).unwrap(),
            Step::Add(a, b) => t.add(pick(a), pick(b)).unwrap(),
            Step::Mul(a, b) => t.mul(pick(a), pick(b)).unwrap(),
            Step::Gelu(a) => t.gelu(pick(a)),
            Step::Softmax(a) => t.softmax_rows(pick(a)).unwrap(),
            Step::Norm(a) => t.layer_norm(pick(a), gain, bias, 1e-3).unwrap(),
            Step::Scale(a, f) => t.scale(pick(a), f),
        };
        nodes.push(next);
    }
    *nodes.last().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_graphs(steps in prop::collection::vec(step(), 1..=6), seed in 0u64..1000) {
        let inputs = [randn(&[3, 3], seed), randn(&[3, 3], seed + 1)];
        check(&inputs, |t, v| run_graph(t, v, &steps));
    }
}

#[test]
fn end_to_end_training_losses() {
    for cfg in [
        tiny_config(),
        tiny_config().conventional(),
        peftcl_core::vit::ViTConfig { bare_blocks: true, ..tiny_config() },
    ] {
        for mode in GradMode::all() {
            if cfg.bare_blocks && mode.name() == "lora" {
                continue;
            }
            let r = training_gradient_check(&mode, &cfg, 120, Seed(3)).unwrap();
            assert_eq!(r.checked, 120);
            assert!(r.max_rel_error < 1e-4, "{} {:?}: {r:?}", mode.name(), cfg.attention_scale);
        }
    }
}
