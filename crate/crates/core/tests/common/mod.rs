#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsad::error::Result;
use tsad::numerics::{Graph, ParamSet, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const TRIALS: usize = 100;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// ‖a − n‖ / max(‖a‖, ‖n‖, 1e-4) over whole gradient vectors. The floor
/// turns the check absolute (1e-8) for gradients that vanish exactly, such as
/// attention key biases, where central differences only see round-off.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-4)
}

/// Reduces an op output to a scalar with fixed random weights so every
/// output element contributes a distinct cotangent.
fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone())?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Central finite differences for an op applied to `inputs`; returns the worst
/// relative error over all inputs.
pub fn check_op<F>(inputs: &[Tensor<f64>], build: F, seed: u64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.variable(t.clone()).unwrap())
            .collect();
        let y = build(&mut g, &vars).unwrap();
        g.shape(y).to_vec()
    };
    let weights = Tensor::randn(&out_shape, 1.0, &mut rng(seed ^ 0xabcdef));

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let y = build(&mut g, &vars).unwrap();
        let l = weighted_sum(&mut g, y, &weights).unwrap();
        g.value(l).item().unwrap()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.variable(t.clone()).unwrap())
        .collect();
    let y = build(&mut g, &vars).unwrap();
    let l = weighted_sum(&mut g, y, &weights).unwrap();
    g.backward(l).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *n = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Finite-difference check of a scalar loss with respect to every tensor in
/// each of `sets`. `loss` must write grads into the sets it is given when
/// `backward` is true and return the loss value.
pub fn check_params<F>(sets: &mut [ParamSet<f64>], loss: F) -> f64
where
    F: Fn(&mut [ParamSet<f64>], bool) -> f64,
{
    loss(sets, true);
    let analytic: Vec<Vec<(String, Vec<f64>)>> = sets
        .iter()
        .map(|s| {
            s.iter()
                .map(|(n, t)| (n.clone(), t.grad().expect("grad written").to_vec()))
                .collect()
        })
        .collect();
    let mut worst: f64 = 0.0;
    for si in 0..sets.len() {
        for (name, a) in &analytic[si] {
            let mut numeric = vec![0.0; a.len()];
            for (j, n) in numeric.iter_mut().enumerate() {
                let orig = sets[si].get(name).unwrap().data()[j];
                sets[si].get_mut(name).unwrap().data_mut()[j] = orig + FD_STEP;
                let lp = loss(sets, false);
                sets[si].get_mut(name).unwrap().data_mut()[j] = orig - FD_STEP;
                let lm = loss(sets, false);
                sets[si].get_mut(name).unwrap().data_mut()[j] = orig;
                *n = (lp - lm) / (2.0 * FD_STEP);
            }
            let e = rel_err(a, &numeric);
            if e > GRAD_REL_TOL {
                eprintln!("{name}: analytic {a:?} numeric {numeric:?}");
            }
            worst = worst.max(e);
        }
    }
    worst
}

pub fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}
