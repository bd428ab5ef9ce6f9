//! Central finite-difference checks for every differentiable op.

mod common;

use common::*;
use tsad::numerics::{Graph, Tensor, Var};

type Build = fn(&mut Graph<f64>, &[Var]) -> tsad::error::Result<Var>;

fn run(
    name: &str,
    mut shapes: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>>,
    build: Build,
) {
    run_with(name, &mut shapes, |t| t, build)
}

fn run_with(
    name: &str,
    shapes: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>>,
    transform: fn(Tensor<f64>) -> Tensor<f64>,
    build: Build,
) {
    let mut worst: f64 = 0.0;
    let mut r = rng(name.len() as u64 * 7919);
    for trial in 0..TRIALS {
        let inputs: Vec<Tensor<f64>> = shapes(&mut r)
            .iter()
            .map(|s| {
                assert!(
                    s.iter().product::<usize>() <= 16,
                    "{name}: tensor too large"
                );
                transform(randn(s, &mut r))
            })
            .collect();
        let e = check_op(&inputs, build, trial as u64);
        worst = worst.max(e);
    }
    assert!(
        worst < GRAD_REL_TOL,
        "{name}: worst relative error {worst:e}"
    );
}

fn one(r: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    vec![vec![dim(r, 1, 4), dim(r, 1, 4)]]
}

fn two_same(r: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    let s = vec![dim(r, 1, 4), dim(r, 1, 4)];
    vec![s.clone(), s]
}

#[test]
fn matmul() {
    run(
        "matmul",
        |r| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            vec![vec![m, k], vec![k, n]]
        },
        |g, v| g.matmul(v[0], v[1]),
    );
}

#[test]
fn batch_matmul() {
    run(
        "batch_matmul",
        |r| {
            let (b, m, k, n) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 2), dim(r, 1, 3));
            vec![vec![b, m, k], vec![b, k, n]]
        },
        |g, v| g.batch_matmul(v[0], v[1], false),
    );
}

#[test]
fn batch_matmul_transposed() {
    run(
        "batch_matmul_t",
        |r| {
            let (b, m, k, n) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 2), dim(r, 1, 3));
            vec![vec![b, m, k], vec![b, n, k]]
        },
        |g, v| g.batch_matmul(v[0], v[1], true),
    );
}

#[test]
fn elementwise_binary() {
    run("add", two_same, |g, v| g.add(v[0], v[1]));
    run("sub", two_same, |g, v| g.sub(v[0], v[1]));
    run("mul", two_same, |g, v| g.mul(v[0], v[1]));
}

#[test]
fn broadcasts() {
    let shapes = |r: &mut rand_chacha::ChaCha8Rng| {
        let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
        vec![vec![a, b], vec![b]]
    };
    run("add_bcast", shapes, |g, v| g.add_bcast(v[0], v[1]));
    run("mul_bcast", shapes, |g, v| g.mul_bcast(v[0], v[1]));
    run(
        "add_bcast_3d",
        |r| {
            let (a, b, c) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 2));
            vec![vec![a, b, c], vec![b, c]]
        },
        |g, v| g.add_bcast(v[0], v[1]),
    );
}

#[test]
fn unary() {
    run("scale", one, |g, v| g.scale(v[0], -1.7));
    run("add_scalar", one, |g, v| g.add_scalar(v[0], 0.3));
    run("relu", one, |g, v| g.relu(v[0]));
    run("tanh", one, |g, v| g.tanh(v[0]));
    run("sigmoid", one, |g, v| g.sigmoid(v[0]));
    run("exp", one, |g, v| g.exp(v[0]));
    run("square", one, |g, v| g.square(v[0]));
    run("clamp_min", one, |g, v| g.clamp_min(v[0], 0.1));
    run_with(
        "ln",
        &mut one,
        |t| t.map(|x| x.abs() + 0.2),
        |g, v| g.ln(v[0]),
    );
}

#[test]
fn softmax_and_layer_norm() {
    run("softmax", one, |g, v| g.softmax(v[0]));
    run(
        "layer_norm",
        |r| {
            let (n, d) = (dim(r, 1, 3), dim(r, 2, 4));
            vec![vec![n, d], vec![d], vec![d]]
        },
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn shape_ops() {
    run(
        "reshape",
        |r| vec![vec![dim(r, 1, 4), dim(r, 1, 4)]],
        |g, v| {
            let n = g.value(v[0]).len();
            g.reshape(v[0], &[n])
        },
    );
    run(
        "permute_0213",
        |r| vec![vec![dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 2)]],
        |g, v| g.permute_0213(v[0]),
    );
    run(
        "concat_last",
        |r| {
            let n = dim(r, 1, 3);
            vec![vec![n, dim(r, 1, 3)], vec![n, dim(r, 1, 3)]]
        },
        |g, v| g.concat_last(v[0], v[1]),
    );
}

#[test]
fn reductions() {
    run("sum_all", one, |g, v| g.sum_all(v[0]));
    run("mean_all", one, |g, v| g.mean_all(v[0]));
    run("sum_last", one, |g, v| g.sum_last(v[0]));
    run("min_last", one, |g, v| g.min_last(v[0]));
    run("mean_rows", one, |g, v| g.mean_rows(v[0]));
}

#[test]
fn geometry() {
    run("row_norm", one, |g, v| g.row_norm(v[0]));
    run("normalize_rows", one, |g, v| g.normalize_rows(v[0]));
    run(
        "pairwise_sq_dist",
        |r| {
            let d = dim(r, 1, 4);
            vec![vec![dim(r, 1, 4), d], vec![dim(r, 1, 4), d]]
        },
        |g, v| g.pairwise_sq_dist(v[0], v[1]),
    );
}

#[test]
fn composed_attention_block() {
    // scores = softmax(Q K^T / sqrt(d)), out = scores V
    run(
        "attention",
        |r| {
            let (b, t, d) = (dim(r, 1, 2), dim(r, 2, 3), dim(r, 1, 2));
            vec![vec![b, t, d], vec![b, t, d], vec![b, t, d]]
        },
        |g, v| {
            let s = g.batch_matmul(v[0], v[1], true)?;
            let s = g.scale(s, 0.7)?;
            let p = g.softmax(s)?;
            g.batch_matmul(p, v[2], false)
        },
    );
}

mod model_losses {
    use std::cell::RefCell;

    use super::common::*;
    use tsad::encoder::{compactness_loss_node, triplet_loss_node, EncoderConfig, TripletEncoder};
    use tsad::numerics::{Graph, ParamSet, Tensor, Var};
    use tsad::prototypes::{
        loss_anomaly_node, loss_balance_node, loss_dispersion_node, loss_normal_node, BankConfig,
        PrototypeBank,
    };
    use tsad::recon::{ReconConfig, ReconModel};

    const W: usize = 4;
    const K: usize = 3;
    const EMBED: usize = 4;

    fn batch(b: usize, r: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
        randn(&[b, W, 1], r)
    }

    #[test]
    pub(super) fn reconstruction_loss_wrt_theta() {
        let mut worst: f64 = 0.0;
        for trial in 0..TRIALS {
            let mut r = rng(1000 + trial as u64);
            let cfg = ReconConfig {
                window: W,
                dims: 1,
                hidden: 4,
                layers: 1,
                heads: 2,
                ff_hidden: 4,
            };
            let mut m = ReconModel::<f64>::new(cfg, &mut r).unwrap();
            jitter(m.params_mut(), &mut r);
            let model = RefCell::new(m);
            let x = batch(dim(&mut r, 1, 3), &mut r);
            let mut sets = [model.borrow().params().clone()];
            let e = check_params(&mut sets, |s, backward| {
                let mut m = model.borrow_mut();
                *m.params_mut() = s[0].clone();
                if backward {
                    let l = m.loss_and_grad(&x).unwrap();
                    s[0] = m.params().clone();
                    l
                } else {
                    m.loss(&x).unwrap()
                }
            });
            worst = worst.max(e);
        }
        assert!(
            worst < GRAD_REL_TOL,
            "reconstruction loss: worst relative error {worst:e}"
        );
    }

    /// Moves every parameter off its initialization. Zero-initialized biases
    /// let a layer of dead ReLUs emit an exact zero vector, where row
    /// normalization is not differentiable.
    fn jitter(params: &mut ParamSet<f64>, r: &mut rand_chacha::ChaCha8Rng) {
        for (_, t) in params.iter_mut() {
            let noise = randn(t.shape(), r);
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(v, n)| *v += 0.1 * n);
        }
    }

    fn encoder(r: &mut rand_chacha::ChaCha8Rng) -> TripletEncoder<f64> {
        let cfg = EncoderConfig {
            window: W,
            dims: 1,
            hidden: 5,
            embed: EMBED,
        };
        let mut e = TripletEncoder::new(cfg, r).unwrap();
        jitter(e.params_mut(), r);
        e
    }

    /// Checks a loss of encoder embeddings (and optionally prototypes) with
    /// respect to the encoder parameters and the prototype matrix.
    fn check_encoder_loss(
        name: &str,
        with_protos: bool,
        proto_scale: f64,
        loss: fn(&mut Graph<f64>, &[Var], Var) -> Var,
    ) {
        let mut worst: f64 = 0.0;
        for trial in 0..TRIALS {
            let mut r = rng(5000 + trial as u64 + name.len() as u64 * 1_000_003);
            let enc = RefCell::new(encoder(&mut r));
            let b = dim(&mut r, 1, 4);
            let inputs: Vec<Tensor<f64>> = (0..3).map(|_| batch(b, &mut r)).collect();
            let mut protos = ParamSet::new();
            protos
                .register(
                    "prototypes",
                    randn(&[K, EMBED], &mut r).map(|v| v * proto_scale),
                )
                .unwrap();
            let mut sets = vec![enc.borrow().params().clone()];
            if with_protos {
                sets.push(protos);
            }
            let e = check_params(&mut sets, |s, backward| {
                let mut e = enc.borrow_mut();
                *e.params_mut() = s[0].clone();
                let mut g = Graph::new();
                let zs: Vec<Var> = inputs
                    .iter()
                    .map(|x| {
                        let v = g.constant(x.clone()).unwrap();
                        e.forward(&mut g, v).unwrap()
                    })
                    .collect();
                let c = if with_protos {
                    g.param(&s[1], "prototypes").unwrap()
                } else {
                    g.constant(Tensor::zeros(&[K, EMBED])).unwrap()
                };
                let l = loss(&mut g, &zs, c);
                let value = g.value(l).item().unwrap();
                if backward {
                    g.backward(l).unwrap();
                    for set in s.iter_mut() {
                        g.write_grads(set).unwrap();
                    }
                }
                value
            });
            worst = worst.max(e);
        }
        assert!(
            worst < GRAD_REL_TOL,
            "{name}: worst relative error {worst:e}"
        );
    }

    #[test]
    pub(super) fn triplet_loss_wrt_psi() {
        check_encoder_loss("triplet", false, 1.0, |g, z, _| {
            triplet_loss_node(g, z[0], z[1], z[2], 1.5).unwrap()
        });
    }

    #[test]
    pub(super) fn compactness_loss_wrt_psi() {
        check_encoder_loss("compactness", false, 1.0, |g, z, _| {
            compactness_loss_node(g, z[0], z[1]).unwrap()
        });
    }

    #[test]
    pub(super) fn normal_loss_wrt_psi_and_c() {
        check_encoder_loss("normal", true, 0.5, |g, z, c| {
            loss_normal_node(g, z[0], c, 0.3).unwrap()
        });
    }

    #[test]
    pub(super) fn anomaly_loss_wrt_psi_and_c() {
        check_encoder_loss("anomaly", true, 0.5, |g, z, c| {
            loss_anomaly_node(g, z[0], c, 2.5).unwrap()
        });
    }

    #[test]
    pub(super) fn dispersion_loss_wrt_c() {
        check_encoder_loss("dispersion", true, 0.3, |g, _, c| {
            loss_dispersion_node(g, c, 1.0).unwrap()
        });
    }

    #[test]
    pub(super) fn balance_loss_wrt_psi_and_c() {
        check_encoder_loss("balance", true, 0.5, |g, z, c| {
            loss_balance_node(g, z[0], c, 0.3).unwrap()
        });
    }

    #[test]
    pub(super) fn combined_objective_wrt_psi_and_c() {
        let mut worst: f64 = 0.0;
        for trial in 0..TRIALS {
            let mut r = rng(9000 + trial as u64);
            let cfg = BankConfig {
                k: K,
                tau: 0.3,
                margin: 1.0,
                margin_anomaly: Some(2.5),
                margin_dispersion: None,
                alpha: 1.0,
                beta: 0.7,
                gamma: 0.2,
                delta: 0.3,
            };
            let enc = encoder(&mut r);
            let protos = randn(&[K, EMBED], &mut r);
            let bank = RefCell::new(PrototypeBank::new(cfg, enc, protos).unwrap());
            let normal = batch(dim(&mut r, 1, 4), &mut r);
            let pseudo = batch(dim(&mut r, 1, 4), &mut r);
            let mut sets = {
                let mut b = bank.borrow_mut();
                let (e, c) = b.params_mut();
                [e.clone(), c.clone()]
            };
            let e = check_params(&mut sets, |s, backward| {
                let mut b = bank.borrow_mut();
                {
                    let (e, c) = b.params_mut();
                    *e = s[0].clone();
                    *c = s[1].clone();
                }
                if backward {
                    let l = b.loss_and_grad(&normal, &pseudo).unwrap();
                    let (e, c) = b.params_mut();
                    s[0] = e.clone();
                    s[1] = c.clone();
                    l.total
                } else {
                    b.losses(&normal, &pseudo).unwrap().total
                }
            });
            worst = worst.max(e);
        }
        assert!(
            worst < GRAD_REL_TOL,
            "combined objective: worst relative error {worst:e}"
        );
    }
}

/// Every check in this file, for the acceptance report.
#[allow(dead_code)]
pub const SUITE: &[(&str, fn())] = &[
    ("matmul", matmul),
    ("batch_matmul", batch_matmul),
    ("batch_matmul_transposed", batch_matmul_transposed),
    ("elementwise_binary", elementwise_binary),
    ("broadcasts", broadcasts),
    ("unary", unary),
    ("softmax_and_layer_norm", softmax_and_layer_norm),
    ("shape_ops", shape_ops),
    ("reductions", reductions),
    ("geometry", geometry),
    ("composed_attention_block", composed_attention_block),
    (
        "reconstruction_loss_wrt_theta",
        model_losses::reconstruction_loss_wrt_theta,
    ),
    ("triplet_loss_wrt_psi", model_losses::triplet_loss_wrt_psi),
    (
        "compactness_loss_wrt_psi",
        model_losses::compactness_loss_wrt_psi,
    ),
    (
        "normal_loss_wrt_psi_and_c",
        model_losses::normal_loss_wrt_psi_and_c,
    ),
    (
        "anomaly_loss_wrt_psi_and_c",
        model_losses::anomaly_loss_wrt_psi_and_c,
    ),
    ("dispersion_loss_wrt_c", model_losses::dispersion_loss_wrt_c),
    (
        "balance_loss_wrt_psi_and_c",
        model_losses::balance_loss_wrt_psi_and_c,
    ),
    (
        "combined_objective_wrt_psi_and_c",
        model_losses::combined_objective_wrt_psi_and_c,
    ),
];
