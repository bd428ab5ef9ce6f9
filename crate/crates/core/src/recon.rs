//! Stage 1: the window reconstruction model and its pretraining loop.
//!
//! Architecture, per window `[w, D]`:
//! linear input map `D -> h`, a residual feed-forward feature block, fixed
//! sinusoidal positional encoding, `S` pre-norm self-attention blocks with
//! `A` heads, and a linear output map `h -> D` at every position.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::numerics::{
    build_optimizer, Activation, Graph, Linear, Mlp, OptimizerKind, ParamSet, Tensor, Var,
};
use crate::scalar::Scalar;

pub const CHECKPOINT_KIND: &str = "recon";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub window: usize,
    pub dims: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Inner width of the attention blocks' feed-forward sublayer.
    pub ff_hidden: usize,
}

impl ReconConfig {
    pub fn new(window: usize, dims: usize) -> Self {
        Self {
            window,
            dims,
            hidden: 16,
            layers: 2,
            heads: 2,
            ff_hidden: 32,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.dims == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(Error::invalid(
                "reconstruction model dimensions must be positive",
            ));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    input: Linear,
    feature: Mlp,
    blocks: Vec<AttentionBlock>,
    output: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AttentionBlock {
    name: String,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff: Mlp,
}

impl Layout {
    fn new(c: &ReconConfig) -> Self {
        let h = c.hidden;
        let blocks = (0..c.layers)
            .map(|i| {
                let name = format!("recon.block{i}");
                AttentionBlock {
                    q: Linear::new(format!("{name}.q"), h, h),
                    k: Linear::new(format!("{name}.k"), h, h),
                    v: Linear::new(format!("{name}.v"), h, h),
                    o: Linear::new(format!("{name}.o"), h, h),
                    ff: Mlp::new(
                        &format!("{name}.ff"),
                        &[h, c.ff_hidden, h],
                        Activation::Relu,
                    ),
                    name,
                }
            })
            .collect();
        Self {
            input: Linear::new("recon.input", c.dims, h),
            feature: Mlp::new("recon.feature", &[h, h, h], Activation::Relu),
            blocks,
            output: Linear::new("recon.output", h, c.dims),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconModel<T> {
    config: ReconConfig,
    layout: Layout,
    params: ParamSet<T>,
    positional: Tensor<T>,
}

/// Fixed sinusoidal table `[w, h]`.
pub fn positional_encoding<T: Scalar>(window: usize, hidden: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); window * hidden];
    for pos in 0..window {
        for i in 0..hidden {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / hidden as f64);
            data[pos * hidden + i] = T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[window, hidden], data).expect("table shape")
}

impl<T: Scalar> ReconModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ReconConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = ParamSet::new();
        layout.input.init(&mut params, rng)?;
        layout.feature.init(&mut params, rng)?;
        for b in &layout.blocks {
            for l in [&b.q, &b.k, &b.v, &b.o] {
                l.init(&mut params, rng)?;
            }
            b.ff.init(&mut params, rng)?;
            let h = config.hidden;
            for ln in ["ln1", "ln2"] {
                params.register(
                    &format!("{}.{ln}.gamma", b.name),
                    Tensor::full(&[h], T::one()),
                )?;
                params.register(&format!("{}.{ln}.beta", b.name), Tensor::zeros(&[h]))?;
            }
        }
        layout.output.init(&mut params, rng)?;
        let positional = positional_encoding(config.window, config.hidden);
        Ok(Self {
            config,
            layout,
            params,
            positional,
        })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        if shape.len() != 3 || shape[1] != c.window || shape[2] != c.dims {
            return Err(Error::ShapeMismatch {
                op: "reconstruct",
                lhs: vec![0, c.window, c.dims],
                rhs: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    /// Builds `M(x)` for a `[B, w, D]` input node.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = self.check_input(g.shape(x))?;
        let c = &self.config;
        let (w, h, heads) = (c.window, c.hidden, c.heads);
        let dh = h / heads;
        let p = &self.params;

        let flat = g.reshape(x, &[b * w, c.dims])?;
        let mut z = self.layout.input.forward(g, p, flat)?;
        let f = self.layout.feature.forward(g, p, z)?;
        z = g.add(z, f)?;
        let z3 = g.reshape(z, &[b, w, h])?;
        let pe = g.constant(self.positional.clone())?;
        let z3 = g.add_bcast(z3, pe)?;
        z = g.reshape(z3, &[b * w, h])?;

        let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();
        for blk in &self.layout.blocks {
            let g1 = g.param(p, &format!("{}.ln1.gamma", blk.name))?;
            let b1 = g.param(p, &format!("{}.ln1.beta", blk.name))?;
            let a = g.layer_norm(z, g1, b1)?;
            let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
                let v = g.reshape(v, &[b, w, heads, dh])?;
                let v = g.permute_0213(v)?;
                g.reshape(v, &[b * heads, w, dh])
            };
            let q = blk.q.forward(g, p, a)?;
            let q = split(g, q)?;
            let k = blk.k.forward(g, p, a)?;
            let k = split(g, k)?;
            let v = blk.v.forward(g, p, a)?;
            let v = split(g, v)?;
            let s = g.batch_matmul(q, k, true)?;
            let s = g.scale(s, inv_sqrt)?;
            let attn = g.softmax(s)?;
            let o = g.batch_matmul(attn, v, false)?;
            let o = g.reshape(o, &[b, heads, w, dh])?;
            let o = g.permute_0213(o)?;
            let o = g.reshape(o, &[b * w, h])?;
            let o = blk.o.forward(g, p, o)?;
            z = g.add(z, o)?;

            let g2 = g.param(p, &format!("{}.ln2.gamma", blk.name))?;
            let b2 = g.param(p, &format!("{}.ln2.beta", blk.name))?;
            let a = g.layer_norm(z, g2, b2)?;
            let f = blk.ff.forward(g, p, a)?;
            z = g.add(z, f)?;
        }
        let out = self.layout.output.forward(g, p, z)?;
        g.reshape(out, &[b, w, c.dims])
    }

    /// Reconstructs a single `[w, D]` window or a `[B, w, D]` batch.
    pub fn reconstruct(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let single = input.shape().len() == 2;
        let batch = if single {
            let mut s = vec![1];
            s.extend_from_slice(input.shape());
            input.detached().reshape(&s)?
        } else {
            input.detached()
        };
        let mut g = Graph::new();
        let x = g.constant(batch)?;
        let y = self.forward(&mut g, x)?;
        let out = g.value(y).detached();
        if single {
            out.reshape(input.shape())
        } else {
            Ok(out)
        }
    }

    /// Mean per-window squared error over a `[B, w, D]` batch.
    pub fn loss(&self, batch: &Tensor<T>) -> Result<T> {
        Ok(self.loss_with_output(batch)?.0)
    }

    /// Loss together with the reconstructions.
    pub fn loss_with_output(&self, batch: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        let mut g = Graph::new();
        let x = g.constant(batch.detached())?;
        let y = self.forward(&mut g, x)?;
        let l = recon_loss_node(&mut g, y, x)?;
        Ok((g.value(l).item()?, g.value(y).detached()))
    }

    /// Loss and `dL/dtheta`, written into the parameter grads.
    pub fn loss_and_grad(&mut self, batch: &Tensor<T>) -> Result<T> {
        Ok(self.loss_grad_with_output(batch)?.0)
    }

    /// Like [`Self::loss_and_grad`] but also returns the reconstructions.
    pub fn loss_grad_with_output(&mut self, batch: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        let mut g = Graph::new();
        let x = g.constant(batch.detached())?;
        let y = self.forward(&mut g, x)?;
        let l = recon_loss_node(&mut g, y, x)?;
        let value = g.value(l).item()?;
        let out = g.value(y).detached();
        g.backward(l)?;
        g.write_grads(&mut self.params)?;
        Ok((value, out))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.params)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let ck = ck.expect_kind(CHECKPOINT_KIND)?;
        let config: ReconConfig = ck.hyper()?;
        config.validate()?;
        let params = ck.params::<T>()?;
        let fresh = Self::new(
            config.clone(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        )?;
        fresh.params.check_layout(&params)?;
        Ok(Self {
            layout: fresh.layout,
            positional: positional_encoding(config.window, config.hidden),
            config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// `(1/B) * sum_i ||xhat_i - x_i||^2` for `[B, ...]` tensors.
pub fn recon_loss_node<T: Scalar>(g: &mut Graph<T>, xhat: Var, x: Var) -> Result<Var> {
    let b = g.shape(x).first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::Empty("reconstruction batch"));
    }
    let d = g.sub(xhat, x)?;
    let sq = g.square(d)?;
    let s = g.sum_all(sq)?;
    g.scale(s, T::one() / T::lit(b as f64))
}

/// Loss of `model` on `batch`.
pub fn recon_loss<T: Scalar>(model: &ReconModel<T>, batch: &Tensor<T>) -> Result<T> {
    if batch.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Empty("reconstruction batch"));
    }
    model.loss(batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Trains on every window of `train` and returns the per-epoch mean loss.
pub fn pretrain<T: Scalar, R: Rng + ?Sized>(
    model: &mut ReconModel<T>,
    train: &WindowSet<T>,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Empty("training windows"));
    }
    if train.labels().is_some_and(|l| l.contains(&1)) {
        return Err(Error::invalid(
            "pretraining windows contain labeled anomalies",
        ));
    }
    let mut opt = build_optimizer::<T>(cfg.optimizer, cfg.lr)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk)?;
            let loss = model
                .loss_and_grad(&batch)
                .map_err(|e| diverged(epoch, e))?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(diverged(epoch, Error::NonFinite("reconstruction loss")));
            }
            opt.step(&mut model.params)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("stage1 epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Divergence {
            stage: "stage1",
            detail: format!("non-finite value in {op} at epoch {epoch}; lower the learning rate"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{make_windows, TimeSeries};

    fn tiny() -> ReconConfig {
        ReconConfig {
            window: 4,
            dims: 1,
            hidden: 4,
            layers: 1,
            heads: 2,
            ff_hidden: 4,
        }
    }

    #[test]
    fn output_shape_and_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ReconModel::<f64>::new(ReconConfig::new(20, 2), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 20, 2], 1.0, &mut rng);
        let y = m.reconstruct(&x).unwrap();
        assert_eq!(y.shape(), &[3, 20, 2]);
        assert!(y.is_finite());
        let single = Tensor::randn(&[20, 2], 1.0, &mut rng);
        assert_eq!(m.reconstruct(&single).unwrap().shape(), &[20, 2]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ReconModel::<f64>::new(tiny(), &mut rng).unwrap();
        assert!(m.reconstruct(&Tensor::zeros(&[2, 5, 1])).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ReconModel::<f64>::new(tiny(), &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4, 1], 1.0, &mut rng);
        assert_eq!(m.reconstruct(&x).unwrap(), m.reconstruct(&x).unwrap());
    }

    #[test]
    fn loss_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 1])).unwrap();
        let xh = g.constant(Tensor::full(&[1, 4, 1], 1.0)).unwrap();
        let l = recon_loss_node(&mut g, xh, x).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 4.0);
        let l0 = recon_loss_node(&mut g, x, x).unwrap();
        assert_eq!(g.value(l0).item().unwrap(), 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ReconModel::<f64>::new(tiny(), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 4, 1], 1.0, &mut rng);
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let xx = Tensor::new(&[6, 4, 1], doubled).unwrap();
        let (a, b) = (m.loss(&x).unwrap(), m.loss(&xx).unwrap());
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ReconModel::<f64>::new(tiny(), &mut rng).unwrap();
        assert!(recon_loss(&m, &Tensor::zeros(&[0, 4, 1])).is_err());
    }

    #[test]
    fn learns_zero_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = ReconModel::<f64>::new(ReconConfig::new(8, 1), &mut rng).unwrap();
        let s = TimeSeries::univariate("z", vec![0.0; 64], None).unwrap();
        let w = make_windows(&s, 8, 1).unwrap();
        let cfg = PretrainConfig {
            epochs: 200,
            lr: 1e-2,
            batch_size: 57,
            optimizer: OptimizerKind::Adam,
        };
        let hist = pretrain(&mut m, &w, &cfg, &mut rng).unwrap();
        assert!(hist[199] < hist[0]);
        let zero = Tensor::zeros(&[1, 8, 1]);
        assert!(m.loss(&zero).unwrap() < 1e-2);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = ReconModel::<f64>::new(tiny(), &mut rng).unwrap();
        let before = m.params().clone();
        let s = TimeSeries::univariate("z", vec![0.5; 16], None).unwrap();
        let w = make_windows(&s, 4, 1).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let hist = pretrain(&mut m, &w, &cfg, &mut rng).unwrap();
        assert!(hist.is_empty());
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ReconModel::<f64>::new(tiny(), &mut rng).unwrap();
        let path = dir.path().join("recon.json");
        m.save(&path).unwrap();
        let back = ReconModel::<f64>::load(&path).unwrap();
        let x = Tensor::randn(&[2, 4, 1], 1.0, &mut rng);
        assert_eq!(m.reconstruct(&x).unwrap(), back.reconstruct(&x).unwrap());
    }

    #[test]
    fn generic_over_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = ReconModel::<f32>::new(tiny(), &mut rng).unwrap();
        let y = m
            .reconstruct(&Tensor::<f32>::full(&[1, 4, 1], 0.5))
            .unwrap();
        assert!(y.is_finite());
    }
}
