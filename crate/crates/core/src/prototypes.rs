//! Stage 3: learnable prototypes refined jointly with the encoder.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderConfig, TripletEncoder};
use crate::error::{Error, Result};
use crate::numerics::{build_optimizer, Graph, OptimizerKind, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

pub const CHECKPOINT_KIND: &str = "bank";
pub const PROTOTYPES: &str = "prototypes";
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub k: usize,
    pub tau: f64,
    pub margin: f64,
    /// Overrides `margin` in the separation term.
    pub margin_anomaly: Option<f64>,
    /// Overrides `margin` in the dispersion term.
    pub margin_dispersion: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            k: 8,
            tau: 0.1,
            margin: 0.5,
            margin_anomaly: None,
            margin_dispersion: None,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            delta: 0.1,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 prototypes, got {}",
                self.k
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("temperature must be positive"));
        }
        let margins = [
            Some(self.margin),
            self.margin_anomaly,
            self.margin_dispersion,
        ];
        if margins.iter().flatten().any(|m| !(*m > 0.0)) {
            return Err(Error::invalid("margins must be positive"));
        }
        if [self.alpha, self.beta, self.gamma, self.delta]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        Ok(())
    }

    pub fn anomaly_margin(&self) -> f64 {
        self.margin_anomaly.unwrap_or(self.margin)
    }

    pub fn dispersion_margin(&self) -> f64 {
        self.margin_dispersion.unwrap_or(self.margin)
    }
}

/// `d_k(z) = |z - c_k|^2` for `z: [n, d]`, `c: [K, d]` giving `[n, K]`.
pub fn distances_node<T: Scalar>(g: &mut Graph<T>, z: Var, c: Var) -> Result<Var> {
    g.pairwise_sq_dist(z, c)
}

/// Soft assignment `softmax(-d / tau)` over prototypes.
pub fn soft_assign_node<T: Scalar>(g: &mut Graph<T>, d: Var, tau: T) -> Result<Var> {
    let logits = g.scale(d, -T::one() / tau)?;
    g.softmax(logits)
}

/// `(1/n) sum_z sum_k alpha_k(z) d_k(z)`.
pub fn loss_normal_node<T: Scalar>(g: &mut Graph<T>, z: Var, c: Var, tau: T) -> Result<Var> {
    let n = rows(g, z)?;
    let d = distances_node(g, z, c)?;
    let a = soft_assign_node(g, d, tau)?;
    let w = g.mul(a, d)?;
    let s = g.sum_all(w)?;
    g.scale(s, T::one() / T::lit(n as f64))
}

/// Mean of `max(0, m - min_k d_k(z))` over pseudo-anomalies.
pub fn loss_anomaly_node<T: Scalar>(g: &mut Graph<T>, z: Var, c: Var, margin: T) -> Result<Var> {
    rows(g, z)?;
    let d = distances_node(g, z, c)?;
    let s = g.min_last(d)?;
    let neg = g.neg(s)?;
    let gap = g.add_scalar(neg, margin)?;
    let h = g.relu(gap)?;
    g.mean_all(h)
}

/// `1/(K(K-1)) sum_{i != j} max(0, m - |c_i - c_j|)^2` over ordered pairs.
pub fn loss_dispersion_node<T: Scalar>(g: &mut Graph<T>, c: Var, margin: T) -> Result<Var> {
    let k = rows(g, c)?;
    if k < 2 {
        return Err(Error::invalid("dispersion needs at least two prototypes"));
    }
    let pairs = k * (k - 1);
    let mut left = vec![T::zero(); pairs * k];
    let mut right = vec![T::zero(); pairs * k];
    let mut p = 0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                left[p * k + i] = T::one();
                right[p * k + j] = T::one();
                p += 1;
            }
        }
    }
    let sl = g.constant(Tensor::new(&[pairs, k], left)?)?;
    let sr = g.constant(Tensor::new(&[pairs, k], right)?)?;
    let ci = g.matmul(sl, c)?;
    let cj = g.matmul(sr, c)?;
    let diff = g.sub(ci, cj)?;
    let dist = g.row_norm(diff)?;
    let neg = g.neg(dist)?;
    let gap = g.add_scalar(neg, margin)?;
    let h = g.relu(gap)?;
    let sq = g.square(h)?;
    g.mean_all(sq)
}

/// `KL(u || uniform) = sum_k u_k ln(u_k K)` with `u` the mean soft assignment.
pub fn loss_balance_node<T: Scalar>(g: &mut Graph<T>, z: Var, c: Var, tau: T) -> Result<Var> {
    rows(g, z)?;
    let k = rows(g, c)?;
    let d = distances_node(g, z, c)?;
    let a = soft_assign_node(g, d, tau)?;
    let u = g.mean_rows(a)?;
    let safe = g.clamp_min(u, T::lit(LOG_FLOOR))?;
    let log = g.ln(safe)?;
    let log = g.add_scalar(log, T::lit(k as f64).ln())?;
    let terms = g.mul(u, log)?;
    g.sum_all(terms)
}

fn rows<T: Scalar>(g: &Graph<T>, v: Var) -> Result<usize> {
    match g.shape(v) {
        [n, _] if *n > 0 => Ok(*n),
        [0, _] => Err(Error::Empty("embedding batch")),
        other => Err(Error::ShapeMismatch {
            op: "prototype loss",
            lhs: vec![0, 0],
            rhs: other.to_vec(),
        }),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage3Losses {
    pub normal: f64,
    pub anomaly: f64,
    pub dispersion: f64,
    pub balance: f64,
    pub total: f64,
    /// Hard-assignment counterpart of `normal`: mean min distance. Logged only.
    pub normal_hard: f64,
}

struct LossVars {
    normal: Var,
    anomaly: Var,
    dispersion: Var,
    balance: Var,
    total: Var,
    normal_hard: Var,
}

#[derive(Clone, Debug)]
pub struct PrototypeBank<T> {
    config: BankConfig,
    encoder: TripletEncoder<T>,
    protos: ParamSet<T>,
}

impl<T: Scalar> PrototypeBank<T> {
    /// Builds a bank from explicit prototype rows, normalized to unit length.
    pub fn new(
        config: BankConfig,
        encoder: TripletEncoder<T>,
        prototypes: Tensor<T>,
    ) -> Result<Self> {
        let mut bank = Self::from_raw(config, encoder, prototypes)?;
        bank.renormalize()?;
        Ok(bank)
    }

    fn from_raw(
        config: BankConfig,
        encoder: TripletEncoder<T>,
        prototypes: Tensor<T>,
    ) -> Result<Self> {
        config.validate()?;
        let shape = prototypes.shape().to_vec();
        if shape.len() != 2 || shape[0] != config.k || shape[1] != encoder.embed_dim() {
            return Err(Error::ShapeMismatch {
                op: "prototypes",
                lhs: vec![config.k, encoder.embed_dim()],
                rhs: shape,
            });
        }
        let mut protos = ParamSet::new();
        protos.register(PROTOTYPES, prototypes.detached())?;
        Ok(Self {
            config,
            encoder,
            protos,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn encoder(&self) -> &TripletEncoder<T> {
        &self.encoder
    }

    pub fn prototypes(&self) -> &Tensor<T> {
        self.protos
            .get(PROTOTYPES)
            .expect("registered at construction")
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    fn renormalize(&mut self) -> Result<()> {
        let c = self.protos.get_mut(PROTOTYPES)?;
        let d = c.shape()[1];
        for row in c.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) {
                return Err(Error::NonFinite("prototype norm"));
            }
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        Ok(())
    }

    /// `[n, K]` squared distances of embeddings to the prototypes.
    pub fn distances(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.detached())?;
        let c = g.constant(self.prototypes().detached())?;
        let d = distances_node(&mut g, zv, c)?;
        Ok(g.value(d).detached())
    }

    pub fn soft_assign(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.detached())?;
        let c = g.constant(self.prototypes().detached())?;
        let d = distances_node(&mut g, zv, c)?;
        let a = soft_assign_node(&mut g, d, T::lit(self.config.tau))?;
        Ok(g.value(a).detached())
    }

    /// Minimum squared prototype distance of each embedding.
    pub fn score_embeddings(&self, z: &Tensor<T>) -> Result<Vec<T>> {
        let d = self.distances(z)?;
        let k = self.config.k;
        Ok(d.data()
            .chunks(k)
            .map(|r| r.iter().copied().fold(T::infinity(), T::min))
            .collect())
    }

    /// Anomaly scores of `[N, w, D]` windows.
    pub fn score_windows(&self, windows: &Tensor<T>) -> Result<Vec<T>> {
        let z = self.encoder.embed_batch(windows)?;
        self.score_embeddings(&z)
    }

    fn build_losses(&self, g: &mut Graph<T>, normal: Var, pseudo: Var) -> Result<LossVars> {
        let cfg = &self.config;
        let zn = self.encoder.forward(g, normal)?;
        let za = self.encoder.forward(g, pseudo)?;
        let c = g.param(&self.protos, PROTOTYPES)?;
        let tau = T::lit(cfg.tau);
        let normal = loss_normal_node(g, zn, c, tau)?;
        let anomaly = loss_anomaly_node(g, za, c, T::lit(cfg.anomaly_margin()))?;
        let dispersion = loss_dispersion_node(g, c, T::lit(cfg.dispersion_margin()))?;
        let balance = loss_balance_node(g, zn, c, tau)?;
        let mut total = g.scale(normal, T::lit(cfg.alpha))?;
        for (v, w) in [
            (anomaly, cfg.beta),
            (dispersion, cfg.gamma),
            (balance, cfg.delta),
        ] {
            let t = g.scale(v, T::lit(w))?;
            total = g.add(total, t)?;
        }
        let d = distances_node(g, zn, c)?;
        let s = g.min_last(d)?;
        let normal_hard = g.mean_all(s)?;
        Ok(LossVars {
            normal,
            anomaly,
            dispersion,
            balance,
            total,
            normal_hard,
        })
    }

    fn read(g: &Graph<T>, v: &LossVars) -> Result<Stage3Losses> {
        let f = |x: Var| g.value(x).item().map(|t| t.as_f64());
        Ok(Stage3Losses {
            normal: f(v.normal)?,
            anomaly: f(v.anomaly)?,
            dispersion: f(v.dispersion)?,
            balance: f(v.balance)?,
            total: f(v.total)?,
            normal_hard: f(v.normal_hard)?,
        })
    }

    /// All loss terms on one pair of `[B, w, D]` batches, no gradient.
    pub fn losses(&self, normal: &Tensor<T>, pseudo: &Tensor<T>) -> Result<Stage3Losses> {
        let mut g = Graph::new();
        let n = g.constant(normal.detached())?;
        let p = g.constant(pseudo.detached())?;
        let v = self.build_losses(&mut g, n, p)?;
        Self::read(&g, &v)
    }

    /// Total loss with gradients written into the encoder and prototype
    /// parameter sets.
    pub fn loss_and_grad(
        &mut self,
        normal: &Tensor<T>,
        pseudo: &Tensor<T>,
    ) -> Result<Stage3Losses> {
        let mut g = Graph::new();
        let n = g.constant(normal.detached())?;
        let p = g.constant(pseudo.detached())?;
        let v = self.build_losses(&mut g, n, p)?;
        let out = Self::read(&g, &v)?;
        g.backward(v.total)?;
        g.write_grads(self.encoder.params_mut())?;
        g.write_grads(&mut self.protos)?;
        Ok(out)
    }

    pub fn params_mut(&mut self) -> (&mut ParamSet<T>, &mut ParamSet<T>) {
        (self.encoder.params_mut(), &mut self.protos)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut all = self.encoder.params().clone();
        all.register(PROTOTYPES, self.prototypes().detached())?;
        Checkpoint::new(
            CHECKPOINT_KIND,
            &BankHyper {
                bank: self.config.clone(),
                encoder: self.encoder.config().clone(),
            },
            &all,
        )
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let ck = ck.expect_kind(CHECKPOINT_KIND)?;
        let hyper: BankHyper = ck.hyper()?;
        let all = ck.params::<T>()?;
        let protos = all.get(PROTOTYPES)?.detached();
        let encoder = TripletEncoder::from_parts(hyper.encoder, all)?;
        Self::from_raw(hyper.bank, encoder, protos)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHyper {
    bank: BankConfig,
    encoder: EncoderConfig,
}

/// Greedy farthest-point selection of `K` pool embeddings. A random pool
/// point seeds the sweep; the first prototype is the point farthest from it.
pub fn init_prototypes<T: Scalar, R: Rng + ?Sized>(
    encoder: TripletEncoder<T>,
    normal: &Tensor<T>,
    config: BankConfig,
    rng: &mut R,
) -> Result<PrototypeBank<T>> {
    config.validate()?;
    let n = normal.shape().first().copied().unwrap_or(0);
    if n < config.k {
        return Err(Error::invalid(format!(
            "normal pool holds {n} windows, fewer than {} prototypes",
            config.k
        )));
    }
    let z = encoder.embed_batch(normal)?;
    let chosen = farthest_point_indices(&z, config.k, rng.random_range(0..n));
    let rows: Vec<&[T]> = chosen.iter().map(|&i| z.row(i)).collect();
    let protos = Tensor::new(&[config.k, z.shape()[1]], rows.concat())?;
    PrototypeBank::new(config, encoder, protos)
}

/// Indices of `k` rows of `z` picked by farthest-point traversal.
pub fn farthest_point_indices<T: Scalar>(z: &Tensor<T>, k: usize, seed_index: usize) -> Vec<usize> {
    let n = z.shape()[0];
    let sq = |a: usize, b: usize| -> f64 {
        z.row(a)
            .iter()
            .zip(z.row(b))
            .map(|(&x, &y)| (x - y).as_f64().powi(2))
            .sum()
    };
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(i, seed_index)).collect();
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k.min(n) {
        let next = (0..n)
            .filter(|&i| !taken[i])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if nearest[b] >= nearest[i] => Some(b),
                _ => Some(i),
            })
            .expect("fewer picks than points");
        if chosen.is_empty() {
            nearest = vec![f64::INFINITY; n];
        }
        taken[next] = true;
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq(i, next));
        }
    }
    chosen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Encoder learning rate as a multiple of `lr`.
    pub encoder_lr_ratio: f64,
    pub optimizer: OptimizerKind,
}

impl Default for Stage3TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-2,
            encoder_lr_ratio: 0.1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Joint refinement of encoder and prototypes. Each step pairs a batch of
/// normal windows with an equally sized batch of pseudo-anomalies, cycling
/// through the pseudo pool. Returns per-epoch mean loss terms.
pub fn train_stage3<T: Scalar, R: Rng + ?Sized>(
    bank: &mut PrototypeBank<T>,
    normal: &Tensor<T>,
    pseudo: &Tensor<T>,
    cfg: &Stage3TrainConfig,
    rng: &mut R,
) -> Result<Vec<Stage3Losses>> {
    let n = normal.shape().first().copied().unwrap_or(0);
    let m = pseudo.shape().first().copied().unwrap_or(0);
    if n == 0 || m == 0 {
        return Err(Error::Empty("stage 3 pools"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut enc_opt = build_optimizer::<T>(cfg.optimizer, cfg.lr * cfg.encoder_lr_ratio)?;
    let mut proto_opt = build_optimizer::<T>(cfg.optimizer, cfg.lr)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut pseudo_order: Vec<usize> = (0..m).collect();
    pseudo_order.shuffle(rng);
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut acc = Stage3Losses::default();
        let mut seen = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut pidx = Vec::with_capacity(chunk.len());
            while pidx.len() < chunk.len() {
                if cursor == m {
                    pseudo_order.shuffle(rng);
                    cursor = 0;
                }
                pidx.push(pseudo_order[cursor]);
                cursor += 1;
            }
            let nb = take_rows(normal, chunk)?;
            let pb = take_rows(pseudo, &pidx)?;
            let l = bank.loss_and_grad(&nb, &pb)?;
            if !l.total.is_finite() {
                return Err(Error::Divergence {
                    stage: "stage3",
                    detail: format!("non-finite total loss at epoch {epoch}"),
                });
            }
            let (enc, protos) = bank.params_mut();
            enc_opt.step(enc)?;
            proto_opt.step(protos)?;
            bank.renormalize()?;
            let w = chunk.len() as f64;
            acc.normal += l.normal * w;
            acc.anomaly += l.anomaly * w;
            acc.dispersion += l.dispersion * w;
            acc.balance += l.balance * w;
            acc.total += l.total * w;
            acc.normal_hard += l.normal_hard * w;
            seen += w;
        }
        let e = Stage3Losses {
            normal: acc.normal / seen,
            anomaly: acc.anomaly / seen,
            dispersion: acc.dispersion / seen,
            balance: acc.balance / seen,
            total: acc.total / seen,
            normal_hard: acc.normal_hard / seen,
        };
        log::debug!("stage3 epoch {epoch}: {e:?}");
        history.push(e);
    }
    let (enc, protos) = bank.params_mut();
    enc.clear_grads();
    protos.clear_grads();
    Ok(history)
}

/// Gathers rows along the first axis.
pub fn take_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let n = t.shape().first().copied().unwrap_or(0);
    let per = t.len().checked_div(n).unwrap_or(0);
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        if i >= n {
            return Err(Error::invalid(format!("row {i} out of range {n}")));
        }
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data)
}
