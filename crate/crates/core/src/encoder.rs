//! Stage 2b: window encoder trained on (anchor, augmented positive,
//! pseudo-negative) triples.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::boundary_rl::Pools;
use crate::checkpoint::Checkpoint;
use crate::data::{augment_batch, AugmentConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    build_optimizer, Activation, Graph, Mlp, OptimizerKind, ParamSet, Tensor, Var,
};
use crate::scalar::Scalar;

pub const CHECKPOINT_KIND: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub window: usize,
    pub dims: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl EncoderConfig {
    pub fn new(window: usize, dims: usize) -> Self {
        Self {
            window,
            dims,
            hidden: 64,
            embed: 16,
        }
    }
}

/// Flatten, two hidden ReLU layers, linear head, projection to the unit sphere.
#[derive(Clone, Debug)]
pub struct TripletEncoder<T> {
    config: EncoderConfig,
    mlp: Mlp,
    params: ParamSet<T>,
}

impl<T: Scalar> TripletEncoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.window == 0 || config.dims == 0 || config.hidden == 0 || config.embed == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        let mlp = Self::layout(&config);
        let mut params = ParamSet::new();
        mlp.init(&mut params, rng)?;
        Ok(Self {
            config,
            mlp,
            params,
        })
    }

    fn layout(c: &EncoderConfig) -> Mlp {
        Mlp::new(
            "encoder",
            &[c.window * c.dims, c.hidden, c.hidden, c.embed],
            Activation::Relu,
        )
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// `[B, w, D]` windows to `[B, d_e]` unit embeddings.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != c.window || shape[2] != c.dims {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: vec![0, c.window, c.dims],
                rhs: shape,
            });
        }
        let flat = g.reshape(x, &[shape[0], c.window * c.dims])?;
        let h = self.mlp.forward(g, &self.params, flat)?;
        g.normalize_rows(h)
    }

    /// Embeds a `[B, w, D]` batch.
    pub fn embed_batch(&self, windows: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(windows.detached())?;
        let z = self.forward(&mut g, x)?;
        Ok(g.value(z).detached())
    }

    /// Embeds one `[w, D]` window.
    pub fn embed(&self, window: &Tensor<T>) -> Result<Vec<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(window.shape());
        Ok(self
            .embed_batch(&window.detached().reshape(&shape)?)?
            .into_data())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.params)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let ck = ck.expect_kind(CHECKPOINT_KIND)?;
        Self::from_parts(ck.hyper()?, ck.params()?)
    }

    /// Rebuilds an encoder from its config and a parameter set holding at
    /// least the encoder's tensors.
    pub(crate) fn from_parts(config: EncoderConfig, all: ParamSet<T>) -> Result<Self> {
        let fresh = Self::new(
            config.clone(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        )?;
        let mut params = ParamSet::new();
        for (name, _) in fresh.params.iter() {
            params.register(name, all.get(name)?.detached())?;
        }
        fresh.params.check_layout(&params)?;
        Ok(Self {
            mlp: fresh.mlp,
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

fn batch_rows<T: Scalar>(g: &Graph<T>, v: Var) -> Result<usize> {
    match g.shape(v).first() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::Empty("embedding batch")),
    }
}

/// Mean hinge `max(0, |za - zp| - |za - zn| + m)` over `[B, d]` rows.
pub fn triplet_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    za: Var,
    zp: Var,
    zn: Var,
    margin: T,
) -> Result<Var> {
    batch_rows(g, za)?;
    let dp = g.sub(za, zp)?;
    let dp = g.row_norm(dp)?;
    let dn = g.sub(za, zn)?;
    let dn = g.row_norm(dn)?;
    let gap = g.sub(dp, dn)?;
    let gap = g.add_scalar(gap, margin)?;
    let hinge = g.relu(gap)?;
    g.mean_all(hinge)
}

/// Mean of `|za - zp|^2` over `[B, d]` rows.
pub fn compactness_loss_node<T: Scalar>(g: &mut Graph<T>, za: Var, zp: Var) -> Result<Var> {
    let n = batch_rows(g, za)?;
    let d = g.sub(za, zp)?;
    let sq = g.square(d)?;
    let s = g.sum_all(sq)?;
    g.scale(s, T::one() / T::lit(n as f64))
}

fn eval_on<T: Scalar>(
    tensors: &[&Tensor<T>],
    f: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<T> {
    let mut g = Graph::new();
    let vars = tensors
        .iter()
        .map(|t| g.constant((*t).detached()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

pub fn triplet_loss<T: Scalar>(
    za: &Tensor<T>,
    zp: &Tensor<T>,
    zn: &Tensor<T>,
    margin: T,
) -> Result<T> {
    eval_on(&[za, zp, zn], |g, v| {
        triplet_loss_node(g, v[0], v[1], v[2], margin)
    })
}

pub fn compactness_loss<T: Scalar>(za: &Tensor<T>, zp: &Tensor<T>) -> Result<T> {
    eval_on(&[za, zp], |g, v| compactness_loss_node(g, v[0], v[1]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub lambda: f64,
    /// Triples drawn per epoch, without replacement. `None` uses the whole pool.
    pub samples_per_epoch: Option<usize>,
    pub optimizer: OptimizerKind,
    pub augment: AugmentConfig,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            margin: 0.5,
            lambda: 0.1,
            samples_per_epoch: Some(4096),
            optimizer: OptimizerKind::Adam,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderEpoch {
    pub triplet: f64,
    pub compactness: f64,
    pub total: f64,
}

/// Optimizes `L_tri + lambda * L_com` over the pooled triples.
pub fn train_stage2<T: Scalar, R: Rng + ?Sized>(
    encoder: &mut TripletEncoder<T>,
    pools: &Pools<T>,
    cfg: &EncoderTrainConfig,
    rng: &mut R,
) -> Result<Vec<EncoderEpoch>> {
    if pools.negatives.is_empty() || pools.positives.is_empty() {
        return Err(Error::Empty("triplet pools"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    pools.validate()?;
    let anchors = pools.anchors_tensor()?;
    let negatives = pools.negatives_tensor()?;
    let per = pools.width * pools.dims;
    let mut opt = build_optimizer::<T>(cfg.optimizer, cfg.lr)?;
    let mut order: Vec<usize> = (0..pools.negatives.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let margin = T::lit(cfg.margin);
    let lambda = T::lit(cfg.lambda);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let take = cfg
            .samples_per_epoch
            .map_or(order.len(), |m| m.min(order.len()));
        let (mut tri, mut com, mut tot, mut n) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order[..take].chunks(cfg.batch_size) {
            let a = gather(&anchors, chunk, per, pools)?;
            let p = augment_batch(&a, &cfg.augment, rng);
            let ng = gather(&negatives, chunk, per, pools)?;
            let mut g = Graph::new();
            let xa = g.constant(a)?;
            let xp = g.constant(p)?;
            let xn = g.constant(ng)?;
            let za = encoder.forward(&mut g, xa)?;
            let zp = encoder.forward(&mut g, xp)?;
            let zn = encoder.forward(&mut g, xn)?;
            let lt = triplet_loss_node(&mut g, za, zp, zn, margin)?;
            let lc = compactness_loss_node(&mut g, za, zp)?;
            let lcw = g.scale(lc, lambda)?;
            let total = g.add(lt, lcw)?;
            let (vt, vc, vtot) = (
                g.value(lt).item()?.as_f64(),
                g.value(lc).item()?.as_f64(),
                g.value(total).item()?.as_f64(),
            );
            if !vtot.is_finite() {
                return Err(Error::Divergence {
                    stage: "stage2-encoder",
                    detail: format!("non-finite loss at epoch {epoch}"),
                });
            }
            g.backward(total)?;
            g.write_grads(&mut encoder.params)?;
            opt.step(&mut encoder.params)?;
            let w = chunk.len() as f64;
            tri += vt * w;
            com += vc * w;
            tot += vtot * w;
            n += w;
        }
        let e = EncoderEpoch {
            triplet: tri / n,
            compactness: com / n,
            total: tot / n,
        };
        log::debug!("stage2-encoder epoch {epoch}: {e:?}");
        history.push(e);
    }
    encoder.params.clear_grads();
    Ok(history)
}

fn gather<T: Scalar>(
    src: &Tensor<T>,
    idx: &[usize],
    per: usize,
    pools: &Pools<T>,
) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&src.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(&[idx.len(), pools.width, pools.dims], data)
}

#[cfg(test)]
mod tests {
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::boundary_rl::{NegativeEntry, PoolEntry};

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(&[rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = TripletEncoder::<f64>::new(EncoderConfig::new(10, 2), &mut rng).unwrap();
        let x = Tensor::randn(&[5, 10, 2], 3.0, &mut rng);
        let z = enc.embed_batch(&x).unwrap();
        assert_eq!(z.shape(), &[5, 16]);
        for i in 0..5 {
            let n: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(z, enc.embed_batch(&x).unwrap());
        assert!(enc.embed_batch(&Tensor::zeros(&[1, 9, 2])).is_err());
    }

    #[test]
    fn triplet_examples() {
        let za = t(&[&[1.0, 0.0]]);
        let zp = t(&[&[1.0, 0.1]]);
        let zn = t(&[&[1.0, 1.0]]);
        assert_eq!(triplet_loss(&za, &zp, &zn, 0.5).unwrap(), 0.0);
        assert!((triplet_loss(&za, &zp, &zp, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(triplet_loss(&za, &zp, &zn, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn compactness_examples() {
        let a = t(&[&[0.6, 0.8]]);
        let b = t(&[&[-0.6, -0.8]]);
        assert_eq!(compactness_loss(&a, &a).unwrap(), 0.0);
        assert!((compactness_loss(&a, &b).unwrap() - 4.0).abs() < 1e-12);
    }

    fn toy_pools(rng: &mut ChaCha8Rng) -> Pools<f64> {
        let mut pools = Pools::new(8, 1);
        for i in 0..64 {
            let pos: Vec<f64> = (0..8).map(|t| ((i + t) as f64 * 0.5).sin()).collect();
            let neg: Vec<f64> = pos
                .iter()
                .map(|v| v + rng.random_range(-1.5..1.5))
                .collect();
            pools.positives.push(PoolEntry {
                start: i,
                values: pos,
            });
            pools.negatives.push(NegativeEntry {
                start: i,
                pos_index: i,
                values: neg,
            });
        }
        pools
    }

    #[test]
    fn training_reduces_loss_and_zero_epochs_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pools = toy_pools(&mut rng);
        let mut enc = TripletEncoder::<f64>::new(EncoderConfig::new(8, 1), &mut rng).unwrap();
        let before = enc.params().clone();
        let none = EncoderTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_stage2(&mut enc, &pools, &none, &mut rng)
            .unwrap()
            .is_empty());
        assert_eq!(enc.params(), &before);

        let cfg = EncoderTrainConfig {
            epochs: 40,
            batch_size: 16,
            ..Default::default()
        };
        let hist = train_stage2(&mut enc, &pools, &cfg, &mut rng).unwrap();
        assert!(hist.last().unwrap().total < hist[0].total);
    }

    #[test]
    fn lambda_zero_total_is_triplet() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pools = toy_pools(&mut rng);
        let mut enc = TripletEncoder::<f64>::new(EncoderConfig::new(8, 1), &mut rng).unwrap();
        let cfg = EncoderTrainConfig {
            epochs: 2,
            lambda: 0.0,
            ..Default::default()
        };
        for e in train_stage2(&mut enc, &pools, &cfg, &mut rng).unwrap() {
            assert_eq!(e.total, e.triplet);
        }
    }

    #[test]
    fn empty_pools_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = TripletEncoder::<f64>::new(EncoderConfig::new(8, 1), &mut rng).unwrap();
        let pools = Pools::new(8, 1);
        assert!(train_stage2(&mut enc, &pools, &EncoderTrainConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = TripletEncoder::<f64>::new(EncoderConfig::new(8, 1), &mut rng).unwrap();
        let path = dir.path().join("enc.json");
        enc.save(&path).unwrap();
        let back = TripletEncoder::<f64>::load(&path).unwrap();
        let x = Tensor::randn(&[3, 8, 1], 1.0, &mut rng);
        assert_eq!(enc.embed_batch(&x).unwrap(), back.embed_batch(&x).unwrap());
    }
}
