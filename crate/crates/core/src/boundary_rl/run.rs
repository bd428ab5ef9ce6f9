//! The Stage 2 control loop: signed manual updates of the reconstructor and
//! harvesting of boundary pseudo-anomalies.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boundary_rl::agent::{agent_update, Agent, AgentConfig, AgentDiagnostics, ReplayBuffer};
use crate::boundary_rl::controller::{build_state, reward, signed_step, BandConfig, Transition};
use crate::checkpoint::{Checkpoint, FORMAT, VERSION};
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, TensorRecord};
use crate::recon::ReconModel;
use crate::scalar::Scalar;

/// Loss above `DIVERGENCE_FACTOR * L_up` aborts the run.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    #[default]
    Learned,
    /// Uniform actions in `[a_min, a_max]`, no agent updates. Ablation baseline.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub k: usize,
    pub buffer_capacity: usize,
    /// Band bounds as multiples of the final pretraining loss.
    pub band_low: f64,
    pub band_up: f64,
    /// Explicit base step sizes. When unset they are calibrated from the
    /// gradient of the pretrained model, see [`calibrate_step`].
    pub eta_pos: Option<f64>,
    pub eta_neg: Option<f64>,
    pub eta_fraction: f64,
    /// Caps the parameter displacement `|u| * |grad|` of every step at this
    /// multiple of the full-action displacement on the first batch. Ascent
    /// steps grow the gradient, so an uncapped fixed step can overshoot.
    /// `None` disables the cap.
    pub step_cap: Option<f64>,
    pub controller: ControllerKind,
    pub pool_all: bool,
    pub ephemeral_theta: bool,
    pub agent: AgentConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            k: 8,
            buffer_capacity: 4096,
            band_low: 20.0,
            band_up: 60.0,
            eta_pos: None,
            eta_neg: None,
            eta_fraction: 0.1,
            step_cap: Some(1.0),
            controller: ControllerKind::Learned,
            pool_all: false,
            ephemeral_theta: false,
            agent: AgentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry<T> {
    pub start: usize,
    pub values: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeEntry<T> {
    /// Start index of the source window.
    pub start: usize,
    /// Index of the source window in the positive pool.
    pub pos_index: usize,
    pub values: Vec<T>,
}

/// Normal windows and their pseudo-anomalous counterparts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pools<T> {
    pub width: usize,
    pub dims: usize,
    pub positives: Vec<PoolEntry<T>>,
    pub negatives: Vec<NegativeEntry<T>>,
}

impl<T: Scalar> Pools<T> {
    pub fn new(width: usize, dims: usize) -> Self {
        Self {
            width,
            dims,
            positives: Vec::new(),
            negatives: Vec::new(),
        }
    }

    fn gather<'a>(&self, rows: impl Iterator<Item = &'a [T]>) -> Result<Tensor<T>>
    where
        T: 'a,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            data.extend_from_slice(r);
            n += 1;
        }
        Tensor::new(&[n, self.width, self.dims], data)
    }

    pub fn positives_tensor(&self) -> Result<Tensor<T>> {
        self.gather(self.positives.iter().map(|p| p.values.as_slice()))
    }

    pub fn negatives_tensor(&self) -> Result<Tensor<T>> {
        self.gather(self.negatives.iter().map(|p| p.values.as_slice()))
    }

    /// Positive pool windows paired with each negative, in negative order.
    pub fn anchors_tensor(&self) -> Result<Tensor<T>> {
        self.gather(
            self.negatives
                .iter()
                .map(|n| self.positives[n.pos_index].values.as_slice()),
        )
    }

    /// Start indices of the distinct positive windows with the first pool
    /// position holding each.
    pub fn unique_positives(&self) -> Result<Tensor<T>> {
        let mut seen = std::collections::BTreeMap::new();
        for (i, p) in self.positives.iter().enumerate() {
            seen.entry(p.start).or_insert(i);
        }
        self.gather(seen.values().map(|&i| self.positives[i].values.as_slice()))
    }

    /// Positive windows repeat across epochs, so the checkpoint stores each
    /// distinct window once and maps pool entries to rows.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut rows: Vec<usize> = Vec::new();
        let mut by_start: std::collections::HashMap<usize, Vec<usize>> =
            std::collections::HashMap::new();
        let mut positive_rows = Vec::with_capacity(self.positives.len());
        for (i, p) in self.positives.iter().enumerate() {
            let candidates = by_start.entry(p.start).or_default();
            let row = match candidates
                .iter()
                .find(|&&r| self.positives[rows[r]].values == p.values)
            {
                Some(&r) => r,
                None => {
                    rows.push(i);
                    candidates.push(rows.len() - 1);
                    rows.len() - 1
                }
            };
            positive_rows.push(row);
        }
        let hyper = PoolIndex {
            width: self.width,
            dims: self.dims,
            positive_starts: self.positives.iter().map(|p| p.start).collect(),
            positive_rows,
            negative_starts: self.negatives.iter().map(|n| n.start).collect(),
            negative_pos_index: self.negatives.iter().map(|n| n.pos_index).collect(),
        };
        Ok(Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: POOLS_KIND.to_string(),
            hyper: serde_json::to_value(hyper)?,
            tensors: vec![
                TensorRecord::from_tensor(
                    "positives",
                    &self.gather(rows.iter().map(|&i| self.positives[i].values.as_slice()))?,
                ),
                TensorRecord::from_tensor("negatives", &self.negatives_tensor()?),
            ],
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let ck = ck.expect_kind(POOLS_KIND)?;
        let idx: PoolIndex = ck.hyper()?;
        let find = |name: &str| -> Result<Tensor<T>> {
            ck.tensors
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("pool checkpoint lacks `{name}`")))?
                .to_tensor()
        };
        let (pos, neg) = (find("positives")?, find("negatives")?);
        let per = idx.width * idx.dims;
        let distinct = pos.len() / per.max(1);
        if pos.len() != distinct * per
            || idx.positive_rows.len() != idx.positive_starts.len()
            || idx.positive_rows.iter().any(|&r| r >= distinct)
            || neg.len() != idx.negative_starts.len() * per
            || idx.negative_starts.len() != idx.negative_pos_index.len()
        {
            return Err(Error::Checkpoint(
                "pool checkpoint sizes are inconsistent".into(),
            ));
        }
        let pools = Self {
            width: idx.width,
            dims: idx.dims,
            positives: idx
                .positive_starts
                .iter()
                .zip(&idx.positive_rows)
                .map(|(&start, &r)| PoolEntry {
                    start,
                    values: pos.data()[r * per..(r + 1) * per].to_vec(),
                })
                .collect(),
            negatives: idx
                .negative_starts
                .iter()
                .zip(&idx.negative_pos_index)
                .enumerate()
                .map(|(i, (&start, &pos_index))| NegativeEntry {
                    start,
                    pos_index,
                    values: neg.data()[i * per..(i + 1) * per].to_vec(),
                })
                .collect(),
        };
        pools.validate()?;
        Ok(pools)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Checks the pairing invariant between the pools.
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.dims;
        for neg in &self.negatives {
            let pos = self.positives.get(neg.pos_index).ok_or_else(|| {
                Error::invalid(format!(
                    "negative refers to missing positive {}",
                    neg.pos_index
                ))
            })?;
            if pos.start != neg.start {
                return Err(Error::invalid("negative and positive start indices differ"));
            }
            if neg.values.len() != n {
                return Err(Error::invalid("pooled window has the wrong size"));
            }
        }
        if self.positives.iter().any(|p| p.values.len() != n) {
            return Err(Error::invalid("pooled window has the wrong size"));
        }
        Ok(())
    }
}

pub const POOLS_KIND: &str = "pools";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolIndex {
    width: usize,
    dims: usize,
    positive_starts: Vec<usize>,
    positive_rows: Vec<usize>,
    negative_starts: Vec<usize>,
    negative_pos_index: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlSummary {
    pub steps: usize,
    pub in_band_fraction: f64,
    pub mean_reward: f64,
    pub positives: usize,
    pub negatives: usize,
    pub eta_pos: f64,
    pub eta_neg: f64,
    pub final_sigma: f64,
}

pub struct RlOutcome<T> {
    pub pools: Pools<T>,
    pub trajectory: Vec<Transition<T>>,
    pub agent_diagnostics: Vec<AgentDiagnostics>,
    pub summary: RlSummary,
}

/// Result of one signed manual update on a batch.
pub struct ManualUpdate<T> {
    pub l_before: T,
    pub l_after: T,
    /// Reconstructions of the batch by the updated model.
    pub reconstruction: Tensor<T>,
}

/// `theta <- theta - u * grad L_rec(batch)`, with the gradient taken at the
/// current parameters. The change stays on the model.
pub fn apply_manual_update<T: Scalar>(
    model: &mut ReconModel<T>,
    batch: &Tensor<T>,
    u: T,
) -> Result<ManualUpdate<T>> {
    if !u.is_finite() {
        return Err(Error::NonFinite("signed step"));
    }
    let (l_before, out) = model.loss_grad_with_output(batch)?;
    step_with_grads(model, batch, u, None, l_before, out)
}

fn step_with_grads<T: Scalar>(
    model: &mut ReconModel<T>,
    batch: &Tensor<T>,
    u: T,
    max_norm: Option<f64>,
    l_before: T,
    out: Tensor<T>,
) -> Result<ManualUpdate<T>> {
    if u == T::zero() {
        return Ok(ManualUpdate {
            l_before,
            l_after: l_before,
            reconstruction: out,
        });
    }
    let g = model.params().grad_sq_norm()?.as_f64().sqrt();
    if !g.is_finite() {
        return Err(Error::NonFinite("reconstruction gradient"));
    }
    let mut u = u;
    if let Some(cap) = max_norm {
        let disp = u.as_f64().abs() * g;
        if disp > cap {
            u = u * T::lit(cap / disp);
        }
    }
    model.params_mut().add_scaled_grads(-u)?;
    let (l_after, reconstruction) = model.loss_with_output(batch)?;
    Ok(ManualUpdate {
        l_before,
        l_after,
        reconstruction,
    })
}

/// Pseudo-anomalous counterparts `M_theta(x)` of a positive batch.
pub fn generate_negatives<T: Scalar>(
    model: &ReconModel<T>,
    positives: &Tensor<T>,
) -> Result<Tensor<T>> {
    model.reconstruct(positives)
}

/// Base step that moves the loss by about `fraction` of the band width at
/// full action, to first order: `fraction * (L_up - L_low) / |grad|^2`.
pub fn calibrate_step<T: Scalar>(
    model: &mut ReconModel<T>,
    batch: &Tensor<T>,
    band_width: f64,
    fraction: f64,
) -> Result<f64> {
    model.loss_and_grad(batch)?;
    let g2 = model.params().grad_sq_norm()?.as_f64();
    model.params_mut().clear_grads();
    if !(g2 > 0.0) || !g2.is_finite() {
        return Err(Error::invalid(
            "cannot calibrate step size from a zero gradient",
        ));
    }
    Ok(fraction * band_width / g2)
}

pub fn run_stage2_rl<T: Scalar, R: Rng + ?Sized>(
    model: &mut ReconModel<T>,
    agent: &mut Agent<T>,
    windows: &WindowSet<T>,
    cfg: &RlConfig,
    band: &BandConfig,
    rng: &mut R,
) -> Result<RlOutcome<T>> {
    band.validate()?;
    if cfg.batch_size == 0 || cfg.k == 0 {
        return Err(Error::invalid("batch size and k must be positive"));
    }
    let mut pools = Pools::new(windows.width(), windows.dims());
    let mut trajectory = Vec::new();
    let mut diagnostics = Vec::new();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut history: VecDeque<T> = VecDeque::with_capacity(cfg.k);
    let mut prev_u = T::zero();
    let per_window = windows.width() * windows.dims();
    let limit = DIVERGENCE_FACTOR * band.l_up;
    let mut max_norm: Option<f64> = None;

    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..cfg.epochs {
        if windows.is_empty() {
            break;
        }
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = windows.batch(chunk)?;
            let snapshot = cfg.ephemeral_theta.then(|| model.params().snapshot());
            let (l_before, out) = model
                .loss_grad_with_output(&batch)
                .map_err(|e| rl_error(epoch, e))?;
            if history.len() == cfg.k {
                history.pop_front();
            }
            history.push_back(l_before);
            let hist: Vec<T> = history.iter().copied().collect();
            let state = build_state(&hist, prev_u, cfg.k)?;
            let action = match cfg.controller {
                ControllerKind::Learned => agent.act_explore(&state, rng)?,
                ControllerKind::Random => T::lit(rng.random_range(band.a_min..=band.a_max)),
            };
            let u = signed_step(action, l_before, band);
            if max_norm.is_none() {
                if let Some(c) = cfg.step_cap {
                    let g = model.params().grad_sq_norm()?.as_f64().sqrt();
                    max_norm = Some(c * band.eta_pos.max(band.eta_neg) * band.a_max * g);
                }
            }
            let step = step_with_grads(model, &batch, u, max_norm, l_before, out)
                .map_err(|e| rl_error(epoch, e))?;
            let l_after = step.l_after;
            log::trace!(
                "rl step {}: l_before {:.6} a {:.4} u {:.3e} l_after {:.6}",
                trajectory.len(),
                l_before.as_f64(),
                action.as_f64(),
                u.as_f64(),
                l_after.as_f64()
            );
            if !l_after.is_finite() || l_after.as_f64() > limit {
                return Err(Error::Divergence {
                    stage: "stage2-rl",
                    detail: format!(
                        "reconstruction loss {} exceeds {limit:.4e} at step {}",
                        l_after.as_f64(),
                        trajectory.len()
                    ),
                });
            }

            let pooled = cfg.pool_all || u < T::zero() || l_after.as_f64() > band.l_low;
            for (j, &wi) in chunk.iter().enumerate() {
                let pos_index = pools.positives.len();
                let start = windows.starts()[wi];
                pools.positives.push(PoolEntry {
                    start,
                    values: windows.window(wi).to_vec(),
                });
                if pooled {
                    pools.negatives.push(NegativeEntry {
                        start,
                        pos_index,
                        values: step.reconstruction.data()[j * per_window..(j + 1) * per_window]
                            .to_vec(),
                    });
                }
            }
            if let Some(s) = snapshot {
                model.params_mut().restore(&s);
            }

            let r = reward(l_before, l_after, band);
            let t = Transition {
                step: trajectory.len(),
                state,
                action,
                update: u,
                reward: r,
                l_before,
                l_after,
            };
            buffer.push(t.clone());
            trajectory.push(t);
            if cfg.controller == ControllerKind::Learned {
                diagnostics.push(agent_update(agent, &buffer, rng)?);
            }
            prev_u = u;
        }
        agent.decay_sigma();
        log::debug!(
            "stage2-rl epoch {epoch}: {} steps, {} negatives pooled",
            trajectory.len(),
            pools.negatives.len()
        );
    }
    model.params_mut().clear_grads();

    let steps = trajectory.len();
    let in_band = trajectory.iter().filter(|t| t.in_band(band)).count();
    let summary = RlSummary {
        steps,
        in_band_fraction: if steps == 0 {
            0.0
        } else {
            in_band as f64 / steps as f64
        },
        mean_reward: if steps == 0 {
            0.0
        } else {
            trajectory.iter().map(|t| t.reward.as_f64()).sum::<f64>() / steps as f64
        },
        positives: pools.positives.len(),
        negatives: pools.negatives.len(),
        eta_pos: band.eta_pos,
        eta_neg: band.eta_neg,
        final_sigma: agent.sigma(),
    };
    Ok(RlOutcome {
        pools,
        trajectory,
        agent_diagnostics: diagnostics,
        summary,
    })
}

fn rl_error(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Divergence {
            stage: "stage2-rl",
            detail: format!("non-finite value in {op} during epoch {epoch}"),
        },
        other => other,
    }
}

#[derive(Serialize)]
struct TrajectoryRow {
    step: usize,
    l_before: f64,
    action: f64,
    u: f64,
    l_after: f64,
    reward: f64,
    in_band: u8,
}

pub fn write_trajectory_csv<T: Scalar>(
    path: impl AsRef<Path>,
    trajectory: &[Transition<T>],
    band: &BandConfig,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    for t in trajectory {
        w.serialize(TrajectoryRow {
            step: t.step,
            l_before: t.l_before.as_f64(),
            action: t.action.as_f64(),
            u: t.update.as_f64(),
            l_after: t.l_after.as_f64(),
            reward: t.reward.as_f64(),
            in_band: u8::from(t.in_band(band)),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn new_agent<T: Scalar, R: Rng + ?Sized>(
    cfg: &RlConfig,
    band: &BandConfig,
    rng: &mut R,
) -> Result<Agent<T>> {
    Agent::new(
        cfg.k,
        band.a_min,
        band.a_max,
        band.target,
        band.eta_pos.max(band.eta_neg),
        &cfg.agent,
        rng,
    )
}
