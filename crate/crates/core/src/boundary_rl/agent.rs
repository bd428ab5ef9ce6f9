//! Contextual-bandit actor-critic over controller states.
//!
//! Rewards are one-step, so the critic regresses the immediate reward of a
//! `(state, action)` pair and the actor ascends the critic at its own action.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boundary_rl::controller::{ControllerState, Transition};
use crate::error::{Error, Result};
use crate::numerics::{
    build_optimizer, Activation, Graph, Mlp, Optimizer, OptimizerKind, ParamSet, Tensor, Var,
};
use crate::scalar::Scalar;

/// FIFO ring buffer of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    items: VecDeque<Transition<T>>,
    capacity: usize,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay buffer capacity must be positive"));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        })
    }

    pub fn push(&mut self, t: Transition<T>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition<T>> {
        self.items.iter()
    }

    /// `n` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition<T>> {
        index::sample(rng, self.items.len(), n.min(self.items.len()))
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub minibatch: usize,
    pub sigma: f64,
    pub sigma_decay: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            minibatch: 64,
            sigma: 0.2,
            sigma_decay: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentDiagnostics {
    pub skipped: bool,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

pub struct Agent<T: Scalar> {
    k: usize,
    a_min: T,
    a_max: T,
    /// Losses enter the networks as `ln(l / loss_scale)`.
    loss_scale: T,
    /// The previous step enters as `u / step_scale`.
    step_scale: T,
    sigma: f64,
    sigma_decay: f64,
    minibatch: usize,
    actor: Mlp,
    critic: Mlp,
    actor_params: ParamSet<T>,
    critic_params: ParamSet<T>,
    actor_opt: Box<dyn Optimizer<T> + Send>,
    critic_opt: Box<dyn Optimizer<T> + Send>,
}

impl<T: Scalar> Agent<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        a_min: f64,
        a_max: f64,
        loss_scale: f64,
        step_scale: f64,
        cfg: &AgentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || cfg.hidden == 0 || cfg.minibatch == 0 {
            return Err(Error::invalid("agent sizes must be positive"));
        }
        if !(a_min < a_max) || !(loss_scale > 0.0) || !(step_scale > 0.0) {
            return Err(Error::invalid(
                "agent bounds and scales must be ordered and positive",
            ));
        }
        let input = k + 1;
        let actor = Mlp::new(
            "actor",
            &[input, cfg.hidden, cfg.hidden, 1],
            Activation::Tanh,
        );
        let critic = Mlp::new(
            "critic",
            &[input + 1, cfg.hidden, cfg.hidden, 1],
            Activation::Tanh,
        );
        let mut actor_params = ParamSet::new();
        let mut critic_params = ParamSet::new();
        actor.init(&mut actor_params, rng)?;
        critic.init(&mut critic_params, rng)?;
        Ok(Self {
            k,
            a_min: T::lit(a_min),
            a_max: T::lit(a_max),
            loss_scale: T::lit(loss_scale),
            step_scale: T::lit(step_scale),
            sigma: cfg.sigma,
            sigma_decay: cfg.sigma_decay,
            minibatch: cfg.minibatch,
            actor,
            critic,
            actor_params,
            critic_params,
            actor_opt: build_optimizer(OptimizerKind::Adam, cfg.actor_lr)?,
            critic_opt: build_optimizer(OptimizerKind::Adam, cfg.critic_lr)?,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn decay_sigma(&mut self) {
        self.sigma *= self.sigma_decay;
    }

    pub fn actor_params(&self) -> &ParamSet<T> {
        &self.actor_params
    }

    pub fn critic_params(&self) -> &ParamSet<T> {
        &self.critic_params
    }

    /// Network input for one state.
    pub fn features(&self, state: &ControllerState<T>) -> Result<Vec<T>> {
        if state.losses.len() != self.k {
            return Err(Error::ShapeMismatch {
                op: "agent state",
                lhs: vec![self.k],
                rhs: vec![state.losses.len()],
            });
        }
        let floor = T::lit(1e-12);
        let mut f: Vec<T> = state
            .losses
            .iter()
            .map(|&l| (l.max(floor) / self.loss_scale).ln())
            .collect();
        f.push(state.prev_update / self.step_scale);
        Ok(f)
    }

    fn feature_batch<'a>(
        &self,
        states: impl Iterator<Item = &'a ControllerState<T>>,
    ) -> Result<Tensor<T>> {
        let mut data = Vec::new();
        let mut n = 0;
        for s in states {
            data.extend(self.features(s)?);
            n += 1;
        }
        Tensor::new(&[n, self.k + 1], data)
    }

    /// `a_min + (a_max - a_min) * sigmoid(mlp(s))` for `[n, k+1]` features.
    fn actor_forward(&self, g: &mut Graph<T>, feats: Var) -> Result<Var> {
        let raw = self.actor.forward(g, &self.actor_params, feats)?;
        let squashed = g.sigmoid(raw)?;
        let scaled = g.scale(squashed, self.a_max - self.a_min)?;
        g.add_scalar(scaled, self.a_min)
    }

    fn critic_forward(&self, g: &mut Graph<T>, feats: Var, actions: Var) -> Result<Var> {
        let x = g.concat_last(feats, actions)?;
        self.critic.forward(g, &self.critic_params, x)
    }

    /// Deterministic policy output, always inside `[a_min, a_max]`.
    pub fn act(&self, state: &ControllerState<T>) -> Result<T> {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[1, self.k + 1], self.features(state)?)?)?;
        let a = self.actor_forward(&mut g, f)?;
        Ok(g.value(a).data()[0].max(self.a_min).min(self.a_max))
    }

    /// Policy output plus Gaussian exploration noise, clipped to the bounds.
    pub fn act_explore<R: Rng + ?Sized>(
        &self,
        state: &ControllerState<T>,
        rng: &mut R,
    ) -> Result<T> {
        let a = self.act(state)?;
        let noise = if self.sigma > 0.0 {
            Normal::new(0.0, self.sigma)
                .map_err(|e| Error::invalid(e.to_string()))?
                .sample(rng)
        } else {
            0.0
        };
        Ok((a + T::lit(noise)).max(self.a_min).min(self.a_max))
    }

    /// Predicted reward for a single pair.
    pub fn critic_value(&self, state: &ControllerState<T>, action: T) -> Result<T> {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[1, self.k + 1], self.features(state)?)?)?;
        let a = g.constant(Tensor::new(&[1, 1], vec![action])?)?;
        let q = self.critic_forward(&mut g, f, a)?;
        Ok(g.value(q).data()[0])
    }

    /// One squared-error regression step of the critic on the given transitions.
    pub fn critic_update(&mut self, batch: &[&Transition<T>]) -> Result<T> {
        let n = batch.len();
        let feats = self.feature_batch(batch.iter().map(|t| &t.state))?;
        let actions = Tensor::new(&[n, 1], batch.iter().map(|t| t.action).collect())?;
        let rewards = Tensor::new(&[n, 1], batch.iter().map(|t| t.reward).collect())?;
        let mut g = Graph::new();
        let f = g.constant(feats)?;
        let a = g.constant(actions)?;
        let r = g.constant(rewards)?;
        let q = self.critic_forward(&mut g, f, a)?;
        let d = g.sub(q, r)?;
        let sq = g.square(d)?;
        let loss = g.mean_all(sq)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        g.write_grads(&mut self.critic_params)?;
        self.critic_opt.step(&mut self.critic_params)?;
        Ok(value)
    }

    /// One actor step maximizing `critic(s, pi(s))` for an arbitrary critic
    /// built on the graph from `(features, actions)`.
    pub fn actor_update_with<F>(&mut self, states: &[&ControllerState<T>], critic: F) -> Result<T>
    where
        F: Fn(&mut Graph<T>, Var, Var) -> Result<Var>,
    {
        let feats = self.feature_batch(states.iter().copied())?;
        let mut g = Graph::new();
        let f = g.constant(feats)?;
        let a = self.actor_forward(&mut g, f)?;
        let q = critic(&mut g, f, a)?;
        let m = g.mean_all(q)?;
        let loss = g.neg(m)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        g.write_grads(&mut self.actor_params)?;
        self.actor_opt.step(&mut self.actor_params)?;
        Ok(value)
    }

    fn actor_update(&mut self, states: &[&ControllerState<T>]) -> Result<T> {
        let critic = self.critic.clone();
        let critic_params = self.critic_params.clone();
        self.actor_update_with(states, |g, f, a| {
            let x = g.concat_last(f, a)?;
            critic.forward(g, &critic_params, x)
        })
    }
}

/// Critic regression followed by an actor ascent step on one minibatch.
/// A buffer holding fewer transitions than the minibatch is a no-op.
pub fn agent_update<T: Scalar, R: Rng + ?Sized>(
    agent: &mut Agent<T>,
    buffer: &ReplayBuffer<T>,
    rng: &mut R,
) -> Result<AgentDiagnostics> {
    if buffer.len() < agent.minibatch {
        return Ok(AgentDiagnostics {
            skipped: true,
            ..AgentDiagnostics::default()
        });
    }
    let batch = buffer.sample(agent.minibatch, rng);
    let critic_loss = agent.critic_update(&batch)?;
    let states: Vec<&ControllerState<T>> = batch.iter().map(|t| &t.state).collect();
    let actor_loss = agent.actor_update(&states)?;
    Ok(AgentDiagnostics {
        skipped: false,
        critic_loss: critic_loss.as_f64(),
        actor_loss: actor_loss.as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn transition(step: usize, loss: f64, action: f64, reward: f64) -> Transition<f64> {
        Transition {
            step,
            state: ControllerState {
                losses: vec![loss; 4],
                prev_update: 0.0,
            },
            action,
            update: 0.0,
            reward,
            l_before: loss,
            l_after: loss,
        }
    }

    fn agent(rng: &mut ChaCha8Rng, minibatch: usize) -> Agent<f64> {
        let cfg = AgentConfig {
            minibatch,
            actor_lr: 1e-2,
            critic_lr: 1e-2,
            ..AgentConfig::default()
        };
        Agent::new(4, 0.0, 1.0, 1.0, 0.1, &cfg, rng).unwrap()
    }

    #[test]
    fn ring_buffer_evicts_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(transition(i, 1.0, 0.5, 0.0));
        }
        assert_eq!(b.len(), 3);
        let steps: Vec<usize> = b.iter().map(|t| t.step).collect();
        assert_eq!(steps, vec![2, 3, 4]);
    }

    #[test]
    fn underfull_buffer_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = agent(&mut rng, 8);
        let mut b = ReplayBuffer::new(16).unwrap();
        b.push(transition(0, 1.0, 0.5, 1.0));
        let before = a.actor_params().clone();
        let d = agent_update(&mut a, &b, &mut rng).unwrap();
        assert!(d.skipped);
        assert_eq!(a.actor_params(), &before);
    }

    #[test]
    fn critic_fits_constant_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = agent(&mut rng, 16);
        let mut b = ReplayBuffer::new(64).unwrap();
        for i in 0..64 {
            let loss = 0.5 + 0.01 * i as f64;
            b.push(transition(i, loss, (i % 7) as f64 / 7.0, 0.7));
        }
        let first = agent_update(&mut a, &b, &mut rng).unwrap().critic_loss;
        let mut last = first;
        for _ in 0..400 {
            last = agent_update(&mut a, &b, &mut rng).unwrap().critic_loss;
            assert!(last.is_finite());
        }
        assert!(last < 1e-3, "critic loss {first} -> {last}");
    }

    #[test]
    fn actor_climbs_identity_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = agent(&mut rng, 8);
        let s = transition(0, 0.3, 0.0, 0.0).state;
        let start = a.act(&s).unwrap();
        for _ in 0..300 {
            a.actor_update_with(&[&s], |g, _, act| g.mean_all(act))
                .unwrap();
        }
        let end = a.act(&s).unwrap();
        assert!(end > start && end > 0.95, "{start} -> {end}");
        assert!(end <= 1.0);
    }

    #[test]
    fn exploration_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AgentConfig {
            sigma: 5.0,
            ..AgentConfig::default()
        };
        let a = Agent::<f64>::new(4, 0.2, 0.6, 1.0, 1.0, &cfg, &mut rng).unwrap();
        let s = transition(0, 2.0, 0.0, 0.0).state;
        for _ in 0..200 {
            let x = a.act_explore(&s, &mut rng).unwrap();
            assert!((0.2..=0.6).contains(&x));
        }
    }
}
