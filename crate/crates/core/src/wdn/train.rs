use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{config_fingerprint, Checkpoint};
use super::loss::{
    backward_views, identity_regularizer, BatchView, GradientSet, KeyBatch, LossBreakdown, Minibatches, WdnGradients,
};
use super::model::{CriticKey, LossMode, WdnModel};
use super::rmsprop::RmsProp;
use super::WdnError;
use crate::data::{EmbeddingTable, GroupKey};
use crate::scalar::Scalar;

/// How the minimax gradients are formed. Both give identical updates; the
/// reversal form computes one joint gradient of the negated objective and
/// flips the transform part back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    TwoOptimizers,
    GradientReversal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "T: Scalar")]
pub struct TrainConfig<T> {
    /// Samples per side per critic per step.
    pub minibatch: usize,
    /// Gradient penalty weight.
    pub gamma: T,
    /// Critic-only updates before alternation starts.
    pub pretrain_steps: usize,
    pub transform_steps_per_cycle: usize,
    pub critic_steps_per_cycle: usize,
    /// RMSProp normalizes step sizes, so transforms keep drifting at roughly
    /// `lr_transform` per step even when the critics are flat. With one critic
    /// step per 50 transform steps the critics only keep up when
    /// `50 * lr_transform` stays well below `lr_critic`; otherwise the
    /// transforms overshoot and oscillate.
    pub lr_transform: T,
    pub lr_critic: T,
    pub rmsprop_decay: T,
    pub rmsprop_eps: T,
    pub total_cycles: usize,
    /// Cycles between emitted checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Critic hidden width.
    pub hidden: usize,
    pub loss_mode: LossMode,
    /// Weight of `‖M − I‖² + ‖b‖²` added to the transform objective. Zero
    /// disables it.
    pub identity_penalty: T,
    pub objective: Objective,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            minibatch: 100,
            gamma: T::of(10.0),
            pretrain_steps: 100_000,
            transform_steps_per_cycle: 50,
            critic_steps_per_cycle: 1,
            lr_transform: T::of(5e-6),
            lr_critic: T::of(1e-2),
            rmsprop_decay: T::of(0.9),
            rmsprop_eps: T::of(1e-8),
            total_cycles: 2000,
            checkpoint_every: 50,
            seed: 0,
            hidden: 2,
            loss_mode: LossMode::Pairwise,
            identity_penalty: T::zero(),
            objective: Objective::TwoOptimizers,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<(), WdnError> {
        let bad = |m: &str| Err(WdnError::InvalidConfig(m.to_string()));
        let finite_nonneg = |v: T| v.is_finite() && v >= T::zero();
        if self.minibatch < 2 {
            return bad("minibatch must be at least 2");
        }
        if !finite_nonneg(self.gamma) {
            return bad("gamma must be finite and non-negative");
        }
        if !finite_nonneg(self.lr_transform) {
            return bad("lr_transform must be finite and non-negative");
        }
        if !finite_nonneg(self.lr_critic) {
            return bad("lr_critic must be finite and non-negative");
        }
        if !(self.rmsprop_decay >= T::zero() && self.rmsprop_decay < T::one()) {
            return bad("rmsprop_decay must lie in [0, 1)");
        }
        if !(self.rmsprop_eps > T::zero() && self.rmsprop_eps.is_finite()) {
            return bad("rmsprop_eps must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if !finite_nonneg(self.identity_penalty) {
            return bad("identity_penalty must be finite and non-negative");
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        config_fingerprint(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Transform,
    Critic,
}

/// What observers see after every parameter update.
#[derive(Debug, Clone, Copy)]
pub struct TrainEvent<'a, T> {
    pub phase: Phase,
    /// Transform updates performed so far; the checkpoint step counter.
    pub transform_step: usize,
    /// Critic updates performed so far, pretraining included.
    pub critic_step: usize,
    pub loss: &'a LossBreakdown<T>,
}

pub trait TrainObserver<T> {
    fn on_step(&mut self, event: &TrainEvent<'_, T>);

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint<T>) {}
}

impl<T, F: FnMut(&TrainEvent<'_, T>)> TrainObserver<T> for F {
    fn on_step(&mut self, event: &TrainEvent<'_, T>) {
        self(event)
    }
}

/// A failed run: the error plus every checkpoint emitted before it.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct TrainError<T: std::fmt::Debug> {
    pub error: WdnError,
    pub checkpoints: Vec<Checkpoint<T>>,
}

/// Minibatch index source over one group: a fresh permutation per epoch,
/// or uniform draws with replacement when the group is smaller than a batch.
#[derive(Debug, Clone)]
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(len: usize) -> Self {
        Self { order: (0..len).collect(), pos: len }
    }

    fn draw<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R, out: &mut Vec<usize>) {
        out.clear();
        let len = self.order.len();
        if len < n {
            out.extend((0..n).map(|_| rng.random_range(0..len)));
            return;
        }
        if self.pos + n > len {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        out.extend_from_slice(&self.order[self.pos..self.pos + n]);
        self.pos += n;
    }
}

/// One critic's sampled row indices and interpolation weights.
struct Draw<T> {
    xs: Vec<usize>,
    ys: Vec<usize>,
    eps: Vec<T>,
}

#[derive(Debug, Clone)]
struct KeySampler {
    key: CriticKey,
    side_i: (GroupKey, Sampler),
    side_j: (GroupKey, Sampler),
}

/// Owns the model, optimizer state and sampling stream of one run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    cfg: TrainConfig<T>,
    model: WdnModel<T>,
    groups: BTreeMap<GroupKey, Vec<Vec<T>>>,
    samplers: Vec<KeySampler>,
    rng: ChaCha8Rng,
    opt_t: RmsProp<T>,
    opt_w: RmsProp<T>,
    transform_steps: usize,
    critic_steps: usize,
    fingerprint: String,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model (identity transforms, random critics) seeded from
    /// `cfg.seed`; minibatches come from a separate stream of the same seed.
    pub fn new(table: &EmbeddingTable<T>, cfg: TrainConfig<T>) -> Result<Self, WdnError> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = WdnModel::new(table, cfg.hidden, cfg.loss_mode, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self::with_model(model, table, cfg, rng)
    }

    pub fn with_model(
        model: WdnModel<T>,
        table: &EmbeddingTable<T>,
        cfg: TrainConfig<T>,
        rng: ChaCha8Rng,
    ) -> Result<Self, WdnError> {
        cfg.validate()?;
        if table.dim() != model.dim {
            return Err(WdnError::DimensionMismatch { expected: model.dim, got: table.dim() });
        }
        if model.critics.is_empty() {
            return Err(WdnError::InvalidConfig("no treatment is present in two or more domains".into()));
        }
        let index = table.group_index();
        let mut groups = BTreeMap::new();
        let mut samplers = Vec::with_capacity(model.critics.len());
        for key in model.critics.keys() {
            for d in [&key.d_i, &key.d_j] {
                model.transform(d)?;
            }
            let mut side = |domain: &str| -> Result<(GroupKey, Sampler), WdnError> {
                let g = GroupKey { treatment: key.treatment.clone(), domain: domain.to_string() };
                let rows = index.get(&g).filter(|r| !r.is_empty()).ok_or_else(|| WdnError::EmptyGroup {
                    treatment: g.treatment.clone(),
                    domain: g.domain.clone(),
                })?;
                let vectors: &Vec<Vec<T>> =
                    groups.entry(g.clone()).or_insert_with(|| rows.iter().map(|&i| table.record(i).vector.clone()).collect());
                Ok((g, Sampler::new(vectors.len())))
            };
            let side_i = side(&key.d_i)?;
            let side_j = side(&key.d_j)?;
            samplers.push(KeySampler { key: key.clone(), side_i, side_j });
        }
        let opt_t = RmsProp::new(model.theta_t_len(), cfg.lr_transform, cfg.rmsprop_decay, cfg.rmsprop_eps);
        let opt_w = RmsProp::new(model.theta_w_len(), cfg.lr_critic, cfg.rmsprop_decay, cfg.rmsprop_eps);
        let fingerprint = cfg.fingerprint();
        Ok(Self { cfg, model, groups, samplers, rng, opt_t, opt_w, transform_steps: 0, critic_steps: 0, fingerprint })
    }

    pub fn model(&self) -> &WdnModel<T> {
        &self.model
    }

    pub fn into_model(self) -> WdnModel<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig<T> {
        &self.cfg
    }

    pub fn transform_steps(&self) -> usize {
        self.transform_steps
    }

    pub fn critic_steps(&self) -> usize {
        self.critic_steps
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::from_model(&self.model, self.transform_steps, self.fingerprint.clone())
    }

    /// Draws one minibatch per critic, in sorted key order.
    pub fn sample(&mut self) -> Minibatches<T> {
        let draws = self.draw();
        self.samplers
            .iter()
            .zip(draws)
            .map(|(ks, d)| {
                let xs = d.xs.iter().map(|&i| self.groups[&ks.side_i.0][i].clone()).collect();
                let ys = d.ys.iter().map(|&i| self.groups[&ks.side_j.0][i].clone()).collect();
                (ks.key.clone(), KeyBatch { xs, ys, eps: d.eps })
            })
            .collect()
    }

    /// Row indices and interpolation weights for one step.
    fn draw(&mut self) -> Vec<Draw<T>> {
        let n = self.cfg.minibatch;
        let mut out = Vec::with_capacity(self.samplers.len());
        for ks in &mut self.samplers {
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            ks.side_i.1.draw(n, &mut self.rng, &mut xs);
            ks.side_j.1.draw(n, &mut self.rng, &mut ys);
            let eps = (0..n).map(|_| T::of(self.rng.random::<f64>())).collect();
            out.push(Draw { xs, ys, eps });
        }
        out
    }

    fn views<'a>(&'a self, draws: &'a [Draw<T>]) -> BTreeMap<CriticKey, BatchView<'a, T>> {
        self.samplers
            .iter()
            .zip(draws)
            .map(|(ks, d)| {
                let gi = &self.groups[&ks.side_i.0];
                let gj = &self.groups[&ks.side_j.0];
                let view = BatchView {
                    xs: d.xs.iter().map(|&i| gi[i].as_slice()).collect(),
                    ys: d.ys.iter().map(|&i| gj[i].as_slice()).collect(),
                    eps: &d.eps,
                };
                (ks.key.clone(), view)
            })
            .collect()
    }

    fn gradients(
        &self,
        batches: &BTreeMap<CriticKey, BatchView<'_, T>>,
        phase: Phase,
    ) -> Result<(LossBreakdown<T>, WdnGradients<T>), WdnError> {
        let gamma = self.cfg.gamma;
        match self.cfg.objective {
            Objective::TwoOptimizers => {
                let set = if phase == Phase::Transform { GradientSet::Transforms } else { GradientSet::Critics };
                let (loss, mut g) = backward_views(&self.model, batches, gamma, set)?;
                // Critics ascend: descend on the negated gradient.
                for v in &mut g.theta_w {
                    *v = -*v;
                }
                Ok((loss, g))
            }
            Objective::GradientReversal => {
                let (loss, mut g) = backward_views(&self.model, batches, gamma, GradientSet::Both)?;
                // Joint objective is −L for everyone...
                for v in g.theta_t.iter_mut().chain(g.theta_w.iter_mut()) {
                    *v = -*v;
                }
                // ...and the reversal layer flips what reaches the transforms.
                for v in &mut g.theta_t {
                    *v = -*v;
                }
                Ok((loss, g))
            }
        }
    }

    fn check_loss(&self, loss: &LossBreakdown<T>) -> Result<(), WdnError> {
        if loss.total.is_finite() && loss.regularizer.is_finite() {
            Ok(())
        } else {
            Err(WdnError::NonFiniteLoss { step: self.transform_steps })
        }
    }

    /// One ascent step on every critic.
    pub fn critic_step(&mut self) -> Result<LossBreakdown<T>, WdnError> {
        let draws = self.draw();
        let (loss, g) = self.gradients(&self.views(&draws), Phase::Critic)?;
        self.check_loss(&loss)?;
        let mut theta = self.model.theta_w();
        self.opt_w.step(&mut theta, &g.theta_w)?;
        self.model.set_theta_w(&theta)?;
        self.critic_steps += 1;
        Ok(loss)
    }

    /// One descent step on every transform.
    pub fn transform_step(&mut self) -> Result<LossBreakdown<T>, WdnError> {
        let draws = self.draw();
        let (mut loss, mut g) = self.gradients(&self.views(&draws), Phase::Transform)?;
        loss.regularizer = identity_regularizer(&self.model, self.cfg.identity_penalty, Some(&mut g.theta_t));
        self.check_loss(&loss)?;
        let mut theta = self.model.theta_t();
        self.opt_t.step(&mut theta, &g.theta_t)?;
        self.model.set_theta_t(&theta)?;
        self.transform_steps += 1;
        Ok(loss)
    }

    fn notify(&self, phase: Phase, loss: &LossBreakdown<T>, observers: &mut [&mut dyn TrainObserver<T>]) {
        let event =
            TrainEvent { phase, transform_step: self.transform_steps, critic_step: self.critic_steps, loss };
        for o in observers.iter_mut() {
            o.on_step(&event);
        }
    }

    /// Critic-only updates; transforms are untouched.
    pub fn pretrain(&mut self, steps: usize, observers: &mut [&mut dyn TrainObserver<T>]) -> Result<(), WdnError> {
        for _ in 0..steps {
            let loss = self.critic_step()?;
            self.notify(Phase::Pretrain, &loss, observers);
        }
        Ok(())
    }

    /// One alternation cycle.
    pub fn cycle(&mut self, observers: &mut [&mut dyn TrainObserver<T>]) -> Result<(), WdnError> {
        for _ in 0..self.cfg.transform_steps_per_cycle {
            let loss = self.transform_step()?;
            self.notify(Phase::Transform, &loss, observers);
        }
        for _ in 0..self.cfg.critic_steps_per_cycle {
            let loss = self.critic_step()?;
            self.notify(Phase::Critic, &loss, observers);
        }
        Ok(())
    }

    /// Pretraining followed by the configured cycles. A checkpoint is
    /// emitted after pretraining, every `checkpoint_every` cycles, and after
    /// the final cycle.
    pub fn run(&mut self, observers: &mut [&mut dyn TrainObserver<T>]) -> Result<Vec<Checkpoint<T>>, TrainError<T>> {
        let mut checkpoints = Vec::new();
        if let Err(error) = self.pretrain(self.cfg.pretrain_steps, observers) {
            return Err(TrainError { error, checkpoints });
        }
        self.emit(&mut checkpoints, observers);
        let total = self.cfg.total_cycles;
        for cycle in 1..=total {
            if let Err(error) = self.cycle(observers) {
                return Err(TrainError { error, checkpoints });
            }
            if cycle % self.cfg.checkpoint_every == 0 || cycle == total {
                self.emit(&mut checkpoints, observers);
            }
        }
        Ok(checkpoints)
    }

    fn emit(&self, out: &mut Vec<Checkpoint<T>>, observers: &mut [&mut dyn TrainObserver<T>]) {
        let ck = self.checkpoint();
        for o in observers.iter_mut() {
            o.on_checkpoint(&ck);
        }
        out.push(ck);
    }
}

/// Runs `cfg.pretrain_steps` critic-only updates on `model`, drawing
/// minibatches from `rng`.
pub fn pretrain_critics<T: Scalar>(
    model: WdnModel<T>,
    table: &EmbeddingTable<T>,
    cfg: &TrainConfig<T>,
    rng: &mut ChaCha8Rng,
) -> Result<WdnModel<T>, WdnError> {
    let mut trainer = Trainer::with_model(model, table, cfg.clone(), rng.clone())?;
    trainer.pretrain(cfg.pretrain_steps, &mut [])?;
    *rng = trainer.rng;
    Ok(trainer.model)
}

/// Pretrains and then alternates, returning the emitted checkpoints.
pub fn train<T: Scalar>(
    model: WdnModel<T>,
    table: &EmbeddingTable<T>,
    cfg: &TrainConfig<T>,
    rng: &mut ChaCha8Rng,
    observers: &mut [&mut dyn TrainObserver<T>],
) -> Result<Vec<Checkpoint<T>>, TrainError<T>> {
    let mut trainer = Trainer::with_model(model, table, cfg.clone(), rng.clone())
        .map_err(|error| TrainError { error, checkpoints: Vec::new() })?;
    let out = trainer.run(observers);
    *rng = trainer.rng;
    out
}

/// Maps every row through its domain's transform.
pub fn wdn_apply<T: Scalar>(model: &WdnModel<T>, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, WdnError> {
    model.apply(table)
}
