//! Adaptive rank allocation over SVD triplets.
//!
//! Every trainable adaptor entry carries a smoothed importance `Ī` and an
//! uncertainty `Ū`. Triplets are scored from the entry scores `Ī·Ū` and, on a
//! cubic budget schedule, only the top-`b` triplets across all adaptors keep
//! their singular value.

use serde::{Deserialize, Serialize};

use crate::adaptor::LowRankAdaptor;
use crate::backbone::{Batch, BatchStats, MultimodalModel, ParamRole};
use crate::error::{Error, Result};
use crate::optim::Optimizer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocatorConfig {
    pub beta1: f64,
    pub beta2: f64,
    /// Steps between prunes during the decay phase; `None` never prunes.
    pub prune_interval: Option<usize>,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            beta1: 0.85,
            beta2: 0.85,
            prune_interval: Some(10),
        }
    }
}

impl AllocatorConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = check_betas(self.beta1, self.beta2) {
            errs.push(e.to_string());
        }
        if self.prune_interval == Some(0) {
            errs.push("prune_interval must be at least 1".into());
        }
        errs
    }
}

pub fn check_betas(beta1: f64, beta2: f64) -> Result<()> {
    let ok = |b: f64| b > 0.0 && b < 1.0;
    if ok(beta1) && ok(beta2) {
        Ok(())
    } else {
        Err(Error::Config(vec![format!(
            "beta1 and beta2 must lie strictly between 0 and 1, got {beta1} and {beta2}"
        )]))
    }
}

/// Total-rank budget over optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub b0: usize,
    pub bt: usize,
    pub warmup_end: usize,
    pub decay_end: usize,
    pub total_steps: usize,
}

impl BudgetSchedule {
    pub fn new(b0: usize, bt: usize, warmup_end: usize, decay_end: usize, total_steps: usize) -> Result<Self> {
        let mut errs = Vec::new();
        if bt > b0 {
            errs.push(format!("target budget {bt} exceeds initial budget {b0}"));
        }
        if warmup_end >= decay_end {
            errs.push(format!("warm-up end {warmup_end} must precede decay end {decay_end}"));
        }
        if decay_end >= total_steps {
            errs.push(format!("decay end {decay_end} must precede the last step {total_steps}"));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(Self {
            b0,
            bt,
            warmup_end,
            decay_end,
            total_steps,
        })
    }

    /// Converts epoch boundaries to steps at `steps_per_epoch` steps per epoch.
    #[allow(clippy::too_many_arguments)]
    pub fn from_epochs(
        n_adaptors: usize,
        r_init: usize,
        r_target: usize,
        warmup_epochs: usize,
        decay_end_epoch: usize,
        epochs: usize,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        Self::new(
            n_adaptors * r_init,
            n_adaptors * r_target,
            warmup_epochs * steps_per_epoch,
            decay_end_epoch * steps_per_epoch,
            epochs * steps_per_epoch,
        )
    }

    pub fn budget(&self, it: usize) -> usize {
        if it <= self.warmup_end {
            return self.b0;
        }
        if it >= self.decay_end {
            return self.bt;
        }
        let frac = (it - self.warmup_end) as f64 / (self.decay_end - self.warmup_end) as f64;
        self.bt + ((self.b0 - self.bt) as f64 * (1.0 - frac).powi(3)).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Entries of `P` or `Q`: `I = |g|`.
    Vector,
    /// Entries of `Λ`: `I = |λ·g|`.
    SingularValue,
}

pub fn entry_importance(kind: EntryKind, values: &[f64], grad: Option<&[f64]>) -> Result<Vec<f64>> {
    let grad = grad.ok_or_else(|| Error::InvalidArgument("importance needs a populated gradient".into()))?;
    if grad.len() != values.len() {
        return Err(Error::shape("entry_importance", "gradient and value sizes differ"));
    }
    Ok(match kind {
        EntryKind::Vector => grad.iter().map(|g| g.abs()).collect(),
        EntryKind::SingularValue => values.iter().zip(grad).map(|(w, g)| (w * g).abs()).collect(),
    })
}

/// Smoothed importance and uncertainty for a flat run of entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntryStats {
    pub bar: Vec<f64>,
    pub unc: Vec<f64>,
}

impl EntryStats {
    pub fn zeros(n: usize) -> Self {
        Self {
            bar: vec![0.0; n],
            unc: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bar.is_empty()
    }

    /// Entry score `Ī·Ū`.
    pub fn score(&self, j: usize) -> f64 {
        self.bar[j] * self.unc[j]
    }
}

/// `Ī' = β1·Ī + (1−β1)·I`, then `Ū' = β2·Ū + (1−β2)·|I − Ī'|`.
pub fn update_importance(stats: &mut EntryStats, fresh: &[f64], beta1: f64, beta2: f64) -> Result<()> {
    check_betas(beta1, beta2)?;
    if fresh.len() != stats.len() {
        return Err(Error::shape("update_importance", "fresh importance size differs from state"));
    }
    for (j, &i) in fresh.iter().enumerate() {
        let bar = beta1 * stats.bar[j] + (1.0 - beta1) * i;
        stats.unc[j] = beta2 * stats.unc[j] + (1.0 - beta2) * (i - bar).abs();
        stats.bar[j] = bar;
    }
    Ok(())
}

/// Importance of one adaptor with `P: [rows, rank]`, `Λ: [rank]`, `Q: [rank, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorImportance {
    pub rows: usize,
    pub rank: usize,
    pub cols: usize,
    pub p: EntryStats,
    pub lambda: EntryStats,
    pub q: EntryStats,
}

impl AdaptorImportance {
    pub fn zeros(rows: usize, rank: usize, cols: usize) -> Self {
        Self {
            rows,
            rank,
            cols,
            p: EntryStats::zeros(rows * rank),
            lambda: EntryStats::zeros(rank),
            q: EntryStats::zeros(rank * cols),
        }
    }

    pub fn for_adaptor(a: &LowRankAdaptor) -> Self {
        Self::zeros(a.target().rows_out(), a.rank(), a.target().rows_in())
    }

    /// `s(Λ_i) + mean_j s(P_{j,i}) + mean_j s(Q_{i,j})`.
    pub fn triplet_score(&self, i: usize) -> f64 {
        let p: f64 = (0..self.rows).map(|j| self.p.score(j * self.rank + i)).sum::<f64>() / self.rows as f64;
        let q: f64 = (0..self.cols).map(|j| self.q.score(i * self.cols + j)).sum::<f64>() / self.cols as f64;
        self.lambda.score(i) + p + q
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportanceState {
    pub adaptors: Vec<AdaptorImportance>,
    /// Number of importance updates applied.
    pub step: u64,
}

impl ImportanceState {
    pub fn for_adaptors<'a>(adaptors: impl IntoIterator<Item = &'a LowRankAdaptor>) -> Self {
        Self {
            adaptors: adaptors.into_iter().map(AdaptorImportance::for_adaptor).collect(),
            step: 0,
        }
    }

    /// Folds in the current gradients of every adaptor.
    pub fn observe<'a>(
        &mut self,
        adaptors: impl IntoIterator<Item = &'a LowRankAdaptor>,
        beta1: f64,
        beta2: f64,
    ) -> Result<()> {
        let mut n = 0;
        for (st, a) in self.adaptors.iter_mut().zip(adaptors) {
            let ip = entry_importance(EntryKind::Vector, a.p().data(), a.p().grad())?;
            let il = entry_importance(EntryKind::SingularValue, a.lambda().data(), a.lambda().grad())?;
            let iq = entry_importance(EntryKind::Vector, a.q().data(), a.q().grad())?;
            update_importance(&mut st.p, &ip, beta1, beta2)?;
            update_importance(&mut st.lambda, &il, beta1, beta2)?;
            update_importance(&mut st.q, &iq, beta1, beta2)?;
            n += 1;
        }
        if n != self.adaptors.len() {
            return Err(Error::InvalidArgument("importance state and adaptor count differ".into()));
        }
        self.step += 1;
        Ok(())
    }

    pub fn all_finite_nonneg(&self) -> bool {
        self.adaptors.iter().all(|a| {
            [&a.p, &a.lambda, &a.q]
                .iter()
                .all(|s| s.bar.iter().chain(&s.unc).all(|v| v.is_finite() && *v >= 0.0))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TripletScore {
    pub adaptor: usize,
    pub triplet: usize,
    pub score: f64,
}

/// One score per triplet, ordered by `(adaptor, triplet)`.
pub fn triplet_scores(state: &ImportanceState) -> Vec<TripletScore> {
    state
        .adaptors
        .iter()
        .enumerate()
        .flat_map(|(k, a)| {
            (0..a.rank).map(move |i| TripletScore {
                adaptor: k,
                triplet: i,
                score: a.triplet_score(i),
            })
        })
        .collect()
}

/// The `budget` best triplets by score; equal scores prefer the lower `(adaptor, triplet)`.
/// Returned in `(adaptor, triplet)` order.
pub fn select_top(scores: &[TripletScore], budget: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<&TripletScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.adaptor.cmp(&b.adaptor))
            .then(a.triplet.cmp(&b.triplet))
    });
    let mut kept: Vec<(usize, usize)> = order.iter().take(budget).map(|s| (s.adaptor, s.triplet)).collect();
    kept.sort_unstable();
    kept
}

/// Plain gradient step on `P` and `Q` in place; returns the provisional `Λ̃ = Λ − η·∇Λ`
/// for every triplet, masked ones included.
pub fn sgd_step(adaptor: &mut LowRankAdaptor, lr: f64) -> Result<Vec<f64>> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let [p, _, q] = adaptor.tensors_mut();
    for t in [p, q] {
        let g = t
            .grad()
            .ok_or_else(|| Error::InvalidArgument("sgd_step needs gradients".into()))?
            .to_vec();
        for (w, g) in t.data_mut().iter_mut().zip(g) {
            *w -= lr * g;
        }
    }
    let l = adaptor.lambda();
    let g = l
        .grad()
        .ok_or_else(|| Error::InvalidArgument("sgd_step needs gradients".into()))?;
    Ok(l.data().iter().zip(g).map(|(w, g)| w - lr * g).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub kept: Vec<(usize, usize)>,
    pub dropped: Vec<(usize, usize)>,
    /// Triplets inactive before this prune and active after it.
    pub revived: Vec<(usize, usize)>,
}

/// Keeps `Λ̃` on the top-`budget` triplets and zeroes and masks the rest.
pub fn prune_to_budget(
    adaptors: &mut [&mut LowRankAdaptor],
    scores: &[TripletScore],
    provisional: &[Vec<f64>],
    budget: usize,
) -> Result<PruneOutcome> {
    let total: usize = adaptors.iter().map(|a| a.rank()).sum();
    if budget > total {
        return Err(Error::InvalidArgument(format!("budget {budget} exceeds {total} triplets")));
    }
    if scores.len() != total || provisional.len() != adaptors.len() {
        return Err(Error::InvalidArgument("scores or provisional values do not cover every triplet".into()));
    }
    let kept = select_top(scores, budget);
    let mut keep_mask: Vec<Vec<bool>> = adaptors.iter().map(|a| vec![false; a.rank()]).collect();
    for &(k, i) in &kept {
        keep_mask[k][i] = true;
    }
    let mut dropped = Vec::new();
    let mut revived = Vec::new();
    for (k, a) in adaptors.iter_mut().enumerate() {
        if provisional[k].len() != a.rank() {
            return Err(Error::shape("prune_to_budget", format!("provisional Λ for adaptor {k}")));
        }
        for i in 0..a.rank() {
            let keep = keep_mask[k][i];
            if keep && !a.is_active(i) {
                revived.push((k, i));
            }
            if !keep {
                dropped.push((k, i));
            }
            a.set_triplet(i, keep, provisional[k][i]);
        }
    }
    Ok(PruneOutcome { kept, dropped, revived })
}

/// Record of one prune, emitted into the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneEvent {
    pub step: usize,
    pub budget: usize,
    pub active_ranks: Vec<usize>,
    pub scores: Vec<TripletScore>,
    pub outcome: PruneOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub stats: BatchStats,
    pub prune: Option<PruneEvent>,
    /// The adaptors were compacted at the end of this step.
    pub froze: bool,
}

/// Drives importance tracking, pruning and the final freeze for one LMA model.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocator {
    pub config: AllocatorConfig,
    pub schedule: BudgetSchedule,
    pub state: ImportanceState,
    frozen: bool,
}

impl Allocator {
    pub fn new(model: &MultimodalModel, config: AllocatorConfig, schedule: BudgetSchedule) -> Result<Self> {
        let errs = config.problems();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let total: usize = model.adaptors().map(|a| a.rank()).sum();
        if config.prune_interval.is_some() && schedule.b0 != total {
            return Err(Error::Config(vec![format!(
                "initial budget {} differs from the model's {total} triplets",
                schedule.b0
            )]));
        }
        Ok(Self {
            config,
            schedule,
            state: ImportanceState::for_adaptors(model.adaptors()),
            frozen: false,
        })
    }

    /// Restores an allocator mid-run.
    pub fn resume(config: AllocatorConfig, schedule: BudgetSchedule, state: ImportanceState, frozen: bool) -> Self {
        Self {
            config,
            schedule,
            state,
            frozen,
        }
    }

    pub fn pruning_enabled(&self) -> bool {
        self.config.prune_interval.is_some()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Prunes happen on interval multiples inside `(t_w, t_c]`, and always at `t_c`.
    pub fn is_prune_step(&self, it: usize) -> bool {
        match self.config.prune_interval {
            None => false,
            Some(n) => {
                !self.frozen
                    && it > self.schedule.warmup_end
                    && it <= self.schedule.decay_end
                    && (it % n == 0 || it == self.schedule.decay_end)
            }
        }
    }

    /// One full step: forward, backward, importance, update, prune.
    pub fn step(&mut self, model: &mut MultimodalModel, batch: &Batch, opt: &mut Optimizer, it: usize) -> Result<StepOutcome> {
        if it >= self.schedule.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {it} beyond schedule length {}",
                self.schedule.total_steps
            )));
        }
        let stats = model.loss_and_grads(batch)?;
        let (prune, froze) = self.apply_gradients(model, opt, it)?;
        Ok(StepOutcome { stats, prune, froze })
    }

    /// Everything after backward, using the gradients stored on `model`.
    pub fn apply_gradients(
        &mut self,
        model: &mut MultimodalModel,
        opt: &mut Optimizer,
        it: usize,
    ) -> Result<(Option<PruneEvent>, bool)> {
        let tracking = self.pruning_enabled() && !self.frozen;
        if tracking {
            self.state.observe(model.adaptors(), self.config.beta1, self.config.beta2)?;
        }

        opt.begin_step();
        let mut provisional: Vec<Vec<f64>> = vec![Vec::new(); model.adaptor_count()];
        let mut failure = None;
        model.visit_params_mut(|name, role, t| {
            if failure.is_some() {
                return;
            }
            let res = match role {
                ParamRole::AdaptorLambda { adaptor } => match t.grad() {
                    Some(g) => opt.propose(name, t.data(), &g.to_vec()).map(|v| provisional[adaptor] = v),
                    None => Err(Error::InvalidArgument(format!("{name}: no gradient"))),
                },
                _ => opt.step_tensor(name, t),
            };
            if let Err(e) = res {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }

        let event = if self.is_prune_step(it) {
            let budget = self.schedule.budget(it);
            let scores = triplet_scores(&self.state);
            let mut adaptors: Vec<&mut LowRankAdaptor> = model.adaptors_mut().collect();
            let outcome = prune_to_budget(&mut adaptors, &scores, &provisional, budget)?;
            Some(PruneEvent {
                step: it,
                budget,
                active_ranks: adaptors.iter().map(|a| a.active_rank()).collect(),
                scores,
                outcome,
            })
        } else {
            for (a, lt) in model.adaptors_mut().zip(&provisional) {
                for (i, &v) in lt.iter().enumerate() {
                    let on = a.is_active(i);
                    a.set_triplet(i, on, v);
                }
            }
            None
        };

        let froze = tracking && it == self.schedule.decay_end;
        if froze {
            self.freeze(model, opt);
        }
        Ok((event, froze))
    }

    /// Drops inactive triplets from the model and the optimizer state.
    pub fn freeze(&mut self, model: &mut MultimodalModel, opt: &mut Optimizer) {
        let prefixes = model.adaptor_prefixes();
        for (a, prefix) in model.adaptors_mut().zip(&prefixes) {
            let (rows, rank, cols) = (a.target().rows_out(), a.rank(), a.target().rows_in());
            let keep = a.compact();
            opt.compact_adaptor(prefix, rows, rank, cols, &keep);
        }
        self.state = ImportanceState::default();
        self.frozen = true;
    }
}

/// Free-function form of [`Allocator::step`].
pub fn allocation_step(
    model: &mut MultimodalModel,
    batch: &Batch,
    allocator: &mut Allocator,
    opt: &mut Optimizer,
    it: usize,
) -> Result<StepOutcome> {
    allocator.step(model, batch, opt, it)
}
