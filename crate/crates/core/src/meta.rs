//! Episodic tasks and the improved first-order MAML trainer.
//!
//! Within one episode the inner updates of every sampled task run one after
//! another on a single evolving parameter store. Once the last task has been
//! fitted on its support set, the query losses of all tasks are evaluated at
//! the resulting parameters, their gradients are summed, and one outer step
//! is applied to those same parameters. No second-order terms are formed.
//!
//! A per-task-copy variant (classic first-order MAML) is available through
//! [`MetaConfig::per_task_copies`] for comparison.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::DialogueSample;
use crate::model::{KnowledgeModel, Losses};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{Grads, ParamStore};

/// Samples carry a corpus-unique id so task splits can be checked.
pub trait Identified {
    fn uid(&self) -> u64;
}

impl Identified for DialogueSample {
    fn uid(&self) -> u64 {
        self.uid
    }
}

/// Anything that can score a batch and differentiate the batch loss.
pub trait Learner {
    type Sample;

    /// Mean loss over `samples` and its gradient for every parameter.
    fn loss_and_grads(&self, params: &ParamStore, samples: &[Self::Sample])
        -> Result<(BatchStats, Grads)>;

    /// Mean loss over `samples` without gradients.
    fn evaluate(&self, params: &ParamStore, samples: &[Self::Sample]) -> Result<BatchStats>;
}

/// Mean per-term losses over a batch plus knowledge-selection accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub losses: Losses,
    pub sel_acc: f64,
    pub n: usize,
}

impl BatchStats {
    fn check_finite(&self) -> Result<()> {
        let l = self.losses;
        if [l.kl, l.nll, l.bow, l.total].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric { op: "batch_loss" })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task<S> {
    pub task_id: u64,
    pub support: Vec<S>,
    pub query: Vec<S>,
}

impl<S: Identified> Task<S> {
    /// Checks that both sets are non-empty and share no sample.
    pub fn new(task_id: u64, support: Vec<S>, query: Vec<S>) -> Result<Self> {
        if support.is_empty() || query.is_empty() {
            return Err(Error::Data(format!("task {task_id}: support and query must be non-empty")));
        }
        let ids: std::collections::HashSet<u64> = support.iter().map(Identified::uid).collect();
        if query.iter().any(|s| ids.contains(&s.uid())) {
            return Err(Error::Data(format!("task {task_id}: support and query overlap")));
        }
        Ok(Task {
            task_id,
            support,
            query,
        })
    }
}

impl<S: Clone> Task<S> {
    /// Same task with the support set cut to its first `k` samples.
    pub fn with_support_size(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.support.len() {
            return Err(Error::Data(format!(
                "task {}: cannot take {k} of {} support samples",
                self.task_id,
                self.support.len()
            )));
        }
        Ok(Task {
            task_id: self.task_id,
            support: self.support[..k].to_vec(),
            query: self.query.clone(),
        })
    }
}

/// Seeded shuffle, then the first `k_support` samples become the support set
/// and the next `k_query` the query set. Extra samples are dropped.
pub fn split_support_query<S: Identified>(
    task_id: u64,
    mut samples: Vec<S>,
    k_support: usize,
    k_query: usize,
    seed: u64,
) -> Result<Task<S>> {
    let need = k_support + k_query;
    if samples.len() < need {
        return Err(Error::Data(format!(
            "task {task_id}: need {need} samples, have {} ({} short)",
            samples.len(),
            need - samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    samples.truncate(need);
    let query = samples.split_off(k_support);
    Task::new(task_id, samples, query)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Outer-loop learning rate.
    pub beta: f64,
    pub num_tasks: usize,
    pub k_support: usize,
    pub k_query: usize,
    pub inner_steps: usize,
    pub test_update_steps: usize,
    /// Mini-batch size during [`adapt`]. With `Some(b)` each test update step
    /// is one pass over the support set in chunks of `b`; `None` makes every
    /// step a single full-batch update.
    pub adapt_batch_size: Option<usize>,
    pub inner_optimizer: OptimizerKind,
    pub outer_optimizer: OptimizerKind,
    pub max_episodes: usize,
    /// Validation rounds without improvement before stopping.
    pub early_stop_patience: usize,
    /// Episodes between validation rounds.
    pub eval_every: usize,
    pub clip_norm: Option<f64>,
    pub per_task_copies: bool,
    pub seed: u64,
}

impl MetaConfig {
    /// Full-corpus hyperparameters.
    pub fn paper() -> Self {
        MetaConfig {
            alpha: 1e-4,
            beta: 1e-4,
            num_tasks: 5,
            k_support: 8,
            k_query: 14,
            inner_steps: 4,
            test_update_steps: 10,
            adapt_batch_size: None,
            inner_optimizer: OptimizerKind::Adam,
            outer_optimizer: OptimizerKind::Adam,
            max_episodes: 20_000,
            early_stop_patience: 10,
            eval_every: 200,
            clip_norm: Some(5.0),
            per_task_copies: false,
            seed: 0,
        }
    }

    /// Small-corpus hyperparameters for synthetic pools on one core.
    pub fn desk() -> Self {
        MetaConfig {
            alpha: 3e-3,
            beta: 3e-3,
            adapt_batch_size: Some(8),
            max_episodes: 120,
            early_stop_patience: 4,
            eval_every: 10,
            ..MetaConfig::paper()
        }
    }

    /// Samples consumed by one episode.
    pub fn episode_samples(&self) -> usize {
        self.num_tasks * (self.k_support + self.k_query)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_tasks", self.num_tasks),
            ("k_support", self.k_support),
            ("k_query", self.k_query),
            ("eval_every", self.eval_every),
            ("early_stop_patience", self.early_stop_patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be at least 1")));
            }
        }
        if self.adapt_batch_size == Some(0) {
            return Err(Error::contract("adapt_batch_size must be at least 1"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn inner_optimizer(&self, params: &ParamStore) -> Optimizer {
        Optimizer::new(self.inner_optimizer, self.alpha, self.clip_norm, params)
    }

    pub fn outer_optimizer(&self, params: &ParamStore) -> Optimizer {
        Optimizer::new(self.outer_optimizer, self.beta, self.clip_norm, params)
    }
}

/// Seeded sampler of task batches (without replacement inside a batch).
pub struct TaskSampler<S> {
    pool: Vec<Task<S>>,
    rng: ChaCha8Rng,
}

impl<S> TaskSampler<S> {
    pub fn new(pool: Vec<Task<S>>, seed: u64) -> Self {
        TaskSampler {
            pool,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn pool(&self) -> &[Task<S>] {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn sample(&mut self, n: usize) -> Result<Vec<&Task<S>>> {
        if n > self.pool.len() {
            return Err(Error::Data(format!(
                "cannot sample {n} tasks from a pool of {}",
                self.pool.len()
            )));
        }
        let idx = rand::seq::index::sample(&mut self.rng, self.pool.len(), n);
        Ok(idx.iter().map(|i| &self.pool[i]).collect())
    }
}

/// Runs `steps` optimizer steps on the mean support loss. Returns the
/// support statistics measured before the first step.
fn fit_support<L: Learner>(
    learner: &L,
    params: &mut ParamStore,
    support: &[L::Sample],
    steps: usize,
    opt: &mut Optimizer,
) -> Result<Option<BatchStats>> {
    let mut first = None;
    for _ in 0..steps {
        let (stats, grads) = learner.loss_and_grads(params, support)?;
        stats.check_finite()?;
        first.get_or_insert(stats);
        opt.step(params, grads)?;
    }
    Ok(first)
}

/// `cfg.inner_steps` updates on the task's support set with a fresh inner
/// optimizer; zero steps return the parameters unchanged.
pub fn inner_update<L: Learner>(
    learner: &L,
    params: &ParamStore,
    task: &Task<L::Sample>,
    cfg: &MetaConfig,
) -> Result<ParamStore> {
    let mut theta = params.clone();
    let mut opt = cfg.inner_optimizer(&theta);
    fit_support(learner, &mut theta, &task.support, cfg.inner_steps, &mut opt)?;
    Ok(theta)
}

/// Per-task losses recorded during one episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    /// Support loss before each task's first inner step.
    pub support: Vec<(u64, BatchStats)>,
    /// Query loss at the parameters the meta gradient is taken at.
    pub query: Vec<(u64, BatchStats)>,
}

impl EpisodeStats {
    pub fn mean_query_total(&self) -> f64 {
        mean(self.query.iter().map(|(_, s)| s.losses.total))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One episode of improved MAML starting from `params`.
pub fn meta_batch_step<L: Learner>(
    learner: &L,
    params: &ParamStore,
    batch: &[&Task<L::Sample>],
    cfg: &MetaConfig,
    outer: &mut Optimizer,
) -> Result<(ParamStore, EpisodeStats)> {
    if batch.is_empty() {
        return Err(Error::contract("meta step over an empty task batch"));
    }
    let mut stats = EpisodeStats::default();
    let mut meta_grads = Grads::zeros_like(params);
    let mut theta = params.clone();
    if cfg.per_task_copies {
        for task in batch {
            let mut theta_i = params.clone();
            let mut inner = cfg.inner_optimizer(&theta_i);
            if let Some(s) = fit_support(learner, &mut theta_i, &task.support, cfg.inner_steps, &mut inner)? {
                stats.support.push((task.task_id, s));
            }
            let (q, g) = learner.loss_and_grads(&theta_i, &task.query)?;
            q.check_finite()?;
            stats.query.push((task.task_id, q));
            meta_grads.add_scaled(&g, 1.0)?;
        }
    } else {
        let mut inner = cfg.inner_optimizer(&theta);
        for task in batch {
            if let Some(s) = fit_support(learner, &mut theta, &task.support, cfg.inner_steps, &mut inner)? {
                stats.support.push((task.task_id, s));
            }
        }
        for task in batch {
            let (q, g) = learner.loss_and_grads(&theta, &task.query)?;
            q.check_finite()?;
            stats.query.push((task.task_id, q));
            meta_grads.add_scaled(&g, 1.0)?;
        }
    }
    outer.step(&mut theta, meta_grads)?;
    Ok((theta, stats))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub split: String,
    pub task_id: u64,
    pub kl: f64,
    pub nll: f64,
    pub bow: f64,
    pub total: f64,
    pub sel_acc: f64,
}

impl LogRow {
    fn new(episode: usize, split: &str, task_id: u64, s: &BatchStats) -> Self {
        LogRow {
            episode,
            split: split.to_string(),
            task_id,
            kl: s.losses.kl,
            nll: s.losses.nll,
            bow: s.losses.bow,
            total: s.losses.total,
            sel_acc: s.sel_acc,
        }
    }
}

/// Append-only training log with a CSV rendering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "episode,split,task_id,kl,nll,bow,total,sel_acc";

    pub fn push(&mut self, episode: usize, split: &str, task_id: u64, s: &BatchStats) {
        self.rows.push(LogRow::new(episode, split, task_id, s));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.episode, r.split, r.task_id, r.kl, r.nll, r.bow, r.total, r.sel_acc
            );
        }
        out
    }

    pub fn split_rows<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a LogRow> + 'a {
        self.rows.iter().filter(move |r| r.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxEpisodes,
    EarlyStopped,
    /// A non-finite loss or gradient; the best parameters so far are kept.
    Diverged(String),
}

#[derive(Clone, Debug)]
pub struct MetaRun {
    /// Parameters with the best validation query loss.
    pub best: ParamStore,
    pub best_val: f64,
    pub best_episode: usize,
    pub episodes_run: usize,
    pub stop: StopReason,
    pub log: TrainLog,
}

/// Mean query total loss over `tasks`, without adaptation.
pub fn validation_loss<L: Learner>(
    learner: &L,
    params: &ParamStore,
    tasks: &[Task<L::Sample>],
    log: Option<(&mut TrainLog, usize)>,
) -> Result<f64> {
    let mut totals = Vec::with_capacity(tasks.len());
    let mut rows = Vec::new();
    for t in tasks {
        let s = learner.evaluate(params, &t.query)?;
        s.check_finite()?;
        totals.push(s.losses.total);
        rows.push((t.task_id, s));
    }
    if let Some((log, episode)) = log {
        for (id, s) in &rows {
            log.push(episode, "valid", *id, s);
        }
    }
    Ok(mean(totals.into_iter()))
}

/// Repeats [`meta_batch_step`] until `max_episodes` or until validation has
/// not improved for `early_stop_patience` rounds, returning the parameters
/// with the best validation loss.
pub fn meta_train<L: Learner>(
    learner: &L,
    params: &ParamStore,
    sampler: &mut TaskSampler<L::Sample>,
    cfg: &MetaConfig,
    validation: &[Task<L::Sample>],
) -> Result<MetaRun> {
    cfg.validate()?;
    if sampler.len() < cfg.num_tasks {
        return Err(Error::Data(format!(
            "task pool has {} tasks, an episode needs {}",
            sampler.len(),
            cfg.num_tasks
        )));
    }
    let mut log = TrainLog::default();
    let mut run = MetaRun {
        best: params.clone(),
        best_val: f64::INFINITY,
        best_episode: 0,
        episodes_run: 0,
        stop: StopReason::MaxEpisodes,
        log: TrainLog::default(),
    };
    if cfg.max_episodes == 0 {
        return Ok(run);
    }
    if !validation.is_empty() {
        run.best_val = validation_loss(learner, params, validation, Some((&mut log, 0)))?;
    }
    let mut theta = params.clone();
    let mut outer = cfg.outer_optimizer(&theta);
    let mut stale = 0;
    for episode in 1..=cfg.max_episodes {
        let step = {
            let batch = sampler.sample(cfg.num_tasks)?;
            meta_batch_step(learner, &theta, &batch, cfg, &mut outer)
        };
        let (next, stats) = match step {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                run.stop = StopReason::Diverged(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        theta = next;
        run.episodes_run = episode;
        for (id, s) in &stats.support {
            log.push(episode, "support", *id, s);
        }
        for (id, s) in &stats.query {
            log.push(episode, "query", *id, s);
        }
        if validation.is_empty() {
            run.best = theta.clone();
            run.best_episode = episode;
            continue;
        }
        if episode % cfg.eval_every != 0 && episode != cfg.max_episodes {
            continue;
        }
        let val = match validation_loss(learner, &theta, validation, Some((&mut log, episode))) {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                run.stop = StopReason::Diverged(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        if val < run.best_val {
            run.best_val = val;
            run.best = theta.clone();
            run.best_episode = episode;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                run.stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    run.log = log;
    Ok(run)
}

/// Query statistics before and after fine-tuning on a task's support set.
#[derive(Clone, Debug)]
pub struct Adaptation {
    pub params: ParamStore,
    pub pre: BatchStats,
    pub post: BatchStats,
}

/// Fine-tunes on an unseen task: `cfg.test_update_steps` inner-optimizer
/// steps (or passes, see [`MetaConfig::adapt_batch_size`]) on the support
/// set, with query losses reported before and after.
pub fn adapt<L: Learner>(
    learner: &L,
    params: &ParamStore,
    task: &Task<L::Sample>,
    cfg: &MetaConfig,
    seen_task_ids: &[u64],
) -> Result<Adaptation> {
    if seen_task_ids.contains(&task.task_id) {
        return Err(Error::contract(format!(
            "task {} was seen during meta-training",
            task.task_id
        )));
    }
    let pre = learner.evaluate(params, &task.query)?;
    pre.check_finite()?;
    let mut theta = params.clone();
    let mut opt = cfg.inner_optimizer(&theta);
    match cfg.adapt_batch_size {
        Some(b) if b < task.support.len() => {
            for _ in 0..cfg.test_update_steps {
                for chunk in task.support.chunks(b) {
                    fit_support(learner, &mut theta, chunk, 1, &mut opt)?;
                }
            }
        }
        _ => {
            fit_support(learner, &mut theta, &task.support, cfg.test_update_steps, &mut opt)?;
        }
    }
    let post = if cfg.test_update_steps == 0 {
        pre
    } else {
        learner.evaluate(&theta, &task.query)?
    };
    post.check_finite()?;
    Ok(Adaptation {
        params: theta,
        pre,
        post,
    })
}

/// Plain mini-batch training for the non-meta baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    /// Number of optimizer updates.
    pub steps: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-corpus settings: the meta rate and one episode's sample count.
    pub fn paper() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 110,
            steps: 20_000,
            ..TrainConfig::desk()
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 22,
            steps: 600,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// Per-step record of [`supervised_train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainStep {
    pub step: usize,
    pub stats: BatchStats,
}

/// Epoch loop over `samples` in seeded order. A single batch covering every
/// sample keeps the original order.
pub fn supervised_train<L: Learner>(
    learner: &L,
    params: &ParamStore,
    samples: &[L::Sample],
    cfg: &TrainConfig,
) -> Result<(ParamStore, Vec<TrainStep>)>
where
    L::Sample: Clone,
{
    if samples.is_empty() {
        return Err(Error::contract("supervised training needs samples"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let mut theta = params.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip_norm, &theta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.steps);
    let single_batch = cfg.batch_size >= samples.len();
    for step in 0..cfg.steps {
        let batch: Vec<L::Sample> = if single_batch {
            samples.to_vec()
        } else {
            if cursor + cfg.batch_size > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let b = order[cursor..cursor + cfg.batch_size]
                .iter()
                .map(|&i| samples[i].clone())
                .collect();
            cursor += cfg.batch_size;
            b
        };
        let (stats, grads) = learner.loss_and_grads(&theta, &batch)?;
        stats.check_finite()?;
        history.push(TrainStep { step, stats });
        opt.step(&mut theta, grads)?;
    }
    Ok((theta, history))
}

impl Learner for KnowledgeModel {
    type Sample = DialogueSample;

    fn loss_and_grads(
        &self,
        params: &ParamStore,
        samples: &[DialogueSample],
    ) -> Result<(BatchStats, Grads)> {
        if samples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let scale = 1.0 / samples.len() as f64;
        let mut grads = Grads::zeros_like(params);
        let mut acc = StatsAccumulator::default();
        for s in samples {
            let (out, g) = KnowledgeModel::loss_and_grads(self, params, s)?;
            acc.add(&out.losses, out.selected(), s.gold_triplet);
            grads.add_scaled(&g, scale)?;
        }
        Ok((acc.finish(), grads))
    }

    fn evaluate(&self, params: &ParamStore, samples: &[DialogueSample]) -> Result<BatchStats> {
        if samples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut acc = StatsAccumulator::default();
        for s in samples {
            let out = self.run(params, s)?;
            acc.add(&out.losses, out.selected(), s.gold_triplet);
        }
        Ok(acc.finish())
    }
}

#[derive(Default)]
struct StatsAccumulator {
    sum: Losses,
    n: usize,
    labelled: usize,
    correct: usize,
}

impl StatsAccumulator {
    fn add(&mut self, l: &Losses, selected: usize, gold: Option<usize>) {
        self.sum.kl += l.kl;
        self.sum.nll += l.nll;
        self.sum.bow += l.bow;
        self.sum.total += l.total;
        self.n += 1;
        if let Some(g) = gold {
            self.labelled += 1;
            if g == selected {
                self.correct += 1;
            }
        }
    }

    fn finish(self) -> BatchStats {
        let n = self.n.max(1) as f64;
        BatchStats {
            losses: Losses {
                kl: self.sum.kl / n,
                nll: self.sum.nll / n,
                bow: self.sum.bow / n,
                total: self.sum.total / n,
            },
            sel_acc: if self.labelled == 0 {
                0.0
            } else {
                self.correct as f64 / self.labelled as f64
            },
            n: self.n,
        }
    }
}
