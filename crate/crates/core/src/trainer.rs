//! Run configuration, the training loop for every mode, evaluation, metrics
//! logging and checkpoint resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::LowRankAdaptor;
use crate::allocator::{Allocator, AllocatorConfig, BudgetSchedule, ImportanceState, PruneEvent};
use crate::backbone::{argmax, build_two_stream, BackboneConfig, MultimodalModel};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::CSV_SCHEMA_VERSION;
use crate::optim::{Moments, Optimizer, OptimizerKind};
use crate::synth::{load_split, Dataset, Split};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LmaAdaptive,
    LmaFixed,
    TwoStream,
    Unimodal,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LmaAdaptive => "lma_adaptive",
            Mode::LmaFixed => "lma_fixed",
            Mode::TwoStream => "two_stream",
            Mode::Unimodal => "unimodal",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lma_adaptive" => Mode::LmaAdaptive,
            "lma_fixed" => Mode::LmaFixed,
            "two_stream" => Mode::TwoStream,
            "unimodal" => Mode::Unimodal,
            _ => return Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        })
    }
}

fn d_r_init() -> usize {
    9
}
fn d_r_target() -> usize {
    6
}
fn d_epochs() -> usize {
    50
}
fn d_warmup() -> usize {
    8
}
fn d_decay_end() -> usize {
    25
}
fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    0.05
}
fn d_beta() -> f64 {
    0.85
}
fn d_interval() -> Option<usize> {
    Some(10)
}
fn d_backbone() -> BackboneConfig {
    BackboneConfig::reference()
}
fn d_output() -> PathBuf {
    PathBuf::from("runs/default")
}

/// One training run. Every field has a default except `dataset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `train.fora` and `val.fora`.
    pub dataset: PathBuf,
    #[serde(default = "d_backbone")]
    pub backbone: BackboneConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "d_r_init")]
    pub r_init: usize,
    #[serde(default = "d_r_target")]
    pub r_target: usize,
    /// Rank of every adaptor in `lma_fixed` mode; defaults to `r_target`.
    #[serde(default)]
    pub fixed_rank: Option<usize>,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_decay_end")]
    pub decay_end_epoch: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta")]
    pub beta1: f64,
    #[serde(default = "d_beta")]
    pub beta2: f64,
    /// Steps between prunes; `null` never prunes.
    #[serde(default = "d_interval")]
    pub prune_interval: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many epochs (the final one is always written).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_mode() -> Mode {
    Mode::LmaAdaptive
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, mode: Mode) -> Self {
        Self {
            dataset: dataset.into(),
            backbone: d_backbone(),
            mode,
            r_init: d_r_init(),
            r_target: d_r_target(),
            fixed_rank: None,
            epochs: d_epochs(),
            warmup_epochs: d_warmup(),
            decay_end_epoch: d_decay_end(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            beta1: d_beta(),
            beta2: d_beta(),
            prune_interval: d_interval(),
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            output_dir: d_output(),
            checkpoint_every: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Adaptor rank the model is built with.
    pub fn build_rank(&self) -> usize {
        match self.mode {
            Mode::LmaAdaptive => self.r_init,
            Mode::LmaFixed => self.fixed_rank.unwrap_or(self.r_target),
            Mode::TwoStream | Mode::Unimodal => 0,
        }
    }

    /// Every problem with this config, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.warmup_epochs < self.decay_end_epoch && self.decay_end_epoch < self.epochs) {
            errs.push(format!(
                "need warmup_epochs < decay_end_epoch < epochs, got {} / {} / {}",
                self.warmup_epochs, self.decay_end_epoch, self.epochs
            ));
        }
        if self.r_target > self.r_init {
            errs.push(format!("r_target {} exceeds r_init {}", self.r_target, self.r_init));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let alloc = AllocatorConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            prune_interval: self.prune_interval,
        };
        errs.extend(alloc.problems());
        errs.extend(self.optimizer.problems());
        if self.checkpoint_every == Some(0) {
            errs.push("checkpoint_every must be at least 1".into());
        }
        let rank = match self.mode {
            Mode::LmaAdaptive => self.r_init.max(self.r_target),
            _ => self.build_rank(),
        };
        errs.extend(self.backbone.problems(rank));
        if self.mode != Mode::Unimodal && self.backbone.modalities.len() != 2 {
            errs.push("multimodal modes need exactly two modalities in the backbone config".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n_adaptors: usize, samples: usize) -> Result<BudgetSchedule> {
        let r = self.build_rank();
        let (b0, bt) = match self.mode {
            Mode::LmaAdaptive => (self.r_init, self.r_target),
            _ => (r, r),
        };
        BudgetSchedule::from_epochs(
            n_adaptors,
            b0,
            bt,
            self.warmup_epochs,
            self.decay_end_epoch,
            self.epochs,
            self.steps_per_epoch(samples),
        )
    }

    fn allocator_config(&self) -> AllocatorConfig {
        AllocatorConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            prune_interval: match self.mode {
                Mode::LmaAdaptive => self.prune_interval,
                _ => None,
            },
        }
    }

    /// The untrained model for this run.
    pub fn build_model(&self) -> Result<MultimodalModel> {
        let backbone = self.backbone.clone().with_rank(self.build_rank());
        match self.mode {
            Mode::LmaAdaptive | Mode::LmaFixed => MultimodalModel::build_lma(&backbone, self.seed),
            Mode::TwoStream => build_two_stream(&backbone, self.seed),
            Mode::Unimodal => MultimodalModel::build_unimodal(&backbone, self.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Steps completed after this epoch.
    pub steps: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub active_rank_total: usize,
    pub budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

/// Accuracy and per-class accuracy of `model` on `data`. Never mutates the model.
pub fn evaluate(model: &MultimodalModel, data: &Dataset) -> Result<EvalReport> {
    if model.input_modalities() > 2 {
        return Err(Error::InvalidArgument(format!(
            "model expects {} modalities, datasets carry 2",
            model.input_modalities()
        )));
    }
    let cfg = model.config();
    if data.channels != cfg.input_channels {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} channels, model expects {}",
            data.channels, cfg.input_channels
        )));
    }
    if data.classes != cfg.head.classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model predicts {}",
            data.classes, cfg.head.classes
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation on an empty split".into()));
    }
    let classes = data.classes;
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let batch = data.batch(chunk);
        let logits = model.predict(&batch.inputs)?;
        for (r, &label) in batch.labels.iter().enumerate() {
            seen[label] += 1;
            if argmax(&logits.data()[r * classes..(r + 1) * classes]) == label {
                hit[label] += 1;
            }
        }
    }
    let total: usize = hit.iter().sum();
    Ok(EvalReport {
        samples: data.len(),
        accuracy: total as f64 / data.len() as f64,
        per_class: hit
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
            .collect(),
    })
}

const RNG_TAG: &[u8] = b"chacha8";
const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Complete state of a run between epochs.
#[derive(Clone, Debug)]
pub struct Session {
    pub config: RunConfig,
    pub model: MultimodalModel,
    pub optimizer: Optimizer,
    pub allocator: Allocator,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub history: Vec<EpochRecord>,
    pub prunes: Vec<PruneEvent>,
    /// Metrics CSV rows (without preamble), each tagged with its epoch.
    rows: Vec<(usize, String)>,
}

pub const METRICS_HEADER: &str = "kind,epoch,step,loss,train_accuracy,active_rank_total,budget,detail";

impl Session {
    /// Fresh run for `train_samples` training samples.
    pub fn new(config: &RunConfig, train_samples: usize) -> Result<Self> {
        config.validate()?;
        if train_samples == 0 {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let model = config.build_model()?;
        let schedule = config.schedule(model.adaptor_count(), train_samples)?;
        let allocator = Allocator::new(&model, config.allocator_config(), schedule)?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            allocator,
            rng,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            prunes: Vec::new(),
            rows: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let cfg = self.model.config();
        if data.channels != cfg.input_channels || data.classes != cfg.head.classes {
            return Err(Error::InvalidArgument(format!(
                "dataset ({} channels, {} classes) does not match the model ({} channels, {} classes)",
                data.channels, data.classes, cfg.input_channels, cfg.head.classes
            )));
        }
        let spe = self.config.steps_per_epoch(data.len());
        if spe * self.config.epochs != self.allocator.schedule.total_steps {
            return Err(Error::InvalidArgument(
                "training split size differs from the one the schedule was built for".into(),
            ));
        }
        Ok(())
    }

    /// Runs one epoch over shuffled `data`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        if self.is_done() {
            return Err(Error::InvalidArgument("run already finished".into()));
        }
        self.check_data(data)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let epoch = self.epoch + 1;
        let (mut loss_sum, mut correct, mut count) = (0.0, 0usize, 0usize);
        for idx in order.chunks(self.config.batch_size) {
            let batch = data.batch(idx);
            let out = self.allocator.step(&mut self.model, &batch, &mut self.optimizer, self.step)?;
            if !out.stats.loss.is_finite() {
                return Err(Error::Statistic(format!("loss diverged at step {}", self.step)));
            }
            loss_sum += out.stats.loss * out.stats.count as f64;
            correct += out.stats.correct;
            count += out.stats.count;
            if let Some(ev) = out.prune {
                self.rows.push((epoch, prune_row(epoch, &ev)));
                self.prunes.push(ev);
            }
            self.step += 1;
        }
        self.epoch = epoch;
        let rec = EpochRecord {
            epoch,
            steps: self.step,
            loss: loss_sum / count as f64,
            train_accuracy: correct as f64 / count as f64,
            active_rank_total: self.model.active_rank_total(),
            budget: if self.allocator.pruning_enabled() {
                self.allocator.schedule.budget(self.step - 1)
            } else {
                self.model.active_rank_total()
            },
        };
        self.rows.push((
            epoch,
            format!(
                "epoch,{},{},{},{},{},{},",
                rec.epoch, rec.steps, rec.loss, rec.train_accuracy, rec.active_rank_total, rec.budget
            ),
        ));
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs until `epochs` epochs are complete or `stop_after` is reached.
    pub fn run(&mut self, data: &Dataset, stop_after: Option<usize>) -> Result<()> {
        let end = stop_after.unwrap_or(self.config.epochs).min(self.config.epochs);
        while self.epoch < end {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("schema_version,{CSV_SCHEMA_VERSION}\n{METRICS_HEADER}\n");
        for (_, row) in &self.rows {
            s.push_str(row);
            s.push('\n');
        }
        s
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.model.visit_params(|name, _, t| ck.push_tensor(name, t.clone()));
        for (name, m) in self.optimizer.moments() {
            ck.push_tensor(format!("opt.m.{name}"), Tensor::new(vec![m.m.len()], m.m.clone()).expect("1-d"));
            ck.push_tensor(format!("opt.v.{name}"), Tensor::new(vec![m.v.len()], m.v.clone()).expect("1-d"));
        }
        for (k, a) in self.allocator.state.adaptors.iter().enumerate() {
            for (part, st) in [("P", &a.p), ("Lambda", &a.lambda), ("Q", &a.q)] {
                let n = st.len();
                ck.push_tensor(format!("imp.{k}.{part}.bar"), Tensor::new(vec![n], st.bar.clone()).expect("1-d"));
                ck.push_tensor(format!("imp.{k}.{part}.unc"), Tensor::new(vec![n], st.unc.clone()).expect("1-d"));
            }
        }
        for (a, prefix) in self.model.adaptors().zip(self.model.adaptor_prefixes()) {
            ck.push_blob(format!("mask.{prefix}"), a.active().iter().map(|&b| b as u8).collect());
        }
        ck.push_blob("config.json", self.config.to_json().into_bytes());
        ck.push_blob("rng.algorithm", RNG_TAG.to_vec());
        let mut rng = Vec::with_capacity(56);
        rng.extend(self.rng.get_seed());
        rng.extend(self.rng.get_stream().to_le_bytes());
        rng.extend(self.rng.get_word_pos().to_le_bytes());
        ck.push_blob("rng.state", rng);
        ck.push_blob("meta.epoch", (self.epoch as u64).to_le_bytes().to_vec());
        ck.push_blob("meta.step", (self.step as u64).to_le_bytes().to_vec());
        ck.push_blob("meta.optimizer_step", self.optimizer.step_count().to_le_bytes().to_vec());
        ck.push_blob("meta.importance_step", self.allocator.state.step.to_le_bytes().to_vec());
        ck.push_blob("meta.frozen", vec![self.allocator.is_frozen() as u8]);
        let schedule = serde_json::to_vec(&self.allocator.schedule).expect("schedule serializes");
        ck.push_blob("meta.schedule", schedule);
        ck.push_blob("metrics.rows", rows_blob(&self.rows));
        ck
    }

    /// Rebuilds a session from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_json(utf8(ck.require_blob("config.json")?)?)?;
        let mut model = config.build_model()?;

        // adaptors may have been compacted, so rebuild them from stored shapes
        let prefixes = model.adaptor_prefixes();
        for (a, prefix) in model.adaptors_mut().zip(&prefixes) {
            let p = ck.require_tensor(&format!("{prefix}.P"))?.clone();
            let l = ck.require_tensor(&format!("{prefix}.Lambda"))?.clone();
            let q = ck.require_tensor(&format!("{prefix}.Q"))?.clone();
            let mask: Vec<bool> = ck.require_blob(&format!("mask.{prefix}"))?.iter().map(|&b| b != 0).collect();
            *a = LowRankAdaptor::from_parts(a.target(), p, l, q, mask)?;
        }
        let mut failure = None;
        model.visit_params_mut(|name, _, t| match ck.tensor(name) {
            Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            _ => failure = failure.take().or(Some(name.to_string())),
        });
        if let Some(name) = failure {
            return Err(Error::InvalidArgument(format!("checkpoint tensor {name} missing or misshapen")));
        }

        let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
        optimizer.set_step_count(read_u64(ck, "meta.optimizer_step")?);
        for (name, t) in &ck.tensors {
            if let Some(param) = name.strip_prefix("opt.m.") {
                let v = ck.require_tensor(&format!("opt.v.{param}"))?;
                optimizer.insert_moments(
                    param.to_string(),
                    Moments {
                        m: t.data().to_vec(),
                        v: v.data().to_vec(),
                    },
                );
            }
        }

        let schedule: BudgetSchedule = serde_json::from_slice(ck.require_blob("meta.schedule")?)?;
        let frozen = ck.require_blob("meta.frozen")?.first() == Some(&1);
        let mut state = if frozen {
            ImportanceState::default()
        } else {
            ImportanceState::for_adaptors(model.adaptors())
        };
        for (k, a) in state.adaptors.iter_mut().enumerate() {
            for (part, st) in [("P", &mut a.p), ("Lambda", &mut a.lambda), ("Q", &mut a.q)] {
                st.bar = ck.require_tensor(&format!("imp.{k}.{part}.bar"))?.data().to_vec();
                st.unc = ck.require_tensor(&format!("imp.{k}.{part}.unc"))?.data().to_vec();
            }
        }
        state.step = read_u64(ck, "meta.importance_step")?;
        let allocator = Allocator::resume(config.allocator_config(), schedule, state, frozen);

        if ck.require_blob("rng.algorithm")? != RNG_TAG {
            return Err(Error::InvalidArgument("checkpoint RNG is not chacha8".into()));
        }
        let raw = ck.require_blob("rng.state")?;
        if raw.len() != 56 {
            return Err(Error::InvalidArgument("checkpoint RNG state has the wrong size".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(raw[..32].try_into().expect("32 bytes"));
        rng.set_stream(u64::from_le_bytes(raw[32..40].try_into().expect("8 bytes")));
        rng.set_word_pos(u128::from_le_bytes(raw[40..56].try_into().expect("16 bytes")));

        Ok(Self {
            config,
            model,
            optimizer,
            allocator,
            rng,
            epoch: read_u64(ck, "meta.epoch")? as usize,
            step: read_u64(ck, "meta.step")? as usize,
            history: Vec::new(),
            prunes: Vec::new(),
            rows: parse_rows_blob(ck.require_blob("metrics.rows")?)?,
        })
    }
}

fn utf8(b: &[u8]) -> Result<&str> {
    std::str::from_utf8(b).map_err(|_| Error::InvalidArgument("checkpoint text entry is not UTF-8".into()))
}

fn read_u64(ck: &Checkpoint, name: &str) -> Result<u64> {
    let b = ck.require_blob(name)?;
    Ok(u64::from_le_bytes(
        b.try_into()
            .map_err(|_| Error::InvalidArgument(format!("checkpoint entry {name} is not 8 bytes")))?,
    ))
}

fn rows_blob(rows: &[(usize, String)]) -> Vec<u8> {
    let mut s = String::new();
    for (e, r) in rows {
        let _ = writeln!(s, "{e}\t{r}");
    }
    s.into_bytes()
}

fn parse_rows_blob(b: &[u8]) -> Result<Vec<(usize, String)>> {
    utf8(b)?
        .lines()
        .map(|l| {
            let (e, r) = l
                .split_once('\t')
                .ok_or_else(|| Error::InvalidArgument("malformed metrics rows in checkpoint".into()))?;
            let e = e
                .parse()
                .map_err(|_| Error::InvalidArgument("malformed metrics rows in checkpoint".into()))?;
            Ok((e, r.to_string()))
        })
        .collect()
}

fn ids(v: &[(usize, usize)]) -> String {
    v.iter().map(|(k, i)| format!("{k}:{i}")).collect::<Vec<_>>().join(" ")
}

fn prune_row(epoch: usize, ev: &PruneEvent) -> String {
    let ranks = ev.active_ranks.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ");
    format!(
        "prune,{epoch},{},,,{},{},ranks={ranks};kept={};dropped={};revived={}",
        ev.step,
        ev.active_ranks.iter().sum::<usize>(),
        ev.budget,
        ids(&ev.outcome.kept),
        ids(&ev.outcome.dropped),
        ids(&ev.outcome.revived)
    )
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.lmack";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.lmack"))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub session: Session,
    pub val: EvalReport,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

fn persist(session: &Session) -> Result<()> {
    let dir = &session.config.output_dir;
    let path = dir.join(METRICS_FILE);
    fs::write(&path, session.metrics_csv()).map_err(|e| Error::io(&path, e))
}

/// Continues `session` to the end, writing metrics and checkpoints under its output directory.
pub fn drive(mut session: Session, train: &Dataset, val: &Dataset) -> Result<RunOutcome> {
    let dir = session.config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let echo = dir.join("config.json");
    fs::write(&echo, session.config.to_json() + "\n").map_err(|e| Error::io(&echo, e))?;
    while !session.is_done() {
        session.run_epoch(train)?;
        persist(&session)?;
        if let Some(n) = session.config.checkpoint_every {
            if session.epoch % n == 0 {
                session.to_checkpoint().write(&checkpoint_path(&dir, session.epoch))?;
            }
        }
    }
    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    session.to_checkpoint().write(&final_checkpoint)?;
    let val = evaluate(&session.model, val)?;
    Ok(RunOutcome {
        session,
        val,
        metrics_path: dir.join(METRICS_FILE),
        final_checkpoint,
    })
}

/// Trains from scratch on the dataset named in `config`.
pub fn train(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let train = load_split(&config.dataset, Split::Train)?;
    let val = load_split(&config.dataset, Split::Val)?;
    let session = Session::new(config, train.len())?;
    drive(session, &train, &val)
}

/// Continues a run from one of its checkpoints.
pub fn resume(checkpoint: &Path) -> Result<RunOutcome> {
    let session = Session::from_checkpoint(&Checkpoint::read(checkpoint)?)?;
    let train = load_split(&session.config.dataset, Split::Train)?;
    let val = load_split(&session.config.dataset, Split::Val)?;
    drive(session, &train, &val)
}

/// The model stored in a checkpoint.
pub fn load_model(checkpoint: &Path) -> Result<MultimodalModel> {
    Ok(Session::from_checkpoint(&Checkpoint::read(checkpoint)?)?.model)
}
