//! Mixed-dataset training: every iteration picks one dataset, draws a
//! prompt and a query batch from its training split, augments the scores
//! jointly and takes one Adam step on the L1 loss.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_joint, AugmentConfig};
use crate::autograd::{Graph, Tensor};
use crate::datasets::sampling::{samplers, IsppSampler};
use crate::datasets::{prepare_split, Dataset, Ispp, PromptPair, Sample, SplitProtocol};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{plcc, srocc};
use crate::model::{Checkpoint, ModelConfig, PromptIqa};
use crate::rng::{self, Rng, RngState};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default)]
    pub no_mixed_training: bool,
    #[serde(default)]
    pub no_prompt: bool,
    #[serde(default)]
    pub no_random_scale: bool,
    #[serde(default)]
    pub no_random_flip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr")]
    pub weight_decay: f64,
    #[serde(default = "default_period")]
    pub cosine_period_epochs: usize,
    #[serde(default = "default_n_prompts")]
    pub n_prompts: usize,
    /// Defaults to one pass over the pooled training splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    /// Prompt sampler used while training.
    #[serde(default = "default_sampler")]
    pub train_sampler: String,
    /// Checkpoint every this many epochs; the final epoch always writes one.
    #[serde(default = "default_one")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-5
}
fn default_period() -> usize {
    50
}
fn default_n_prompts() -> usize {
    10
}
fn default_sampler() -> String {
    "interval".into()
}
fn default_one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            weight_decay: default_lr(),
            cosine_period_epochs: default_period(),
            n_prompts: default_n_prompts(),
            steps_per_epoch: None,
            train_sampler: default_sampler(),
            checkpoint_every: default_one(),
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("cosine_period_epochs", self.cosine_period_epochs),
            ("n_prompts", self.n_prompts),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be >= 1")));
            }
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("train.steps_per_epoch must be >= 1".into()));
        }
        samplers().get(&self.train_sampler)?;
        Ok(())
    }

    /// Augmentation with the ablated strategies switched off.
    pub fn effective_augment(&self, aug: &AugmentConfig) -> AugmentConfig {
        AugmentConfig {
            p_rs: if self.ablation.no_random_scale { 0.0 } else { aug.p_rs },
            p_rf: if self.ablation.no_random_flip { 0.0 } else { aug.p_rf },
            ..aug.clone()
        }
    }
}

/// Cosine annealing to zero, restarting every `cosine_period_epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let p = cfg.cosine_period_epochs.max(1);
    let phase = (epoch % p) as f64 / p as f64;
    0.5 * cfg.lr * (1.0 + (PI * phase).cos())
}

/// Mean absolute error.
pub fn l1_loss(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64
}

/// One dataset's normalized splits.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub name: String,
    pub train: Vec<Sample>,
    /// Held out; only used for the per-epoch validation log.
    pub val: Vec<Sample>,
}

impl TrainingSet {
    /// Repeat `repeat` of the protocol: the training split trains, the test
    /// split is the validation slice.
    pub fn from_dataset(ds: &Dataset, protocol: &SplitProtocol, repeat: usize) -> Result<Self> {
        let protocol = SplitProtocol {
            group_aware: protocol.group_aware && ds.spec.has_reference_groups,
            ..protocol.clone()
        };
        let (train, val) = prepare_split(&ds.samples, &protocol, repeat)?;
        Ok(Self {
            name: ds.name().to_string(),
            train,
            val,
        })
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut PromptIqa, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param) in model.params_mut().iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g + self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: PromptIqa,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: Rng,
    pub loss_history: Vec<f64>,
}

/// Serializable part of [`TrainState`] stored inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStateRecord {
    pub optimizer: Adam,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub loss_history: Vec<f64>,
}

const TRAIN_STREAM: u64 = 0x7_0000;

impl TrainState {
    pub fn new(model: PromptIqa, cfg: &TrainConfig) -> Self {
        Self {
            model,
            optimizer: Adam::new(cfg.weight_decay),
            epoch: 0,
            step: 0,
            rng: rng::stream(cfg.seed, TRAIN_STREAM),
            loss_history: Vec::new(),
        }
    }

    pub fn record(&self) -> TrainStateRecord {
        TrainStateRecord {
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
            loss_history: self.loss_history.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(self.record()))
    }

    /// Restores a state saved with [`TrainState::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let rec = ck
            .train_state
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no training state to resume".into()))?;
        let rng = rec
            .rng
            .restore()
            .ok_or_else(|| Error::Config("checkpoint has a malformed rng state".into()))?;
        Ok(Self {
            model: ck.model()?,
            optimizer: rec.optimizer.clone(),
            epoch: rec.epoch,
            step: rec.step,
            rng,
            loss_history: rec.loss_history.clone(),
        })
    }
}

/// One iteration's data: a prompt (absent without the prompt pathway) and
/// disjoint query samples from the same training split.
#[derive(Clone, Debug)]
pub struct Batch {
    pub dataset: String,
    pub ispp: Option<Ispp>,
    pub queries: Vec<Sample>,
}

impl Batch {
    pub fn gts(&self) -> Vec<f64> {
        self.queries.iter().map(|q| q.norm_score).collect()
    }
}

pub fn make_batch(sets: &[TrainingSet], cfg: &TrainConfig, sampler: &dyn IsppSampler, rng: &mut Rng) -> Result<Batch> {
    if sets.is_empty() {
        return Err(Error::Config("no training datasets".into()));
    }
    let set = &sets[rng.random_range(0..sets.len())];
    let n = if cfg.ablation.no_prompt { 0 } else { cfg.n_prompts };
    let needed = n + cfg.batch_size;
    if set.train.len() < needed {
        return Err(Error::NotEnoughSamples {
            requested: needed,
            available: set.train.len(),
        });
    }
    let mut taken = vec![false; set.train.len()];
    let ispp = if n > 0 {
        let ispp = sampler.sample(&set.train, n, rng.next_u64(), &set.name)?;
        for p in &ispp.pairs {
            if let Some(i) = set.train.iter().position(|s| s.id == p.id) {
                taken[i] = true;
            }
        }
        Some(ispp)
    } else {
        None
    };
    let free: Vec<usize> = (0..set.train.len()).filter(|&i| !taken[i]).collect();
    let queries = index::sample(rng, free.len(), cfg.batch_size)
        .into_iter()
        .map(|k| set.train[free[k]].clone())
        .collect();
    Ok(Batch {
        dataset: set.name.clone(),
        ispp,
        queries,
    })
}

/// Values written when a step produces a non-finite loss.
#[derive(Serialize)]
struct Dump<'a> {
    step: u64,
    epoch: usize,
    dataset: &'a str,
    lr: f64,
    prompt_scores: Vec<f64>,
    targets: &'a [f64],
    predictions: Vec<f64>,
    non_finite_params: Vec<&'a str>,
}

/// Augments, runs the forward pass, and applies one optimizer update.
/// Returns the loss before the update.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    dump_dir: Option<&Path>,
) -> Result<f64> {
    let aug = cfg.effective_augment(aug);
    let prompt_scores = batch.ispp.as_ref().map(Ispp::scores).unwrap_or_default();
    let (prompts, targets) = if state.model.uses_prompt() {
        let (p, t, _) = augment_joint(&prompt_scores, &batch.gts(), &aug, &mut state.rng);
        (p, t)
    } else {
        (prompt_scores, batch.gts())
    };
    let images: Vec<Arc<_>> = batch.queries.iter().map(|q| q.image.clone()).collect();

    let mut g = Graph::new();
    let p = state.model.params().bind(&mut g);
    let fwd = state
        .model
        .forward(&mut g, &p, batch.ispp.as_ref(), Some(&prompts), &images)?;
    let preds = g.concat_rows(&fwd.scores)?;
    let gt = g.constant(Tensor::new(vec![targets.len(), 1], targets.clone())?);
    let diff = g.sub(preds, gt)?;
    let abs = g.abs(diff);
    let loss_var = g.mean_all(abs);
    let loss = g.value(loss_var).data()[0];
    let lr = lr_at(state.epoch, cfg);

    if !loss.is_finite() {
        let dump = match dump_dir {
            Some(dir) => {
                let path = dir.join(format!("nonfinite-step{}.json", state.step));
                let d = Dump {
                    step: state.step,
                    epoch: state.epoch,
                    dataset: &batch.dataset,
                    lr,
                    prompt_scores: prompts,
                    targets: &targets,
                    predictions: g.value(preds).data().to_vec(),
                    non_finite_params: state
                        .model
                        .params()
                        .iter()
                        .filter(|(_, t)| !t.is_finite())
                        .map(|(k, _)| k.as_str())
                        .collect(),
                };
                fs::create_dir_all(dir)?;
                fs::write(&path, serde_json::to_vec_pretty(&d)?)?;
                Some(path)
            }
            None => None,
        };
        return Err(Error::NonFiniteLoss {
            step: state.step,
            dataset: batch.dataset.clone(),
            dump,
        });
    }

    let grads = g.backward(loss_var)?;
    let grads = p.grads(&g, &grads);
    state.optimizer.step(&mut state.model, &grads, lr);
    state.step += 1;
    state.loss_history.push(loss);
    Ok(loss)
}

/// One line of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub dataset: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    pub epoch: usize,
    pub dataset: String,
    pub srocc: f64,
    pub plcc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Logs, checkpoints and failure dumps go here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh model.
    pub resume: Option<TrainState>,
    /// Seed for the fresh model's weights; defaults to the training seed.
    pub init_seed: Option<u64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub validation: Vec<ValRow>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let exists = path.exists() && fs::metadata(path)?.len() > 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Default number of iterations per epoch: one pass over all training
/// samples.
pub fn steps_per_epoch(sets: &[TrainingSet], cfg: &TrainConfig) -> usize {
    cfg.steps_per_epoch.unwrap_or_else(|| {
        let total: usize = sets.iter().map(|s| s.train.len()).sum();
        total.div_ceil(cfg.batch_size).max(1)
    })
}

/// Scores `val` against a prompt drawn from `train` with `sampler`.
pub fn validate_set(model: &PromptIqa, set: &TrainingSet, n: usize, sampler: &dyn IsppSampler) -> Result<(f64, f64)> {
    let ispp = if model.uses_prompt() {
        Some(sampler.sample(&set.train, n.min(set.train.len()), 0, &set.name)?)
    } else {
        None
    };
    let images: Vec<_> = set.val.iter().map(|s| s.image.clone()).collect();
    let pred = model.predict(ispp.as_ref(), &images)?;
    let gt: Vec<f64> = set.val.iter().map(|s| s.norm_score).collect();
    Ok((srocc(&pred, &gt), plcc(&pred, &gt)))
}

pub fn run_training(
    sets: &[TrainingSet],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if sets.is_empty() {
        return Err(Error::Config("at least one training dataset is required".into()));
    }
    if cfg.ablation.no_mixed_training && sets.len() != 1 {
        return Err(Error::Config(format!(
            "no_mixed_training needs exactly one dataset, got {}",
            sets.len()
        )));
    }
    let model_cfg = ModelConfig {
        use_prompt: !cfg.ablation.no_prompt,
        ..model_cfg.clone()
    };
    let sampler = samplers().get(&cfg.train_sampler)?;
    let mut state = match opts.resume {
        Some(s) => {
            if s.model.config() != &model_cfg {
                return Err(Error::ConfigHashMismatch {
                    expected: model_cfg.hash(),
                    found: s.model.config().hash(),
                });
            }
            s
        }
        None => TrainState::new(PromptIqa::new(model_cfg, opts.init_seed.unwrap_or(cfg.seed))?, cfg),
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let steps = steps_per_epoch(sets, cfg);
    let mut log = Vec::new();
    let mut validation = Vec::new();
    while state.epoch < cfg.epochs {
        let mut epoch_log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = make_batch(sets, cfg, sampler.as_ref(), &mut state.rng)?;
            let lr = lr_at(state.epoch, cfg);
            let loss = train_step(&mut state, &batch, cfg, aug, opts.out_dir.as_deref())?;
            epoch_log.push(LogRow {
                epoch: state.epoch,
                step: state.step,
                dataset: batch.dataset,
                loss,
                lr,
            });
        }
        let mut epoch_val = Vec::new();
        for set in sets.iter().filter(|s| s.val.len() >= 2) {
            let (s, p) = validate_set(&state.model, set, cfg.n_prompts, sampler.as_ref())?;
            epoch_val.push(ValRow {
                epoch: state.epoch,
                dataset: set.name.clone(),
                srocc: s,
                plcc: p,
            });
        }
        let mean_loss = epoch_log.iter().map(|r| r.loss).sum::<f64>() / epoch_log.len() as f64;
        log::info!("epoch {} mean loss {mean_loss:.5}", state.epoch);
        state.epoch += 1;
        if let Some(dir) = &opts.out_dir {
            append_csv(&dir.join(METRICS_FILE), &epoch_log)?;
            append_csv(&dir.join(VALIDATION_FILE), &epoch_val)?;
            if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
                state.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        log.extend(epoch_log);
        validation.extend(epoch_val);
    }
    Ok(TrainOutcome { state, log, validation })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_ft_steps")]
    pub steps: usize,
    #[serde(default = "default_ft_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_ft_steps() -> usize {
    50
}
fn default_ft_lr() -> f64 {
    1e-4
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: default_ft_steps(),
            lr: default_ft_lr(),
            weight_decay: 0.0,
        }
    }
}

/// Full-batch L1 regression of a prompt-free model on the given pairs.
/// Returns the tuned model and the loss before each step.
pub fn finetune_on_isps(model: &PromptIqa, pairs: &[PromptPair], cfg: &FinetuneConfig) -> Result<(PromptIqa, Vec<f64>)> {
    if model.uses_prompt() {
        return Err(Error::Config("fine-tuning applies to prompt-free models only".into()));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut model = model.clone();
    let mut opt = Adam::new(cfg.weight_decay);
    let images: Vec<_> = pairs.iter().map(|p| p.image.clone()).collect();
    let targets: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let fwd = model.forward(&mut g, &p, None, None, &images)?;
        let preds = g.concat_rows(&fwd.scores)?;
        let gt = g.constant(Tensor::new(vec![targets.len(), 1], targets.clone())?);
        let diff = g.sub(preds, gt)?;
        let abs = g.abs(diff);
        let loss_var = g.mean_all(abs);
        let loss = g.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as u64,
                dataset: "fine-tune".into(),
                dump: None,
            });
        }
        losses.push(loss);
        let grads = g.backward(loss_var)?;
        opt.step(&mut model, &p.grads(&g, &grads), cfg.lr);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic::{synth_requirement_dataset, SynthConfig};

    fn set(name: &str, req: &str, n: usize, seed: u64) -> TrainingSet {
        let s = synth_requirement_dataset(&SynthConfig::new(name, req, n, 0.0, seed)).unwrap();
        let protocol = SplitProtocol {
            repeats: 1,
            ..Default::default()
        };
        TrainingSet::from_dataset(&s.dataset, &protocol, 0).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            n_prompts: 3,
            steps_per_epoch: Some(3),
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-5);
        assert!((lr_at(25, &cfg) - 0.5e-5).abs() < 1e-20);
        assert_eq!(lr_at(50, &cfg), 1e-5);
    }

    #[test]
    fn l1_examples() {
        assert!((l1_loss(&[0.2, 0.8], &[0.4, 0.4]) - 0.3).abs() < 1e-15);
        assert_eq!(l1_loss(&[0.1, 0.9], &[0.1, 0.9]), 0.0);
    }

    #[test]
    fn batches_are_disjoint_and_sized() {
        let sets = [set("a", "identity", 40, 1)];
        let cfg = small_cfg();
        let sampler = samplers().get("random").unwrap();
        let mut r = rng::stream(0, 0);
        for _ in 0..50 {
            let b = make_batch(&sets, &cfg, sampler.as_ref(), &mut r).unwrap();
            let ispp = b.ispp.unwrap();
            assert_eq!(ispp.len(), 3);
            assert_eq!(b.queries.len(), 4);
            for q in &b.queries {
                assert!(ispp.pairs.iter().all(|p| p.id != q.id));
            }
        }
    }

    #[test]
    fn too_small_dataset_errors() {
        let sets = [set("a", "identity", 20, 1)];
        let cfg = TrainConfig {
            batch_size: 16,
            n_prompts: 10,
            ..small_cfg()
        };
        let sampler = samplers().get("interval").unwrap();
        assert!(matches!(
            make_batch(&sets, &cfg, sampler.as_ref(), &mut rng::stream(0, 0)),
            Err(Error::NotEnoughSamples { .. })
        ));
    }

    /// Binomial oracle: each of two datasets is chosen 5000 times within 3σ.
    #[test]
    fn datasets_are_chosen_uniformly() {
        let sets = [set("a", "identity", 40, 1), set("b", "flip", 40, 2)];
        let cfg = small_cfg();
        let sampler = samplers().get("interval").unwrap();
        let mut r = rng::stream(3, 0);
        let n = 10_000;
        let a = (0..n)
            .filter(|_| make_batch(&sets, &cfg, sampler.as_ref(), &mut r).unwrap().dataset == "a")
            .count();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((a as f64 - n as f64 / 2.0).abs() < 3.0 * sd, "{a}");
    }

    #[test]
    fn no_prompt_batches_carry_no_prompt() {
        let sets = [set("a", "identity", 40, 1)];
        let mut cfg = small_cfg();
        cfg.ablation.no_prompt = true;
        let sampler = samplers().get("interval").unwrap();
        let b = make_batch(&sets, &cfg, sampler.as_ref(), &mut rng::stream(0, 0)).unwrap();
        assert!(b.ispp.is_none());
    }

    #[test]
    fn adam_matches_hand_computed_first_step() {
        let mut m = PromptIqa::new(ModelConfig::miniature(), 0).unwrap();
        let before = m.params().get("head.fc2.bias").unwrap().data()[0];
        let mut grads = BTreeMap::new();
        grads.insert("head.fc2.bias".to_string(), Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        Adam::new(0.0).step(&mut m, &grads, 0.1);
        // first step moves by lr * g / (|g| + eps) after bias correction
        let after = m.params().get("head.fc2.bias").unwrap().data()[0];
        let expected = before - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((after - expected).abs() < 1e-15);
    }

    #[test]
    fn one_epoch_writes_one_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let sets = [set("a", "identity", 20, 1)];
        let cfg = small_cfg();
        let out = run_training(
            &sets,
            &ModelConfig::miniature(),
            &cfg,
            &AugmentConfig::default(),
            RunOptions {
                out_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.log.len(), 3);
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
        let checkpoints: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("checkpoint"))
            .collect();
        assert_eq!(checkpoints.len(), 1);
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert!(csv.starts_with("epoch,step,dataset,loss,lr\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn finetune_zero_steps_is_identity() {
        let cfg = ModelConfig {
            use_prompt: false,
            ..ModelConfig::miniature()
        };
        let m = PromptIqa::new(cfg, 0).unwrap();
        let s = set("a", "identity", 20, 1);
        let pairs: Vec<PromptPair> = s.train[..4]
            .iter()
            .map(|x| PromptPair {
                id: x.id.clone(),
                image: x.image.clone(),
                score: x.norm_score,
            })
            .collect();
        let (tuned, losses) = finetune_on_isps(&m, &pairs, &FinetuneConfig { steps: 0, ..Default::default() }).unwrap();
        assert!(losses.is_empty());
        assert_eq!(tuned.params(), m.params());
        let prompted = PromptIqa::new(ModelConfig::miniature(), 0).unwrap();
        assert!(finetune_on_isps(&prompted, &pairs, &FinetuneConfig::default()).is_err());
    }
}
