//! Two-stage training: stage 1 trains only the task heads on a frozen
//! network, stage 2 unfreezes everything and adds the attention
//! consistency term. Also hosts the Adam optimizer and evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{batches, collate, CurationRules, Sample};
use crate::error::{Error, Result};
use crate::losses::{multitask_loss, LossWeights, Stage};
use crate::metrics::{MetricReport, PredictionSet};
use crate::model::{DdamfnModel, ModelConfig, ParamGroup, Task, N_EXPR};
use crate::nn::{Checkpoint, Mode, Module};
use crate::tensor::{sigmoid, Tape};
use crate::thresholds::{default_grid, ThresholdSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Multitask,
    Va,
    Expr,
    Au,
}

impl TrainMode {
    pub fn task(self) -> Option<Task> {
        match self {
            TrainMode::Multitask => None,
            TrainMode::Va => Some(Task::Va),
            TrainMode::Expr => Some(Task::Expr),
            TrainMode::Au => Some(Task::Au),
        }
    }
}

impl From<Option<Task>> for TrainMode {
    fn from(t: Option<Task>) -> Self {
        match t {
            None => TrainMode::Multitask,
            Some(Task::Va) => TrainMode::Va,
            Some(Task::Expr) => TrainMode::Expr,
            Some(Task::Au) => TrainMode::Au,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multitask" => Ok(TrainMode::Multitask),
            other => other.parse::<Task>().map(|t| Some(t).into()),
        }
    }
}

/// Training configuration, read from TOML. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate_stage1: f64,
    pub learning_rate_stage2: f64,
    pub loss_weights: LossWeights,
    pub threshold_grid: Vec<f64>,
    pub mode: TrainMode,
    /// Restore the parameters of the epoch with the best validation P.
    pub keep_best: bool,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub curation: CurationRules,
    /// Backbone shape; `image_size` above overrides `model.image_size`.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            image_size: 112,
            batch_size: 16,
            stage1_epochs: 10,
            stage2_epochs: 20,
            learning_rate_stage1: 1e-3,
            learning_rate_stage2: 1e-4,
            loss_weights: LossWeights::default(),
            threshold_grid: default_grid(),
            mode: TrainMode::Multitask,
            keep_best: true,
            train_data: None,
            val_data: None,
            out_dir: PathBuf::from("runs/default"),
            curation: CurationRules::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        for (name, lr) in [
            ("stage 1", self.learning_rate_stage1),
            ("stage 2", self.learning_rate_stage2),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} learning rate must be > 0, got {lr}"));
            }
        }
        if self.threshold_grid.is_empty() || self.threshold_grid.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
            return bad("threshold_grid must be non-empty with values in (0, 1)".into());
        }
        self.loss_weights.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            ..self.model.clone()
        }
    }

    /// Loss weights with inactive tasks zeroed in single-task mode.
    pub fn effective_weights(&self) -> LossWeights {
        let w = self.loss_weights;
        match self.mode.task() {
            None => w,
            Some(Task::Va) => LossWeights {
                w_expr: 0.0,
                w_au: 0.0,
                ..w
            },
            Some(Task::Expr) => LossWeights {
                w_va: 0.0,
                w_au: 0.0,
                ..w
            },
            Some(Task::Au) => LossWeights {
                w_va: 0.0,
                w_expr: 0.0,
                ..w
            },
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }
}

/// Adam with bias correction. Frozen parameters and parameters without a
/// gradient are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, AdamState>,
}

#[derive(Clone, Debug)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, module: &mut impl Module) {
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let state = &mut self.state;
        module.visit_params_mut(&mut |p| {
            if p.frozen {
                return;
            }
            let Some(grad) = p.value.grad.take() else { return };
            let n = grad.len();
            let s = state.entry(p.name.clone()).or_insert_with(|| AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            s.t += 1;
            let c1 = 1.0 - b1.powi(s.t);
            let c2 = 1.0 - b2.powi(s.t);
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(&mut s.m).zip(&mut s.v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    /// Mean weighted loss over the epoch's batches.
    pub loss: f64,
    pub loss_va: f64,
    pub loss_expr: f64,
    pub loss_au: f64,
    pub loss_att: f64,
    pub validation: MetricReport,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_p: Option<f64>,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    best_checkpoint: Option<Checkpoint>,
}

impl TrainLog {
    pub fn final_report(&self) -> Option<&MetricReport> {
        self.epochs.last().map(|e| &e.validation)
    }

    fn consider(&mut self, index: usize, p: f64, model: &DdamfnModel, keep: bool) {
        if self.best_p.is_none_or(|b| p > b) {
            self.best_p = Some(p);
            self.best_epoch = Some(index);
            if keep {
                self.best_checkpoint = Some(model.to_checkpoint());
            }
        }
    }

    fn append(&mut self, other: TrainLog) {
        let offset = self.epochs.len();
        if let (Some(p), Some(e)) = (other.best_p, other.best_epoch) {
            if self.best_p.is_none_or(|b| p > b) {
                self.best_p = Some(p);
                self.best_epoch = Some(offset + e);
                self.best_checkpoint = other.best_checkpoint;
            }
        }
        self.epochs.extend(other.epochs);
        self.wall_clock_secs += other.wall_clock_secs;
    }

    /// Parameters of the best-P epoch, when retention was enabled.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best_checkpoint.as_ref()
    }
}

/// Training split plus the split used for per-epoch validation.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
}

impl<'a> TrainData<'a> {
    /// Validates on the training split itself.
    pub fn train_only(train: &'a [Sample]) -> Self {
        TrainData { train, val: train }
    }
}

fn set_trainable(model: &mut DdamfnModel, stage: Stage, task: Option<Task>) {
    model.unfreeze();
    if stage == Stage::One {
        for g in [ParamGroup::Backbone, ParamGroup::Dda, ParamGroup::Gdconv] {
            model.set_group_frozen(g, true);
        }
    }
    if let Some(task) = task {
        let keep = task.head_prefix();
        model.visit_params_mut(&mut |p| {
            if p.name.starts_with("heads.") && !p.name.starts_with(keep) {
                p.frozen = true;
            }
        });
    }
}

fn run_stage(model: &mut DdamfnModel, data: TrainData<'_>, config: &TrainConfig, stage: Stage) -> Result<TrainLog> {
    config.validate()?;
    let started = Instant::now();
    let task = config.mode.task();
    let weights = config.effective_weights();
    let (epochs, lr, stage_no) = match stage {
        Stage::One => (config.stage1_epochs, config.learning_rate_stage1, 1u8),
        Stage::Two => (config.stage2_epochs, config.learning_rate_stage2, 2u8),
    };
    set_trainable(model, stage, task);
    let mut adam = Adam::new(lr);
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        model.set_mode(Mode::Train);
        let shuffle_seed = config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(u64::from(stage_no) << 32 | epoch as u64);
        let mut sums = [0.0; 5];
        let mut n_batches = 0usize;
        for batch in batches(data.train, config.batch_size, shuffle_seed, true)? {
            let mut tape = Tape::new();
            let x = tape.constant(&batch.images);
            let out = model.forward(&mut tape, x)?;
            let terms = multitask_loss(&mut tape, &out, &batch.targets, &weights, stage)?;
            let loss = tape.data(terms.total)[0];
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "stage {stage_no} epoch {epoch}: loss is {loss}"
                )));
            }
            let grads = tape.backward(terms.total)?;
            drop(tape);
            model.visit_params_mut(&mut |p| p.value.grad = grads.param(&p.name));
            adam.step(model);
            for (s, v) in sums.iter_mut().zip([loss, terms.va, terms.expr, terms.au, terms.att]) {
                *s += v;
            }
            n_batches += 1;
        }
        let mean = |i: usize| sums[i] / n_batches.max(1) as f64;
        let validation = evaluate(model, data.val, &ThresholdSet::default())?;
        log.consider(log.epochs.len(), validation.p_score, model, config.keep_best);
        log.epochs.push(EpochLog {
            stage: stage_no,
            epoch,
            loss: mean(0),
            loss_va: mean(1),
            loss_expr: mean(2),
            loss_au: mean(3),
            loss_att: mean(4),
            validation,
        });
    }
    model.set_mode(Mode::Eval);
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Trains only the task heads; backbone, attention and GDConv stay frozen
/// and no attention-consistency term is used.
pub fn train_stage1(model: &mut DdamfnModel, data: TrainData<'_>, config: &TrainConfig) -> Result<TrainLog> {
    run_stage(model, data, config, Stage::One)
}

/// Fine-tunes every parameter group with the attention term active.
pub fn train_stage2(model: &mut DdamfnModel, data: TrainData<'_>, config: &TrainConfig) -> Result<TrainLog> {
    run_stage(model, data, config, Stage::Two)
}

/// Both stages for a single task. Only that task's loss contributes and
/// the other heads are never updated.
pub fn train_single_task(
    model: &mut DdamfnModel,
    data: TrainData<'_>,
    config: &TrainConfig,
    task: Task,
) -> Result<TrainLog> {
    let cfg = TrainConfig {
        mode: Some(task).into(),
        ..config.clone()
    };
    run_schedule(model, data, &cfg)
}

/// Stage 1 then stage 2 in the configured mode. With `keep_best`, the
/// parameters of the best-P epoch are restored at the end.
pub fn run_schedule(model: &mut DdamfnModel, data: TrainData<'_>, config: &TrainConfig) -> Result<TrainLog> {
    let mut log = train_stage1(model, data, config)?;
    log.append(train_stage2(model, data, config)?);
    if config.keep_best {
        if let Some(ck) = log.best_checkpoint.clone() {
            model.load_checkpoint(&ck)?;
        }
    }
    Ok(log)
}

/// Eval-mode predictions for `samples`, in order.
pub fn predict_set(model: &mut DdamfnModel, samples: &[Sample]) -> Result<PredictionSet> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate on empty data"));
    }
    let prev = model.mode();
    model.set_mode(Mode::Eval);
    let mut set = PredictionSet::default();
    let result = (|| {
        for chunk in samples.chunks(64) {
            let batch = collate(&chunk.iter().collect::<Vec<_>>())?;
            let pred = model.predict(&batch.images)?;
            let va = pred.va.data();
            set.valence.extend(va.iter().step_by(2));
            set.arousal.extend(va.iter().skip(1).step_by(2));
            set.expr_pred.extend(pred.expr_logits.data().chunks(N_EXPR).map(argmax));
            set.au_probs.extend(pred.au_logits.data().iter().map(|&z| sigmoid(z)));
            let t = &batch.targets;
            set.truth_valence.extend(t.va.data().iter().step_by(2));
            set.truth_arousal.extend(t.va.data().iter().skip(1).step_by(2));
            set.truth_expr.extend(&t.expr);
            set.truth_au.extend(t.au.data().iter().map(|&a| a == 1.0));
        }
        Ok(())
    })();
    model.set_mode(prev);
    result.map(|_| set)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Scores the model on `samples`: VA taken directly, expressions by
/// argmax, AUs by sigmoid and `thresholds`.
pub fn evaluate(model: &mut DdamfnModel, samples: &[Sample], thresholds: &ThresholdSet) -> Result<MetricReport> {
    let set = predict_set(model, samples)?;
    MetricReport::compute(&set, thresholds.values())
}

/// Writes `model.ckpt` and `train_log.json` under `dir`.
pub fn save_run(dir: &Path, model: &DdamfnModel, log: &TrainLog) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.to_checkpoint().save(dir.join("model.ckpt"))?;
    std::fs::write(dir.join("train_log.json"), serde_json::to_string_pretty(log)?)?;
    Ok(())
}
