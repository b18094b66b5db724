use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sgd::{sgd_step, SgdState};
use crate::error::{Error, FormatError, Result};
use crate::fusion::{parse_levels, Model, ModelConfig, STAGES};
use crate::numkernel::Tensor4;
use crate::texdata::{majority_vote, Dataset};

/// Σω must equal one to this absolute tolerance after every step.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// RNG stream used for per-epoch shuffling; parameter init uses the default one.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dict_size: usize,
    pub levels: Vec<usize>,
    pub shared_dim: usize,
    pub widths: [usize; STAGES],
    /// Multiply the learning rate by 0.1 from this (1-based) epoch on.
    pub decay_epoch: Option<usize>,
    /// Rescale each mini-batch gradient so its global L2 norm is at most this.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            dict_size: 8,
            levels: vec![1, 2, 3],
            shared_dim: 64,
            widths: [8, 16, 32],
            decay_epoch: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be >= 1"));
        }
        if matches!(self.grad_clip, Some(c) if !(c.is_finite() && c > 0.0)) {
            return Err(Error::invalid("gradient clip norm must be > 0"));
        }
        if self.decay_epoch == Some(0) {
            return Err(Error::invalid("decay epoch is 1-based"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_epoch {
            Some(d) if epoch >= d => self.lr * 0.1,
            _ => self.lr,
        }
    }

    pub fn model_config(&self, image_size: usize, classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            image_size,
            in_channels: 1,
            kernel_size: 3,
            widths: self.widths,
            levels: self.levels.clone(),
            dict_size: self.dict_size,
            shared_dim: self.shared_dim,
            classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `key=value` lines, the same keys [`set`](Self::set) accepts.
    pub fn to_kv(&self) -> String {
        let levels: Vec<String> = self.levels.iter().map(|l| l.to_string()).collect();
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        s.push_str(&format!("lr={}\n", self.lr));
        s.push_str(&format!("momentum={}\n", self.momentum));
        s.push_str(&format!("batch_size={}\n", self.batch_size));
        s.push_str(&format!("epochs={}\n", self.epochs));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("dict_size={}\n", self.dict_size));
        s.push_str(&format!("levels={}\n", levels.join(",")));
        s.push_str(&format!("shared_dim={}\n", self.shared_dim));
        s.push_str(&format!("widths={}\n", widths.join(",")));
        if let Some(d) = self.decay_epoch {
            s.push_str(&format!("decay_epoch={d}\n"));
        }
        if let Some(c) = self.grad_clip {
            s.push_str(&format!("grad_clip={c}\n"));
        }
        s
    }

    /// Applies every `key=value` line of a config file on top of `self`.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (key, value, line) in parse_kv(text)? {
            self.set(&key, &value).map_err(|e| FormatError::Config {
                line,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
        }
        match key.trim() {
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dict_size" => self.dict_size = num(key, value)?,
            "levels" => self.levels = parse_levels(value)?,
            "shared_dim" => self.shared_dim = num(key, value)?,
            "widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num(key, p))
                    .collect::<Result<_>>()?;
                self.widths = parts.try_into().map_err(|_| {
                    Error::invalid(format!("widths needs {STAGES} comma-separated values"))
                })?;
            }
            "decay_epoch" => {
                self.decay_epoch = match value.trim() {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "grad_clip" => {
                self.grad_clip = match value.trim() {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            other => return Err(Error::invalid(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }
}

/// Splits flat `key=value` text into `(key, value, 1-based line)` triples.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| FormatError::Config {
            line: i + 1,
            reason: format!("expected key=value, got {line:?}"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(FormatError::Config {
                line: i + 1,
                reason: "empty key".into(),
            }
            .into());
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Per-epoch training loss, validation accuracy and fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub levels: Vec<usize>,
    pub loss: Vec<f64>,
    /// Fraction in `[0, 1]`; NaN when the validation set is empty.
    pub val_acc: Vec<f64>,
    pub omega: Vec<Vec<f64>>,
}

impl RunMetrics {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }

    /// `epoch,loss,val_acc,omega_1..omega_L`, header row first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_acc");
        for i in 1..=self.levels.len() {
            s.push_str(&format!(",omega_{i}"));
        }
        s.push('\n');
        for e in 0..self.epochs() {
            s.push_str(&format!("{},{},{}", e + 1, self.loss[e], self.val_acc[e]));
            for w in &self.omega[e] {
                s.push_str(&format!(",{w}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    /// The shuffle stream of a run seeded with `seed`, before any draw.
    pub fn initial(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SHUFFLE_STREAM);
        Self::capture(&rng)
    }

    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: RunMetrics,
    /// Shuffle RNG after the final epoch.
    pub rng: RngState,
    /// Largest number of negative smoothing factors seen after any step.
    pub negative_smoothing_max: usize,
}

/// Reported to the observer after every optimizer step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub batch_loss: f64,
    pub omega: &'a [f64],
}

pub fn train(model: Model, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(model, train_set, val_set, cfg, |_| {})
}

pub fn train_with_observer(
    mut model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepEvent<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train_set.image_size != model.config.image_size {
        return Err(Error::shape(format!(
            "dataset images are {}px but the model expects {}px",
            train_set.image_size, model.config.image_size
        )));
    }
    if train_set.classes > model.config.classes {
        return Err(Error::shape(format!(
            "dataset has {} classes but the model only {}",
            train_set.classes, model.config.classes
        )));
    }

    let mut rng = RngState::initial(cfg.seed).restore();
    let mut state = SgdState::new(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = RunMetrics {
        levels: model.config.levels.clone(),
        loss: Vec::with_capacity(cfg.epochs),
        val_acc: Vec::with_capacity(cfg.epochs),
        omega: Vec::with_capacity(cfg.epochs),
    };
    let mut negative_max = 0;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor4> = chunk.iter().map(|&i| &train_set.images[i].pixels).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.images[i].label).collect();
            let (loss, mut grads) = model.loss_and_grads(&images, &labels)?;
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads.0, max_norm);
            }
            loss_sum += loss * chunk.len() as f64;
            sgd_step(&mut model.params, &grads, &mut state, lr, cfg.momentum)?;
            if !model.params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters after step {step} (epoch {epoch}); lower the learning rate"
                )));
            }
            let omega = model.omega();
            check_simplex(&omega)?;
            negative_max = negative_max.max(
                model
                    .params
                    .head
                    .levels
                    .iter()
                    .map(|l| l.codebook.negative_smoothing_count())
                    .sum(),
            );
            step += 1;
            observer(&StepEvent {
                epoch,
                step,
                batch_loss: loss,
                omega: &omega,
            });
        }
        metrics.loss.push(loss_sum / train_set.len() as f64);
        metrics.val_acc.push(if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(&model, val_set)?.patch_accuracy
        });
        metrics.omega.push(model.omega());
    }

    Ok(TrainOutcome {
        model,
        metrics,
        rng: RngState::capture(&rng),
        negative_smoothing_max: negative_max,
    })
}

/// Builds a model from `cfg` (seeded by `cfg.seed`) and trains it.
pub fn fit(train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mc = cfg.model_config(train_set.image_size, train_set.classes)?;
    let model = Model::new(mc, cfg.seed)?;
    train(model, train_set, val_set, cfg)
}

/// Scales every group by one factor so the concatenated gradient has L2 norm
/// at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut crate::fusion::ModelParams, max_norm: f64) -> f64 {
    let norm = grads
        .groups()
        .iter()
        .flat_map(|g| g.values.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.groups_mut() {
            for v in g.values.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Fusion weights must sum to one and, with more than one level, lie strictly
/// between zero and one.
pub fn check_simplex(omega: &[f64]) -> Result<()> {
    let sum: f64 = omega.iter().sum();
    let interior = omega.len() == 1 || omega.iter().all(|&w| w > 0.0 && w < 1.0);
    if (sum - 1.0).abs() > SIMPLEX_TOL || !interior {
        return Err(Error::invalid(format!("fusion weights left the simplex: {omega:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub patch_accuracy: f64,
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let images: Vec<&Tensor4> = dataset.images.iter().map(|i| &i.pixels).collect();
    let logits = model.logits_batch(&images)?;
    let predictions: Vec<usize> = logits.iter().map(|l| crate::fusion::argmax(l)).collect();
    let correct = predictions
        .iter()
        .zip(&dataset.images)
        .filter(|(p, i)| **p == i.label)
        .count();
    Ok(Evaluation {
        patch_accuracy: correct as f64 / dataset.len() as f64,
        predictions,
    })
}

/// Accuracy after replacing every patch prediction by its group's majority
/// vote, counted once per group against the group's majority true label.
pub fn image_accuracy(dataset: &Dataset, predictions: &[usize]) -> Result<f64> {
    if predictions.len() != dataset.len() {
        return Err(Error::shape("one prediction per image required"));
    }
    let mut groups: std::collections::BTreeMap<u64, (Vec<usize>, Vec<usize>)> = Default::default();
    for (img, &p) in dataset.images.iter().zip(predictions) {
        let e = groups.entry(img.group).or_default();
        e.0.push(p);
        e.1.push(img.label);
    }
    if groups.is_empty() {
        return Err(Error::invalid("no groups to vote over"));
    }
    let mut correct = 0;
    for (pred, truth) in groups.values() {
        if majority_vote(pred)? == majority_vote(truth)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / groups.len() as f64)
}
