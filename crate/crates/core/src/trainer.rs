//! Mini-batch SGD with momentum, per-epoch learning-rate decay, best-dev
//! model selection and multi-seed aggregation.

use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{convert_scheme, encode_batch, encode_tokens, pretrained_matrix, PretrainedTable, Scheme, Sentence, Vocab, DEFAULT_MIN_FREQ};
use crate::error::{GrnError, Result};
use crate::metrics::{span_counts, Prf, SpanCounts};
use crate::model::{self, ContextMode, ModelConfig, ModelParams, DEFAULT_RELATION_BUDGET};
use crate::numcore::{Graph, Real};
use crate::relation::FusionKind;

/// Numeric precision of parameters and activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(format!("unknown precision `{s}` (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

/// Training hyperparameters and model switches. Also the schema of the flat
/// TOML config file; every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub lr0: f64,
    pub rho: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub runs: usize,
    /// Global gradient-norm ceiling; no clipping when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub fusion: FusionKind,
    pub context: ContextMode,
    pub kernels: Vec<usize>,
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_channels: usize,
    pub char_kernel: usize,
    pub hidden: usize,
    pub min_freq: usize,
    pub constrain_transitions: bool,
    pub relation_budget: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            momentum: 0.9,
            lr0: 0.02,
            rho: 0.02,
            epochs: 200,
            dropout: 0.5,
            seed: 1,
            runs: 5,
            grad_clip: None,
            fusion: FusionKind::Grn,
            context: ContextMode::Full,
            kernels: vec![1, 3, 5],
            word_dim: 100,
            char_dim: 30,
            char_channels: 30,
            char_kernel: 3,
            hidden: 400,
            min_freq: DEFAULT_MIN_FREQ,
            constrain_transitions: false,
            relation_budget: DEFAULT_RELATION_BUDGET,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| GrnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GrnError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.runs == 0 {
            return bad("runs must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lr0 > 0.0) || !(self.rho >= 0.0) {
            return bad("lr0 must be positive and rho non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    /// Learning rate used during epoch `t` (counting from 0).
    pub fn lr(&self, t: usize) -> f64 {
        decayed_lr(self.lr0, self.rho, t)
    }

    /// Model shape for `vocab` under these switches.
    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            word_dim: self.word_dim,
            char_dim: self.char_dim,
            char_channels: self.char_channels,
            char_kernel: self.char_kernel,
            hidden: self.hidden,
            kernels: self.kernels.clone(),
            context: self.context,
            fusion: self.fusion,
            dropout: self.dropout,
            constrain_transitions: self.constrain_transitions,
            relation_budget: self.relation_budget,
            num_words: vocab.num_words(),
            num_chars: vocab.num_chars(),
            labels: vocab.labels().to_vec(),
        }
    }
}

/// `lr0 / (1 + rho * t)`.
pub fn decayed_lr(lr0: f64, rho: f64, t: usize) -> f64 {
    lr0 / (1.0 + rho * t as f64)
}

/// The default schedule, `0.02 / (1 + 0.02 t)`.
pub fn lr_schedule(t: usize) -> f64 {
    decayed_lr(0.02, 0.02, t)
}

/// Classical momentum: `v = mu v + g`, `theta -= lr v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub momentum: f64,
    pub clip: Option<f64>,
    velocity: IndexMap<String, Vec<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(momentum: f64, clip: Option<f64>) -> Self {
        Self {
            momentum,
            clip,
            velocity: IndexMap::new(),
        }
    }

    /// Global L2 norm over every gradient entry.
    pub fn grad_norm(grads: &IndexMap<String, Vec<T>>) -> f64 {
        grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &IndexMap<String, Vec<T>>, lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(GrnError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let scale = match self.clip {
            Some(c) => {
                let norm = Self::grad_norm(grads);
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (mu, scale, lr) = (T::lit(self.momentum), T::lit(scale), T::lit(lr));
        for (name, theta) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| GrnError::InvalidArgument(format!("no gradient for `{name}`")))?;
            if g.len() != theta.len() {
                return Err(GrnError::Shape {
                    op: "sgd_momentum_step",
                    left: theta.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for ((th, vi), &gi) in theta.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + scale * gi;
                *th = *th - lr * *vi;
            }
        }
        Ok(())
    }
}

/// Initial parameters; the word table is seeded from `pretrained` when given.
pub fn initial_params<T: Real>(
    config: &ModelConfig,
    vocab: &Vocab,
    pretrained: Option<&PretrainedTable>,
    seed: u64,
) -> Result<ModelParams<T>> {
    let mut params = model::init_params(config, seed)?;
    if pretrained.is_some() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e3be_dd1e);
        let table = pretrained_matrix(pretrained, vocab, config.word_dim, &mut rng)?;
        params.insert("embed.word", table);
    }
    Ok(params)
}

/// Splits `order` greedily into consecutive batches of at most `size`.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    order.chunks(size.max(1)).collect()
}

fn gather(sentences: &[Sentence], ids: &[usize]) -> Vec<Sentence> {
    ids.iter().map(|&i| sentences[i].clone()).collect()
}

/// BIO labels predicted for each token sequence, in evaluation mode.
pub fn predict<T: Real, S: AsRef<[String]>>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    vocab: &Vocab,
    sentences: &[S],
    batch_size: usize,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(batch_size.max(1)) {
        let batch = encode_tokens(chunk, vocab, 0)?;
        for path in model::decode(config, params, &batch)? {
            let labels: Vec<&str> = path.iter().map(|&l| vocab.label(l)).collect();
            out.push(convert_scheme(&labels, Scheme::Bioes, Scheme::Bio)?);
        }
    }
    Ok(out)
}

/// Span counts of the model's predictions against the gold labels.
pub fn evaluate<T: Real>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    vocab: &Vocab,
    sentences: &[Sentence],
    batch_size: usize,
) -> Result<SpanCounts> {
    let tokens: Vec<&[String]> = sentences.iter().map(|s| s.tokens.as_slice()).collect();
    let pred = predict(config, params, vocab, &tokens, batch_size)?;
    let gold = sentences
        .iter()
        .map(|s| convert_scheme(&s.labels, Scheme::Bioes, Scheme::Bio))
        .collect::<Result<Vec<_>>>()?;
    span_counts(&gold, &pred)
}

/// Mean evaluation-mode loss per sentence.
pub fn mean_loss<T: Real>(config: &ModelConfig, params: &ModelParams<T>, vocab: &Vocab, sentences: &[Sentence], batch_size: usize) -> Result<f64> {
    if sentences.is_empty() {
        return Err(GrnError::EmptyCorpus("evaluation"));
    }
    let mut total = 0.0;
    for chunk in sentences.chunks(batch_size.max(1)) {
        total += model::eval_loss(config, params, &encode_batch(chunk, vocab)?)?;
    }
    Ok(total / sentences.len() as f64)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// Number of completed epochs, from 1.
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss per sentence over the epoch (training mode).
    pub train_loss: f64,
    pub dev: Prf,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,dev_p,dev_r,dev_f1,seconds";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.8},{:.6},{:.2},{:.2},{:.2},{:.3}",
            self.epoch, self.lr, self.train_loss, self.dev.precision, self.dev.recall, self.dev.f1, self.seconds
        )
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunOutcome<T> {
    pub seed: u64,
    /// Epoch (from 1) whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev: Prf,
    pub params: ModelParams<T>,
    pub test: Option<Prf>,
    pub log: Vec<EpochLog>,
}

/// Data for one run.
#[derive(Clone, Copy, Debug)]
pub struct Corpora<'a> {
    pub train: &'a [Sentence],
    pub dev: &'a [Sentence],
    pub test: Option<&'a [Sentence]>,
}

/// Trains from `init` for `cfg.epochs` epochs and keeps the parameters with
/// the highest dev F1 (the earliest on ties).
pub fn train_run<T: Real>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocab,
    init: ModelParams<T>,
    data: Corpora<'_>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    model::check_params(model_cfg, &init)?;
    if data.train.is_empty() {
        return Err(GrnError::EmptyCorpus("train"));
    }
    if data.dev.is_empty() {
        return Err(GrnError::EmptyCorpus("dev"));
    }
    let mut model_cfg = model_cfg.clone();
    model_cfg.dropout = cfg.dropout;

    let mut params = init;
    let mut opt = SgdMomentum::new(cfg.momentum, cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(usize, Prf, ModelParams<T>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for t in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr(t);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, ids) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let batch = encode_batch(&gather(data.train, ids), vocab)?;
            let graph_seed: u64 = rng.gen();
            let (value, grads) = {
                let mut g = Graph::new(graph_seed);
                let bound = params.bind(&mut g)?;
                let loss = model::loss(&mut g, &model_cfg, &bound, &batch, true)?;
                let value = g.value(loss)[0].as_f64();
                if !value.is_finite() {
                    let norms = params
                        .norms()
                        .iter()
                        .map(|(n, v)| format!("{n}={v:.4e}"))
                        .collect::<Vec<_>>()
                        .join(", ");
                    return Err(GrnError::NonFiniteLoss {
                        epoch: t + 1,
                        batch: bi + 1,
                        norms,
                    });
                }
                g.backward(loss)?;
                (value, bound.grads(&g))
            };
            total += value;
            opt.step(&mut params, &grads, lr)?;
        }
        let dev = evaluate(&model_cfg, &params, vocab, data.dev, cfg.batch_size)?.prf();
        let entry = EpochLog {
            epoch: t + 1,
            lr,
            train_loss: total / data.train.len() as f64,
            dev,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        if best.as_ref().is_none_or(|(_, b, _)| dev.f1 > b.f1) {
            best = Some((t + 1, dev, params.clone()));
        }
        log.push(entry);
    }

    let (best_epoch, best_dev, params) = match best {
        Some(b) => b,
        None => (0, evaluate(&model_cfg, &params, vocab, data.dev, cfg.batch_size)?.prf(), params),
    };
    let test = match data.test {
        Some(s) if !s.is_empty() => Some(evaluate(&model_cfg, &params, vocab, s, cfg.batch_size)?.prf()),
        _ => None,
    };
    Ok(RunOutcome {
        seed,
        best_epoch,
        best_dev,
        params,
        test,
        log,
    })
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-run results as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub dev: Prf,
    pub test: Option<Prf>,
}

impl<T> From<&RunOutcome<T>> for RunSummary {
    fn from(r: &RunOutcome<T>) -> Self {
        Self {
            seed: r.seed,
            best_epoch: r.best_epoch,
            dev: r.best_dev,
            test: r.test,
        }
    }
}

/// Text report: one line per run, then mean and std of P, R and F1 on dev
/// (and test when every run has a test score).
pub fn summary_report(runs: &[RunSummary], param_count: usize) -> String {
    let mut out = format!("parameters: {param_count}\nruns: {}\n", runs.len());
    for (r, s) in runs.iter().enumerate() {
        out.push_str(&format!(
            "run {r} seed {} best_epoch {} dev {}",
            s.seed, s.best_epoch, s.dev
        ));
        if let Some(t) = s.test {
            out.push_str(&format!(" test {t}"));
        }
        out.push('\n');
    }
    let mut block = |name: &str, prfs: &[Prf]| {
        for (field, get) in [
            ("precision", (|p: &Prf| p.precision) as fn(&Prf) -> f64),
            ("recall", |p: &Prf| p.recall),
            ("f1", |p: &Prf| p.f1),
        ] {
            let (m, s) = mean_std(&prfs.iter().map(get).collect::<Vec<_>>());
            out.push_str(&format!("{name} {field} mean {m:.2} std {s:.2}\n"));
        }
    };
    let dev: Vec<Prf> = runs.iter().map(|r| r.dev).collect();
    block("dev", &dev);
    let test: Option<Vec<Prf>> = runs.iter().map(|r| r.test).collect();
    if let Some(test) = test {
        if !test.is_empty() {
            block("test", &test);
        }
    }
    out
}
