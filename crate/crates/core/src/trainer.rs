//! Optimization loop: AdaDelta updates, early stopping on a dev metric, and
//! the multi-seed driver.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, make_batches, Dataset, Vocab, DEFAULT_CHAR_MAX};
use crate::error::{Error, Result};
use crate::labelers;
use crate::metrics::{self, average_reports, EvalReport, MapOptions};
use crate::model::{
    build_graph, Architecture, AttentionMode, Checkpoint, DimensionConfig, Mode, ModelParams,
};
use crate::objectives::{
    combined_loss, loss_l1, sentence_objective, token_cross_entropy, token_objective, LossBreakdown, Reduction,
};
use crate::tensor::Matrix;

/// Independent random stream for `(seed, name)`. Streams never share state,
/// so adding one leaves the others untouched.
pub fn derive_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    SentenceF1,
    SentenceAccuracy,
    TokenF1,
}

impl std::str::FromStr for SelectionMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence_f1" | "f1" => Ok(Self::SentenceF1),
            "sentence_accuracy" | "accuracy" => Ok(Self::SentenceAccuracy),
            "token_f1" => Ok(Self::TokenF1),
            other => Err(Error::Config(format!("unknown selection metric `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub dims: DimensionConfig,
    pub batch_size: usize,
    pub dropout: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seeds: Vec<u64>,
    pub attention: AttentionMode,
    /// Taggers always select on dev token F1.
    pub selection: SelectionMetric,
    pub reduction: Reduction,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    pub min_count: usize,
    pub char_max: usize,
    pub embeddings: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Attention,
            dims: DimensionConfig::default(),
            batch_size: 32,
            dropout: 0.5,
            gamma: 0.01,
            learning_rate: 1.0,
            rho: 0.95,
            eps: 1e-6,
            patience: 7,
            max_epochs: 100,
            seeds: vec![1, 2, 3, 4, 5],
            attention: AttentionMode::Logistic,
            selection: SelectionMetric::SentenceF1,
            reduction: Reduction::Sum,
            clip_norm: None,
            min_count: 1,
            char_max: DEFAULT_CHAR_MAX,
            embeddings: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be nonnegative".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-tensor AdaDelta accumulators.
#[derive(Clone, Debug, Default)]
pub struct AdaDeltaState {
    pub sq_grad: BTreeMap<String, Matrix>,
    pub sq_update: BTreeMap<String, Matrix>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaDelta {
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
}

impl AdaDelta {
    /// One elementwise step:
    /// `E[g^2] <- rho E[g^2] + (1-rho) g^2`,
    /// `dx = sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g`,
    /// `E[dx^2] <- rho E[dx^2] + (1-rho) dx^2`,
    /// `x <- x - lr * dx`.
    pub fn step_slice(&self, param: &mut [f64], grad: &[f64], sq_grad: &mut [f64], sq_update: &mut [f64]) {
        let (rho, eps) = (self.rho, self.eps);
        for i in 0..param.len() {
            let g = grad[i];
            sq_grad[i] = rho * sq_grad[i] + (1.0 - rho) * g * g;
            let dx = (sq_update[i] + eps).sqrt() / (sq_grad[i] + eps).sqrt() * g;
            sq_update[i] = rho * sq_update[i] + (1.0 - rho) * dx * dx;
            param[i] -= self.learning_rate * dx;
        }
    }

    pub fn update(
        &self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Matrix>,
        state: &mut AdaDeltaState,
    ) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                block: format!("gradient of {name}"),
            });
        }
        for (name, g) in grads {
            let p = params.get_mut(name);
            let (r, c) = p.shape();
            let sg = state
                .sq_grad
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(r, c));
            let su = state
                .sq_update
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(r, c));
            self.step_slice(p.data_mut(), g.data(), sg.data_mut(), su.data_mut());
        }
        Ok(())
    }
}

fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.scale(k);
        }
    }
}

/// Early-stopping bookkeeping. Patience counts epochs since the metric last
/// strictly improved; among epochs tied at the best metric the snapshot with
/// the lowest dev loss is kept.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64, f64)>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    /// This epoch's snapshot becomes the returned one.
    pub keep: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64, loss: f64) -> StopDecision {
        match self.best {
            Some((_, b, l)) if metric <= b => {
                let keep = metric == b && loss < l;
                if keep {
                    self.best = Some((epoch, b, loss));
                }
                self.stale += 1;
                StopDecision {
                    keep,
                    stop: self.stale >= self.patience,
                }
            }
            _ => {
                self.best = Some((epoch, metric, loss));
                self.stale = 0;
                StopDecision { keep: true, stop: false }
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _, _)| e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Summed over the epoch's batches. For taggers `l1` holds the token
    /// cross-entropy.
    pub train_loss: LossBreakdown,
    pub dev_metric: f64,
    pub dev_loss: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned snapshot.
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

impl TrainHistory {
    /// One JSON record per epoch (no timings, so identical runs give identical text).
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch serializes") + "\n")
            .collect()
    }

    pub fn timings_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| format!("{{\"epoch\":{},\"seconds\":{}}}\n", e.epoch, e.seconds))
            .collect()
    }
}

struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

/// Dev-set score used for model selection.
pub fn dev_metric(checkpoint: &Checkpoint, dev: &Dataset, metric: SelectionMetric) -> Result<(f64, Option<String>)> {
    let metric = if checkpoint.params.arch == Architecture::Tagger {
        SelectionMetric::TokenF1
    } else {
        metric
    };
    match metric {
        SelectionMetric::TokenF1 => {
            let preds = labelers::predict_tokens(checkpoint, dev, labelers::Method::for_arch(checkpoint.params.arch))?;
            let gold: Vec<Vec<u8>> = dev
                .sentences
                .iter()
                .map(|s| s.token_labels.clone())
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Contract("token F1 selection needs dev token labels".into()))?;
            let mut c = metrics::Confusion::default();
            for (p, g) in preds.iter().zip(&gold) {
                let labels: Vec<u8> = p.iter().map(|t| t.label).collect();
                c.add(metrics::Confusion::count(&labels, g));
            }
            let warn = (c.tp + c.fp + c.fn_ == 0)
                .then(|| "dev token F1 undefined (no positives predicted or gold); using 0".to_string());
            Ok((c.prf().f1, warn))
        }
        SelectionMetric::SentenceF1 | SelectionMetric::SentenceAccuracy => {
            let pred = labelers::classify_sentences(checkpoint, dev)?;
            let gold: Vec<u8> = dev
                .sentences
                .iter()
                .map(|s| s.sentence_label)
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Contract("dev set lacks sentence labels".into()))?;
            if metric == SelectionMetric::SentenceAccuracy {
                let hits = pred.iter().zip(&gold).filter(|(p, g)| p == g).count();
                return Ok((hits as f64 / gold.len().max(1) as f64, None));
            }
            let c = metrics::Confusion::count(&pred, &gold);
            let warn = (c.tp + c.fp + c.fn_ == 0)
                .then(|| "dev sentence F1 undefined (no positives predicted or gold); using 0".to_string());
            Ok((c.prf().f1, warn))
        }
    }
}

/// Eval-mode dev loss: the training objective for sentence classifiers
/// (sum over sentences), mean token cross-entropy for taggers.
pub fn dev_loss(checkpoint: &Checkpoint, dev: &Dataset, gamma: f64) -> Result<f64> {
    match checkpoint.params.arch {
        Architecture::Tagger => {
            let mut dists = Vec::with_capacity(dev.len());
            for batch in make_batches(dev, &checkpoint.vocab, 64, None, checkpoint.char_max) {
                dists.extend(crate::model::supervised_forward(&batch, &checkpoint.params)?);
            }
            let gold: Vec<Vec<u8>> = dev
                .sentences
                .iter()
                .map(|s| s.token_labels.clone().unwrap_or_default())
                .collect();
            let mask: Vec<Vec<bool>> = gold.iter().map(|g| vec![true; g.len()]).collect();
            Ok(token_cross_entropy(&dists, &gold, &mask))
        }
        arch => {
            let traces = labelers::traces(checkpoint, dev)?;
            let gold: Vec<u8> = dev.sentences.iter().map(|s| s.sentence_label.unwrap_or(0)).collect();
            if arch == Architecture::LastState {
                let y: Vec<f64> = traces.iter().map(|t| t.y).collect();
                return Ok(loss_l1(&y, &gold));
            }
            Ok(combined_loss(&traces, &gold, gamma)?.total)
        }
    }
}

/// Trains one model for one seed and returns the best-on-dev snapshot.
pub fn train(config: &TrainConfig, train: &Dataset, dev: &Dataset, seed: u64) -> Result<(Checkpoint, TrainHistory)> {
    train_with_observer(config, train, dev, seed, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer(
    config: &TrainConfig,
    train: &Dataset,
    dev: &Dataset,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let tagger = config.arch == Architecture::Tagger;
    if !tagger && !(train.has_sentence_labels() && dev.has_sentence_labels()) {
        return Err(Error::Contract("train and dev need sentence labels".into()));
    }
    if tagger && !(train.has_token_labels() && dev.has_token_labels()) {
        return Err(Error::Contract("tagger training needs token labels".into()));
    }

    let vocab = Vocab::build(train, config.min_count);
    let mut init_rng = derive_rng(seed, "init");
    let mut params = ModelParams::init(
        config.arch,
        config.dims,
        vocab.word_count(),
        vocab.char_count(),
        &mut init_rng,
    );
    if let Some(path) = &config.embeddings {
        let e = corpus::load_embeddings(path, &vocab, config.dims.word_emb_dim, &mut init_rng)?;
        *params.get_mut(crate::model::names::WORD_EMB) = e.matrix;
    }
    let mut dropout_rng = derive_rng(seed, "dropout");
    let mut shuffle_rng = derive_rng(seed, "shuffle");
    let optimizer = AdaDelta {
        learning_rate: config.learning_rate,
        rho: config.rho,
        eps: config.eps,
    };
    let mut state = AdaDeltaState::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = TrainHistory::default();
    let mut best = Checkpoint {
        params: params.clone(),
        vocab: vocab.clone(),
        attention: config.attention,
        char_max: config.char_max,
    };

    for epoch in 1..=config.max_epochs {
        let clock = Stopwatch::start();
        let batches = make_batches(
            train,
            &vocab,
            config.batch_size,
            Some(shuffle_rng.next_u64()),
            config.char_max,
        );
        let mut epoch_loss = LossBreakdown {
            gamma: config.gamma,
            ..Default::default()
        };
        for batch in &batches {
            let mut graph = build_graph(
                &params,
                batch,
                Mode::Train {
                    dropout: config.dropout,
                },
                config.attention,
                Some(&mut dropout_rng),
            )?;
            let loss = if tagger {
                let (node, ce) = token_objective(&mut graph, batch)?;
                epoch_loss.accumulate(&LossBreakdown::new(ce, 0.0, 0.0, config.gamma));
                node
            } else {
                let (node, br) = sentence_objective(&mut graph, batch, config.gamma, config.reduction)?;
                epoch_loss.accumulate(&br);
                node
            };
            let grads = graph.backward(loss);
            let mut pg = graph.param_gradients(&grads);
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut pg, max);
            }
            optimizer.update(&mut params, &pg, &mut state)?;
            if let Some(name) = params.first_non_finite() {
                return Err(Error::NonFinite {
                    block: name.to_string(),
                });
            }
        }

        let snapshot = Checkpoint {
            params: params.clone(),
            vocab: vocab.clone(),
            attention: config.attention,
            char_max: config.char_max,
        };
        let (metric, warning) = dev_metric(&snapshot, dev, config.selection)?;
        let loss = dev_loss(&snapshot, dev, config.gamma)?;
        if let Some(w) = warning {
            history.warnings.push(format!("epoch {epoch}: {w}"));
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss,
            dev_metric: metric,
            dev_loss: loss,
            seconds: clock.seconds(),
        };
        on_epoch(&record);
        history.epochs.push(record);
        let decision = stopper.observe(epoch, metric, loss);
        if decision.keep {
            best = snapshot;
        }
        if decision.stop {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch().unwrap_or(1);
    Ok((best, history))
}

/// Outcome of one seed in a multi-seed experiment.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub reports: Vec<EvalReport>,
}

/// Per-seed runs plus per-method reports averaged over seeds.
#[derive(Clone, Debug)]
pub struct SeedSummary {
    pub runs: Vec<SeedRun>,
    pub averaged: Vec<EvalReport>,
}

/// Trains `config.arch` once per seed, evaluates `methods` on `test`, and
/// averages each method's report over seeds. Seeds run on separate threads
/// when `parallel` is set.
pub fn run_seeds(
    config: &TrainConfig,
    train_set: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    methods: &[labelers::Method],
    map: MapOptions,
    parallel: bool,
) -> Result<SeedSummary> {
    if config.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let relfreq = if methods.contains(&labelers::Method::RelFreq) {
        Some(labelers::evaluate_relfreq(&labelers::relfreq_train(train_set, 0.0)?, test, map)?)
    } else {
        None
    };
    let one = |seed: u64| -> Result<SeedRun> {
        let (checkpoint, history) = train(config, train_set, dev, seed)?;
        let reports = methods
            .iter()
            .map(|&m| match (m, &relfreq) {
                (labelers::Method::RelFreq, Some(r)) => Ok(r.clone()),
                _ => labelers::evaluate(&checkpoint, test, m, map),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SeedRun {
            seed,
            checkpoint,
            history,
            reports,
        })
    };
    let runs: Vec<SeedRun> = if parallel && config.seeds.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = config
                .seeds
                .iter()
                .map(|&seed| s.spawn(move || one(seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        config.seeds.iter().map(|&s| one(s)).collect::<Result<Vec<_>>>()?
    };
    let averaged = (0..methods.len())
        .map(|i| {
            let per_seed: Vec<EvalReport> = runs.iter().map(|r| r.reports[i].clone()).collect();
            average_reports(&per_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedSummary { runs, averaged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a = derive_rng(7, "init").next_u64();
        assert_eq!(a, derive_rng(7, "init").next_u64());
        assert_ne!(a, derive_rng(7, "dropout").next_u64());
        assert_ne!(a, derive_rng(8, "init").next_u64());
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_state() {
        let opt = AdaDelta {
            learning_rate: 1.0,
            rho: 0.95,
            eps: 1e-6,
        };
        let mut p = [0.5, -0.25];
        let mut sg = [0.2, 0.4];
        let mut su = [0.1, 0.3];
        opt.step_slice(&mut p, &[0.0, 0.0], &mut sg, &mut su);
        assert_eq!(p, [0.5, -0.25]);
        assert!((sg[0] - 0.19).abs() < 1e-15 && (sg[1] - 0.38).abs() < 1e-15);
        assert!((su[0] - 0.095).abs() < 1e-15 && (su[1] - 0.285).abs() < 1e-15);
    }

    #[test]
    fn identical_tensors_get_identical_updates() {
        let opt = AdaDelta {
            learning_rate: 1.0,
            rho: 0.95,
            eps: 1e-6,
        };
        let mut a = [0.3, 0.3];
        let (mut sg, mut su) = ([0.0; 2], [0.0; 2]);
        for _ in 0..5 {
            opt.step_slice(&mut a, &[0.7, 0.7], &mut sg, &mut su);
        }
        assert_eq!(a[0], a[1]);
    }

    #[test]
    fn stopping_rule_three_up_then_flat() {
        let mut s = EarlyStopping::new(7);
        let metrics = [0.1, 0.2, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3];
        let mut stopped_at = None;
        for (i, &m) in metrics.iter().enumerate() {
            if s.observe(i + 1, m, 1.0).stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(10));
        assert_eq!(s.best_epoch(), Some(3));
    }

    #[test]
    fn stopping_rule_patience_one() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 0.9, 1.0), StopDecision { keep: true, stop: false });
        assert_eq!(s.observe(2, 0.8, 0.5), StopDecision { keep: false, stop: true });
        assert_eq!(s.best_epoch(), Some(1));
    }

    #[test]
    fn ties_prefer_lower_dev_loss_without_resetting_patience() {
        let mut s = EarlyStopping::new(3);
        assert!(s.observe(1, 1.0, 5.0).keep);
        assert_eq!(s.observe(2, 1.0, 4.0), StopDecision { keep: true, stop: false });
        assert_eq!(s.observe(3, 1.0, 4.5), StopDecision { keep: false, stop: false });
        assert_eq!(s.observe(4, 1.0, 1.0), StopDecision { keep: true, stop: true });
        assert_eq!(s.best_epoch(), Some(4));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.batch_size, c.dropout, c.gamma, c.learning_rate, c.patience, c.seeds.len()),
            (32, 0.5, 0.01, 1.0, 7, 5)
        );
        assert!(c.validate().is_ok());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
