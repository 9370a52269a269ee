//! Token labelers: attention weights, input-gradient magnitudes, the
//! relative-frequency n-gram baseline, and the supervised tagger.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, Batch, Dataset, Sentence};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, MapOptions};
use crate::model::{build_graph, Architecture, Checkpoint, ForwardTrace, Graph, Mode};

const EVAL_BATCH: usize = 64;

/// Threshold, in standard deviations above the sentence mean, for the
/// gradient-magnitude labeler.
pub const BACKPROP_SIGMAS: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Attention,
    Backprop,
    RelFreq,
    Supervised,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Attention => "attention",
            Method::Backprop => "backprop",
            Method::RelFreq => "relfreq",
            Method::Supervised => "supervised",
        }
    }

    /// The labeler native to a trained architecture.
    pub fn for_arch(arch: Architecture) -> Self {
        match arch {
            Architecture::Attention => Method::Attention,
            Architecture::LastState => Method::Backprop,
            Architecture::Tagger => Method::Supervised,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Method::Attention),
            "backprop" => Ok(Method::Backprop),
            "relfreq" => Ok(Method::RelFreq),
            "supervised" => Ok(Method::Supervised),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenPrediction {
    pub score: f64,
    pub label: u8,
    pub method: Method,
}

/// Score `a~_i`, positive iff `a~_i > 0.5`.
pub fn label_by_attention(trace: &ForwardTrace) -> Vec<TokenPrediction> {
    trace
        .a_tilde
        .iter()
        .map(|&s| TokenPrediction {
            score: s,
            label: u8::from(s > 0.5),
            method: Method::Attention,
        })
        .collect()
}

/// Positive iff the magnitude exceeds `mean + 1.5 * std` (population std)
/// of the sentence's magnitudes. Equal magnitudes give all-negative labels.
pub fn gaussian_outlier_labels(magnitudes: &[f64]) -> Vec<u8> {
    if magnitudes.windows(2).all(|w| w[0] == w[1]) {
        return vec![0; magnitudes.len()];
    }
    let n = magnitudes.len() as f64;
    let mean = magnitudes.iter().sum::<f64>() / n;
    let var = magnitudes.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + BACKPROP_SIGMAS * var.sqrt();
    magnitudes.iter().map(|&m| u8::from(m > threshold)).collect()
}

fn sentence_classifier(checkpoint: &Checkpoint) -> Result<()> {
    if checkpoint.params.arch == Architecture::Tagger {
        return Err(Error::Contract("this labeler needs a sentence classifier".into()));
    }
    Ok(())
}

fn eval_graph(checkpoint: &Checkpoint, batch: &Batch) -> Result<Graph> {
    build_graph::<rand_chacha::ChaCha8Rng>(&checkpoint.params, batch, Mode::Eval, checkpoint.attention, None)
}

/// Euclidean norms of `dL1/dw_i` with the pseudo-label `y* = 0`, per sentence.
pub fn gradient_magnitudes(checkpoint: &Checkpoint, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    sentence_classifier(checkpoint)?;
    let mut graph = eval_graph(checkpoint, batch)?;
    let y = graph.y().expect("sentence classifier has y");
    let loss = graph.tape.squared_error(y, vec![0.0; batch.batch_size]);
    let grads = graph.backward(loss);
    Ok(graph
        .input_gradients(&grads)
        .into_iter()
        .zip(&batch.lengths)
        .map(|(rows, &len)| {
            rows[..len]
                .iter()
                .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        })
        .collect())
}

fn single(checkpoint: &Checkpoint, sentence: &Sentence) -> Batch {
    Batch::new(&[sentence], vec![0], &checkpoint.vocab, checkpoint.char_max, 0)
}

pub fn label_by_backprop(checkpoint: &Checkpoint, sentence: &Sentence) -> Result<Vec<TokenPrediction>> {
    let mags = gradient_magnitudes(checkpoint, &single(checkpoint, sentence))?;
    Ok(backprop_predictions(&mags[0]))
}

fn backprop_predictions(mags: &[f64]) -> Vec<TokenPrediction> {
    mags.iter()
        .zip(gaussian_outlier_labels(mags))
        .map(|(&score, label)| TokenPrediction {
            score,
            label,
            method: Method::Backprop,
        })
        .collect()
}

/// Score `p(label = 1)`; label is the argmax, ties going to 0.
pub fn supervised_predictions(dists: &[[f64; 2]]) -> Vec<TokenPrediction> {
    dists
        .iter()
        .map(|p| TokenPrediction {
            score: p[1],
            label: u8::from(p[1] > p[0]),
            method: Method::Supervised,
        })
        .collect()
}

pub fn label_supervised(checkpoint: &Checkpoint, sentence: &Sentence) -> Result<Vec<TokenPrediction>> {
    let dists = crate::model::supervised_forward(&single(checkpoint, sentence), &checkpoint.params)?;
    Ok(supervised_predictions(&dists[0]))
}

/// Eval-mode traces for every sentence of `dataset`, in order.
pub fn traces(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Vec<ForwardTrace>> {
    sentence_classifier(checkpoint)?;
    let mut out: Vec<Option<ForwardTrace>> = vec![None; dataset.len()];
    for batch in make_batches(dataset, &checkpoint.vocab, EVAL_BATCH, None, checkpoint.char_max) {
        let graph = eval_graph(checkpoint, &batch)?;
        for (i, t) in batch.indices.iter().zip(graph.traces()) {
            out[*i] = Some(t);
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every sentence traced")).collect())
}

/// Sentence predictions `y > 0.5`.
pub fn classify_sentences(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Vec<u8>> {
    Ok(traces(checkpoint, dataset)?
        .iter()
        .map(ForwardTrace::predicted_label)
        .collect())
}

/// Token predictions of a model-based labeler for every sentence of `dataset`.
pub fn predict_tokens(checkpoint: &Checkpoint, dataset: &Dataset, method: Method) -> Result<Vec<Vec<TokenPrediction>>> {
    let mut out: Vec<Vec<TokenPrediction>> = vec![Vec::new(); dataset.len()];
    let batches = make_batches(dataset, &checkpoint.vocab, EVAL_BATCH, None, checkpoint.char_max);
    for batch in &batches {
        let per_sentence: Vec<Vec<TokenPrediction>> = match method {
            Method::Attention => {
                if checkpoint.params.arch != Architecture::Attention {
                    return Err(Error::Contract("attention labeling needs an attention model".into()));
                }
                eval_graph(checkpoint, batch)?
                    .traces()
                    .iter()
                    .map(label_by_attention)
                    .collect()
            }
            Method::Backprop => gradient_magnitudes(checkpoint, batch)?
                .iter()
                .map(|m| backprop_predictions(m))
                .collect(),
            Method::Supervised => crate::model::supervised_forward(batch, &checkpoint.params)?
                .iter()
                .map(|d| supervised_predictions(d))
                .collect(),
            Method::RelFreq => {
                return Err(Error::Contract("relfreq predictions come from a RelFreqModel".into()))
            }
        };
        for (i, p) in batch.indices.iter().zip(per_sentence) {
            out[*i] = p;
        }
    }
    Ok(out)
}

fn gold_tokens(dataset: &Dataset) -> Result<Vec<Vec<u8>>> {
    dataset
        .sentences
        .iter()
        .map(|s| s.token_labels.clone())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Contract("evaluation needs gold token labels".into()))
}

/// Builds a report from per-sentence predictions against gold token labels.
pub fn report_from_predictions(
    method: Method,
    preds: &[Vec<TokenPrediction>],
    dataset: &Dataset,
    sentence_pred: Option<&[u8]>,
    map: MapOptions,
) -> Result<EvalReport> {
    let gold = gold_tokens(dataset)?;
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.iter().map(|t| t.score).collect()).collect();
    let labels: Vec<Vec<u8>> = preds.iter().map(|p| p.iter().map(|t| t.label).collect()).collect();
    let gold_sent: Option<Vec<u8>> = dataset.sentences.iter().map(|s| s.sentence_label).collect();
    let sentences = match (sentence_pred, &gold_sent) {
        (Some(p), Some(g)) => Some((p, g.as_slice())),
        _ => None,
    };
    Ok(EvalReport::compute(method.as_str(), &scores, &labels, &gold, sentences, map))
}

/// Evaluates a model-based labeler on a dataset with gold token labels.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, method: Method, map: MapOptions) -> Result<EvalReport> {
    let preds = predict_tokens(checkpoint, dataset, method)?;
    let sentence_pred = match method {
        Method::Attention | Method::Backprop => Some(classify_sentences(checkpoint, dataset)?),
        _ => None,
    };
    report_from_predictions(method, &preds, dataset, sentence_pred.as_deref(), map)
}

pub const SENT_START: &str = "<s>";
pub const SENT_END: &str = "</s>";

fn padded(sentence: &Sentence) -> Vec<&str> {
    let mut p = Vec::with_capacity(sentence.len() + 2);
    p.push(SENT_START);
    p.extend(sentence.tokens.iter().map(String::as_str));
    p.push(SENT_END);
    p
}

/// All 1-3-grams of the boundary-padded sentence that cover token `i`.
pub fn covering_ngrams(sentence: &Sentence, i: usize) -> Vec<Vec<String>> {
    let p = padded(sentence);
    let pos = i + 1;
    let mut out = Vec::new();
    for n in 1..=3usize {
        let lo = pos.saturating_sub(n - 1);
        let hi = pos.min(p.len() - n);
        for start in lo..=hi {
            out.push(p[start..start + n].iter().map(|s| s.to_string()).collect());
        }
    }
    out
}

fn sentence_ngrams(sentence: &Sentence) -> HashSet<Vec<String>> {
    (0..sentence.len()).flat_map(|i| covering_ngrams(sentence, i)).collect()
}

/// Presence counts of n-gram features in positive and negative sentences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelFreqModel {
    /// feature -> (count in positive sentences, count in negative sentences)
    pub counts: HashMap<Vec<String>, (u64, u64)>,
    /// Add-alpha smoothing on both counts; 0 disables it and drops unseen features.
    pub smoothing: f64,
}

impl RelFreqModel {
    /// `r_k = c(k, Y=1) / (c(k, Y=1) + c(k, Y=0))`, or `None` for an unseen feature.
    pub fn ratio(&self, feature: &[String]) -> Option<f64> {
        let a = self.smoothing;
        match self.counts.get(feature) {
            Some(&(pos, neg)) => Some((pos as f64 + a) / ((pos + neg) as f64 + 2.0 * a)),
            None if a > 0.0 => Some(0.5),
            None => None,
        }
    }

    pub fn to_tsv(&self) -> String {
        let sorted: BTreeMap<&Vec<String>, &(u64, u64)> = self.counts.iter().collect();
        let mut out = String::new();
        for (k, (pos, neg)) in sorted {
            let _ = writeln!(out, "{}\t{}\t{pos}\t{neg}", k.len(), k.join("\t"));
        }
        out
    }

    pub fn from_tsv(text: &str, smoothing: f64) -> Result<Self> {
        let mut counts = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Parse {
                path: "relfreq".into(),
                line: idx + 1,
                message: "expected `n<TAB>tokens...<TAB>pos<TAB>neg`".into(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            let n: usize = f.first().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            if f.len() != n + 3 {
                return Err(bad());
            }
            let pos = f[n + 1].parse().map_err(|_| bad())?;
            let neg = f[n + 2].parse().map_err(|_| bad())?;
            counts.insert(f[1..=n].iter().map(|s| s.to_string()).collect(), (pos, neg));
        }
        Ok(Self { counts, smoothing })
    }
}

/// Counts each feature once per sentence it occurs in.
pub fn relfreq_train(train: &Dataset, smoothing: f64) -> Result<RelFreqModel> {
    let mut counts: HashMap<Vec<String>, (u64, u64)> = HashMap::new();
    for (i, s) in train.sentences.iter().enumerate() {
        let label = s
            .sentence_label
            .ok_or_else(|| Error::Contract(format!("sentence {i} has no sentence label")))?;
        for f in sentence_ngrams(s) {
            let e = counts.entry(f).or_default();
            if label == 1 {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
    }
    Ok(RelFreqModel { counts, smoothing })
}

/// Geometric mean of `r_k` over the known features covering each token
/// (0 when none is known); positive iff the score exceeds 0.5.
pub fn relfreq_score(model: &RelFreqModel, sentence: &Sentence) -> Vec<TokenPrediction> {
    (0..sentence.len())
        .map(|i| {
            let ratios: Vec<f64> = covering_ngrams(sentence, i)
                .iter()
                .filter_map(|f| model.ratio(f))
                .collect();
            let score = if ratios.is_empty() || ratios.contains(&0.0) {
                0.0
            } else {
                (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp()
            };
            TokenPrediction {
                score,
                label: u8::from(score > 0.5),
                method: Method::RelFreq,
            }
        })
        .collect()
}

pub fn evaluate_relfreq(model: &RelFreqModel, dataset: &Dataset, map: MapOptions) -> Result<EvalReport> {
    let preds: Vec<Vec<TokenPrediction>> = dataset.sentences.iter().map(|s| relfreq_score(model, s)).collect();
    report_from_predictions(Method::RelFreq, &preds, dataset, None, map)
}

/// Prediction dump: `token<TAB>gold<TAB>method<TAB>score<TAB>label`, one
/// blank-line-separated block per sentence. `gold` is `-` when unknown.
pub fn predictions_tsv(dataset: &Dataset, preds: &[Vec<TokenPrediction>]) -> String {
    let mut out = String::new();
    for (s, p) in dataset.sentences.iter().zip(preds) {
        for (i, (tok, t)) in s.tokens.iter().zip(p).enumerate() {
            let gold = s
                .token_labels
                .as_ref()
                .map_or("-".to_string(), |g| g[i].to_string());
            let _ = writeln!(out, "{tok}\t{gold}\t{}\t{}\t{}", t.method, t.score, t.label);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn trace(a: Vec<f64>) -> ForwardTrace {
        ForwardTrace {
            h: vec![],
            e_tilde: vec![],
            a: vec![],
            a_tilde: a,
            c: vec![],
            d: vec![],
            y: 0.5,
            uniform_fallback: false,
        }
    }

    fn labels(p: &[TokenPrediction]) -> Vec<u8> {
        p.iter().map(|t| t.label).collect()
    }

    #[test]
    fn attention_threshold_is_strict() {
        assert_eq!(labels(&label_by_attention(&trace(vec![0.9, 0.1, 0.6]))), vec![1, 0, 1]);
        assert_eq!(labels(&label_by_attention(&trace(vec![0.5]))), vec![0]);
        assert_eq!(labels(&label_by_attention(&trace(vec![0.2, 0.49]))), vec![0, 0]);
    }

    #[test]
    fn gaussian_rule() {
        assert_eq!(gaussian_outlier_labels(&[2.0, 2.0, 2.0]), vec![0, 0, 0]);
        assert_eq!(gaussian_outlier_labels(&[1.0, 1.0, 1.0, 10.0]), vec![0, 0, 0, 1]);
        assert_eq!(gaussian_outlier_labels(&[0.3]), vec![0]);
    }

    #[test]
    fn supervised_argmax_ties_negative() {
        let p = supervised_predictions(&[[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]]);
        assert_eq!(labels(&p), vec![0, 0, 1]);
        assert_eq!(p[2].score, 0.8);
    }

    fn s(text: &str, label: u8) -> Sentence {
        Sentence::with_sentence_label(text.split(' ').map(str::to_string).collect(), label).unwrap()
    }

    #[test]
    fn relfreq_counts_presence() {
        let ds = Dataset::new(vec![s("maybe it rains rains", 1), s("it rains", 0)], Split::Train);
        let m = relfreq_train(&ds, 0.0).unwrap();
        let key = |x: &[&str]| x.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        assert_eq!(m.counts[&key(&["maybe"])], (1, 0));
        assert_eq!(m.counts[&key(&["it"])], (1, 1));
        assert_eq!(m.counts[&key(&["rains"])], (1, 1));
        assert_eq!(m.counts[&key(&["<s>", "maybe"])], (1, 0));
        assert_eq!(m.counts[&key(&["<s>", "it", "rains"])], (0, 1));
    }

    #[test]
    fn relfreq_toy_corpus() {
        let ds = Dataset::new(vec![s("a b", 1), s("a c", 0)], Split::Train);
        let m = relfreq_train(&ds, 0.0).unwrap();
        let scores = relfreq_score(&m, &s("a b", 1));
        assert_eq!(scores[1].score, 1.0);
        // `a` is covered by a (1/2), <s> a (1/2), a b (1), <s> a b (1), a b </s> (1).
        let expect = (0.5f64 * 0.5).powf(1.0 / 5.0);
        assert!((scores[0].score - expect).abs() < 1e-12);
        let unseen = relfreq_score(&m, &s("zzz", 0));
        assert_eq!(unseen[0].score, 0.0);
    }

    #[test]
    fn relfreq_tsv_round_trip() {
        let ds = Dataset::new(vec![s("a b", 1), s("a c", 0)], Split::Train);
        let m = relfreq_train(&ds, 0.0).unwrap();
        let back = RelFreqModel::from_tsv(&m.to_tsv(), 0.0).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn smoothing_includes_unseen() {
        let ds = Dataset::new(vec![s("a", 1)], Split::Train);
        let m = relfreq_train(&ds, 1.0).unwrap();
        assert_eq!(m.ratio(&["a".to_string()]), Some(2.0 / 3.0));
        assert_eq!(m.ratio(&["zz".to_string()]), Some(0.5));
    }

    #[test]
    fn dump_format() {
        let ds = Dataset::new(
            vec![Sentence::with_token_labels(vec!["x".into(), "y".into()], vec![0, 1]).unwrap()],
            Split::Test,
        );
        let p = vec![vec![
            TokenPrediction { score: 0.25, label: 0, method: Method::Attention },
            TokenPrediction { score: 0.75, label: 1, method: Method::Attention },
        ]];
        assert_eq!(predictions_tsv(&ds, &p), "x\t0\tattention\t0.25\t0\ny\t1\tattention\t0.75\t1\n\n");
    }
}
