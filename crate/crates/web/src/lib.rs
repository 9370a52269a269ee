//! Browser bindings for the zero-shot labeling demo.

use std::path::Path;

use wasm_bindgen::prelude::*;
use zeroshot::corpus::{parse_sentence_annotated, Dataset, LabelScheme, Sentence, Split};
use zeroshot::labelers::{evaluate, predict_tokens, relfreq_score, relfreq_train, Method};
use zeroshot::metrics::MapOptions;
use zeroshot::model::{exp_attention, soft_attention, Architecture, Checkpoint, DimensionConfig};
use zeroshot::synth::{generate, SyntheticSpec};
use zeroshot::trainer::{train, TrainConfig};
use zeroshot::viz::render_sentence;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn parse_scores(text: &str) -> Result<Vec<f64>, String> {
    let scores = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s}")))
        .collect::<Result<Vec<_>, _>>()?;
    if scores.is_empty() {
        return Err("enter at least one score".into());
    }
    if let Some(bad) = scores.iter().find(|x| !x.is_finite()) {
        return Err(format!("score must be finite: {bad}"));
    }
    Ok(scores)
}

fn json_list(xs: &[f64]) -> String {
    serde_json::to_string(xs).expect("finite floats serialize")
}

/// Normalizes raw attention scores both ways. Returns JSON with fields
/// `a_tilde`, `logistic`, `exp` and `fallback`.
pub fn attention_json(scores: &str) -> Result<String, String> {
    let e = parse_scores(scores)?;
    let soft = soft_attention(&e);
    Ok(format!(
        "{{\"a_tilde\":{},\"logistic\":{},\"exp\":{},\"fallback\":{}}}",
        json_list(&soft.a_tilde),
        json_list(&soft.a),
        json_list(&exp_attention(&e)),
        soft.uniform_fallback
    ))
}

fn tokens(text: &str) -> Result<Sentence, String> {
    let toks: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    if toks.is_empty() {
        return Err("enter a sentence".into());
    }
    Sentence::new(toks).map_err(|e| e.to_string())
}

/// Trains the n-gram relative-frequency labeler on `label<TAB>tokens` lines
/// (label 1 is positive) and renders `sentence` as a heatmap fragment.
pub fn relfreq_html(train_text: &str, sentence: &str) -> Result<String, String> {
    let scheme = LabelScheme::new(["1"]);
    let train = parse_sentence_annotated(train_text, Path::new("<input>"), &scheme, Split::Train)
        .map_err(|e| e.to_string())?;
    let model = relfreq_train(&train, 0.0).map_err(|e| e.to_string())?;
    let s = tokens(sentence)?;
    Ok(render_sentence(&s.tokens, &relfreq_score(&model, &s)))
}

#[wasm_bindgen]
pub fn compare_attention(scores: &str) -> Result<String, JsValue> {
    attention_json(scores).map_err(js_err)
}

#[wasm_bindgen]
pub fn relfreq_heatmap(train_text: &str, sentence: &str) -> Result<String, JsValue> {
    relfreq_html(train_text, sentence).map_err(js_err)
}

/// A small attention model trained in the page on a synthetic corpus.
#[wasm_bindgen]
pub struct Demo {
    checkpoint: Checkpoint,
    triggers: Vec<String>,
    distractors: Vec<String>,
    test: Dataset,
    epochs: usize,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, max_epochs: u32) -> Result<Demo, JsValue> {
        let spec = SyntheticSpec {
            vocab_size: 60,
            triggers: 5,
            train_size: 400,
            dev_size: 100,
            test_size: 100,
            seed: u64::from(seed),
            ..SyntheticSpec::default()
        };
        let corpus = generate(&spec).map_err(js_err)?;
        let config = TrainConfig {
            arch: Architecture::Attention,
            dims: DimensionConfig {
                word_emb_dim: 16,
                char_emb_dim: 4,
                char_hidden: 4,
                word_hidden: 16,
                combined_h: 16,
                attention_e: 8,
                sentence_d: 8,
            },
            max_epochs: (max_epochs as usize).max(1),
            ..TrainConfig::default()
        };
        let (checkpoint, history) = train(&config, &corpus.train, &corpus.dev, u64::from(seed)).map_err(js_err)?;
        Ok(Demo {
            checkpoint,
            triggers: corpus.triggers,
            distractors: corpus.distractors,
            test: corpus.test,
            epochs: history.epochs.len(),
        })
    }

    /// Space-separated trigger words of the synthetic corpus.
    pub fn triggers(&self) -> String {
        self.triggers.join(" ")
    }

    /// A handful of non-trigger words to build sentences with.
    pub fn distractors(&self) -> String {
        self.distractors.iter().take(12).cloned().collect::<Vec<_>>().join(" ")
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Test-set report for the attention labeler as JSON.
    pub fn report(&self) -> Result<String, JsValue> {
        let r = evaluate(&self.checkpoint, &self.test, Method::Attention, MapOptions::default()).map_err(js_err)?;
        Ok(r.to_json())
    }

    /// Labels a typed sentence with `method` (`attention` or `backprop`).
    pub fn label(&self, sentence: &str, method: &str) -> Result<String, JsValue> {
        let method: Method = method.parse().map_err(js_err)?;
        let s = tokens(sentence).map_err(js_err)?;
        let ds = Dataset::new(vec![s], Split::Test);
        let preds = predict_tokens(&self.checkpoint, &ds, method).map_err(js_err)?;
        Ok(render_sentence(&ds.sentences[0].tokens, &preds[0]))
    }
}
