#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zeroshot::corpus::{Batch, Sentence, Vocab};
use zeroshot::model::{build_graph, Architecture, AttentionMode, Checkpoint, DimensionConfig, Mode, ModelParams};
use zeroshot::objectives::{sentence_objective, token_objective, Reduction};
use zeroshot::tensor::Matrix;
use zeroshot::trainer::derive_rng;

pub const WORDS: &[&str] = &["the", "cat", "may", "sat", "possibly", "on", "a", "mat", "dog", "ran"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    derive_rng(seed, "test")
}

pub fn vocab() -> Vocab {
    let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
    words.extend(WORDS.iter().map(|w| w.to_string()));
    let mut chars = vec!['\0', '\u{1}'];
    let mut seen: Vec<char> = WORDS.iter().flat_map(|w| w.chars()).collect();
    seen.sort();
    seen.dedup();
    chars.extend(seen);
    Vocab::from_parts(words, chars)
}

pub fn small_dims(max: usize, rng: &mut ChaCha8Rng) -> DimensionConfig {
    let mut d = || rng.gen_range(2..=max);
    DimensionConfig {
        word_emb_dim: d(),
        char_emb_dim: d(),
        char_hidden: d(),
        word_hidden: d(),
        combined_h: d(),
        attention_e: d(),
        sentence_d: d(),
    }
}

/// Every tensor, biases and PAD rows included, drawn uniformly from `[-scale, scale]`.
pub fn random_params(arch: Architecture, dims: DimensionConfig, vocab: &Vocab, scale: f64, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::init(arch, dims, vocab.word_count(), vocab.char_count(), rng);
    for m in p.tensors.values_mut() {
        let (r, c) = m.shape();
        *m = Matrix::uniform(r, c, scale, rng);
    }
    p
}

pub fn random_sentence(min_len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Sentence {
    let len = rng.gen_range(min_len..=max_len);
    let tokens = (0..len)
        .map(|_| {
            if rng.gen_bool(0.1) {
                "zzqx".to_string()
            } else {
                WORDS[rng.gen_range(0..WORDS.len())].to_string()
            }
        })
        .collect();
    let labels = (0..len).map(|_| u8::from(rng.gen_bool(0.3))).collect();
    let mut s = Sentence::with_token_labels(tokens, labels).unwrap();
    let pos = s.token_labels.as_ref().unwrap().contains(&1);
    s.sentence_label = Some(u8::from(pos));
    s
}

pub fn batch(sentences: &[Sentence], vocab: &Vocab, min_steps: usize) -> Batch {
    let refs: Vec<&Sentence> = sentences.iter().collect();
    Batch::new(&refs, (0..sentences.len()).collect(), vocab, 32, min_steps)
}

pub fn checkpoint(params: ModelParams, vocab: Vocab, attention: AttentionMode) -> Checkpoint {
    Checkpoint {
        params,
        vocab,
        attention,
        char_max: 32,
    }
}

fn loss_and_grads(
    params: &ModelParams,
    batch: &Batch,
    attention: AttentionMode,
    gamma: f64,
    want_grads: bool,
) -> (f64, Option<std::collections::BTreeMap<String, Matrix>>) {
    let mut g = build_graph::<ChaCha8Rng>(params, batch, Mode::Eval, attention, None).unwrap();
    let node = if params.arch == Architecture::Tagger {
        token_objective(&mut g, batch).unwrap().0
    } else {
        sentence_objective(&mut g, batch, gamma, Reduction::Sum).unwrap().0
    };
    let value = g.tape.value(node).data()[0];
    let grads = want_grads.then(|| {
        let gr = g.backward(node);
        g.param_gradients(&gr)
    });
    (value, grads)
}

/// Smallest gap between the extreme `a~` value of a sentence and its runner-up.
pub fn extreme_gap(params: &ModelParams, batch: &Batch, attention: AttentionMode) -> f64 {
    let g = build_graph::<ChaCha8Rng>(params, batch, Mode::Eval, attention, None).unwrap();
    let mut gap = f64::INFINITY;
    for t in g.traces() {
        let mut a = t.a_tilde.clone();
        if a.len() < 2 {
            continue;
        }
        a.sort_by(f64::total_cmp);
        gap = gap.min(a[1] - a[0]).min(a[a.len() - 1] - a[a.len() - 2]);
    }
    gap
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub coordinates: usize,
    /// Coordinates where both gradients are below `TINY` and compared absolutely.
    pub tiny: usize,
    pub worst_relative: f64,
    pub worst_tiny_abs: f64,
    pub worst_name: String,
}

pub const TINY: f64 = 1e-6;

/// Central differences with step `h` on every parameter coordinate.
pub fn grad_check(params: &ModelParams, batch: &Batch, attention: AttentionMode, gamma: f64, h: f64) -> GradCheck {
    let (_, grads) = loss_and_grads(params, batch, attention, gamma, true);
    let grads = grads.unwrap();
    let mut probe = params.clone();
    let mut out = GradCheck::default();
    for (name, analytic) in &grads {
        for i in 0..analytic.len() {
            let orig = probe.get(name).data()[i];
            probe.get_mut(name).data_mut()[i] = orig + h;
            let (up, _) = loss_and_grads(&probe, batch, attention, gamma, false);
            probe.get_mut(name).data_mut()[i] = orig - h;
            let (down, _) = loss_and_grads(&probe, batch, attention, gamma, false);
            probe.get_mut(name).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            out.coordinates += 1;
            let scale = a.abs().max(numeric.abs());
            if scale < TINY {
                out.tiny += 1;
                out.worst_tiny_abs = out.worst_tiny_abs.max((a - numeric).abs());
            } else {
                let rel = (a - numeric).abs() / scale;
                if rel > out.worst_relative {
                    out.worst_relative = rel;
                    out.worst_name = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
                }
            }
        }
    }
    out
}
