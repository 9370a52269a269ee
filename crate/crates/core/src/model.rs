//! The differentiable network.
//!
//! Tokens are mapped to word representations `w_i` (a word embedding
//! concatenated with the final states of a character-level BiLSTM), run
//! through a word-level BiLSTM and a `tanh` projection to get `h_i`. On top
//! of `h_i` sits one of three heads:
//!
//! * `Attention`: a two-layer attention scorer gives one unrestricted scalar
//!   `e~_i` per token; logistic (or softmax) attention pools `h_i` into `c`,
//!   and `y = sigmoid(W_y tanh(W_d c + b_d) + b_y)`.
//! * `LastState`: the final states of both word-LSTM directions form `c`.
//! * `Tagger`: a per-token linear layer and 2-way softmax (supervised).
//!
//! All activations are laid out time-major: row `t * batch + b` holds token
//! `t` of sentence `b`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Gradients, NodeId, Tape, NORMALIZE_EPS};
use crate::corpus::{Batch, Vocab, PAD};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionConfig {
    pub word_emb_dim: usize,
    pub char_emb_dim: usize,
    pub char_hidden: usize,
    pub word_hidden: usize,
    pub combined_h: usize,
    pub attention_e: usize,
    pub sentence_d: usize,
}

impl Default for DimensionConfig {
    fn default() -> Self {
        Self {
            word_emb_dim: 300,
            char_emb_dim: 100,
            char_hidden: 100,
            word_hidden: 300,
            combined_h: 200,
            attention_e: 100,
            sentence_d: 50,
        }
    }
}

impl DimensionConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.word_emb_dim,
            self.char_emb_dim,
            self.char_hidden,
            self.word_hidden,
            self.combined_h,
            self.attention_e,
            self.sentence_d,
        ];
        if all.contains(&0) {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Width of `w_i`: word embedding plus both char-LSTM directions.
    pub fn word_rep_dim(&self) -> usize {
        self.word_emb_dim + 2 * self.char_hidden
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Attention,
    LastState,
    Tagger,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "last" | "laststate" | "last-state" => Ok(Self::LastState),
            "tagger" | "supervised" => Ok(Self::Tagger),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Logistic,
    Exp,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" | "sigmoid" => Ok(Self::Logistic),
            "exp" | "softmax" => Ok(Self::Exp),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    /// Inverted dropout with the given drop probability at `w_i` and `h_i`.
    Train { dropout: f64 },
}

pub mod names {
    pub const WORD_EMB: &str = "word_emb";
    pub const CHAR_EMB: &str = "char_emb";
    pub const CHAR_FWD: &str = "char_lstm_fwd";
    pub const CHAR_BWD: &str = "char_lstm_bwd";
    pub const WORD_FWD: &str = "word_lstm_fwd";
    pub const WORD_BWD: &str = "word_lstm_bwd";
    pub const PROJ_W: &str = "proj.w";
    pub const PROJ_B: &str = "proj.b";
    pub const ATT_W: &str = "att_hidden.w";
    pub const ATT_B: &str = "att_hidden.b";
    pub const ATT_OUT_W: &str = "att_score.w";
    pub const ATT_OUT_B: &str = "att_score.b";
    pub const DENSE_W: &str = "sent_hidden.w";
    pub const DENSE_B: &str = "sent_hidden.b";
    pub const OUT_W: &str = "sent_out.w";
    pub const OUT_B: &str = "sent_out.b";
    pub const TAG_W: &str = "tag.w";
    pub const TAG_B: &str = "tag.b";
}

/// All trainable tensors, keyed by name. Weight matrices act on row vectors
/// (`x W + b`), so `W` has shape `[in x out]`. LSTM blocks store `<name>.wx`,
/// `<name>.wh` and `<name>.b` with gates ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub dims: DimensionConfig,
    pub tensors: BTreeMap<String, Matrix>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, LSTM forget-gate bias 1, zero PAD rows.
    pub fn init<R: Rng + ?Sized>(
        arch: Architecture,
        dims: DimensionConfig,
        word_count: usize,
        char_count: usize,
        rng: &mut R,
    ) -> Self {
        use names::*;
        let mut tensors = BTreeMap::new();
        let mut put = |name: &str, m: Matrix| {
            tensors.insert(name.to_string(), m);
        };
        let mut word_emb = Matrix::glorot(word_count, dims.word_emb_dim, rng);
        word_emb.row_mut(PAD).fill(0.0);
        put(WORD_EMB, word_emb);
        let mut char_emb = Matrix::glorot(char_count, dims.char_emb_dim, rng);
        char_emb.row_mut(PAD).fill(0.0);
        put(CHAR_EMB, char_emb);
        for (name, input, hidden) in [
            (CHAR_FWD, dims.char_emb_dim, dims.char_hidden),
            (CHAR_BWD, dims.char_emb_dim, dims.char_hidden),
            (WORD_FWD, dims.word_rep_dim(), dims.word_hidden),
            (WORD_BWD, dims.word_rep_dim(), dims.word_hidden),
        ] {
            put(&format!("{name}.wx"), Matrix::glorot(input, 4 * hidden, rng));
            put(&format!("{name}.wh"), Matrix::glorot(hidden, 4 * hidden, rng));
            let mut b = Matrix::zeros(1, 4 * hidden);
            b.data_mut()[hidden..2 * hidden].fill(1.0);
            put(&format!("{name}.b"), b);
        }
        if arch != Architecture::LastState {
            put(PROJ_W, Matrix::glorot(2 * dims.word_hidden, dims.combined_h, rng));
            put(PROJ_B, Matrix::zeros(1, dims.combined_h));
        }
        match arch {
            Architecture::Attention => {
                put(ATT_W, Matrix::glorot(dims.combined_h, dims.attention_e, rng));
                put(ATT_B, Matrix::zeros(1, dims.attention_e));
                put(ATT_OUT_W, Matrix::glorot(dims.attention_e, 1, rng));
                put(ATT_OUT_B, Matrix::zeros(1, 1));
                put(DENSE_W, Matrix::glorot(dims.combined_h, dims.sentence_d, rng));
                put(DENSE_B, Matrix::zeros(1, dims.sentence_d));
                put(OUT_W, Matrix::glorot(dims.sentence_d, 1, rng));
                put(OUT_B, Matrix::zeros(1, 1));
            }
            Architecture::LastState => {
                put(DENSE_W, Matrix::glorot(2 * dims.word_hidden, dims.sentence_d, rng));
                put(DENSE_B, Matrix::zeros(1, dims.sentence_d));
                put(OUT_W, Matrix::glorot(dims.sentence_d, 1, rng));
                put(OUT_B, Matrix::zeros(1, 1));
            }
            Architecture::Tagger => {
                put(TAG_W, Matrix::glorot(dims.combined_h, 2, rng));
                put(TAG_B, Matrix::zeros(1, 2));
            }
        }
        Self { arch, dims, tensors }
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    /// First parameter tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, m)| !m.is_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }
}

/// Per-sentence outputs of a sentence-classifier forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    /// `[len x combined_h]`, or `[len x 2 * word_hidden]` BiLSTM states for `LastState`.
    pub h: Vec<Vec<f64>>,
    pub e_tilde: Vec<f64>,
    pub a_tilde: Vec<f64>,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub y: f64,
    /// Set when logistic attention underflowed and uniform weights were used.
    pub uniform_fallback: bool,
}

impl ForwardTrace {
    pub fn predicted_label(&self) -> u8 {
        u8::from(self.y > 0.5)
    }
}

struct LstmWeights {
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
    hidden: usize,
}

/// Runs one LSTM direction over `steps` time steps of `inputs` (time-major,
/// `[steps * rows x in]`). `keep[t][r]` is false where row `r` has no token at
/// step `t`; such rows carry their previous state forward unchanged.
/// Returns the state after each step in time order and the final state.
fn lstm_pass(
    tape: &mut Tape,
    inputs: NodeId,
    rows: usize,
    steps: usize,
    keep: &[Vec<bool>],
    w: &LstmWeights,
    reverse: bool,
) -> (Vec<NodeId>, NodeId) {
    let hdim = w.hidden;
    let projected = tape.matmul(inputs, w.wx);
    let projected = tape.add_bias(projected, w.b);
    let mut h = tape.constant(Matrix::zeros(rows, hdim));
    let mut c = h;
    let mut states = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let x = tape.slice_rows(projected, t * rows, (t + 1) * rows);
        let rec = tape.matmul(h, w.wh);
        let gates = tape.add(x, rec);
        let i = tape.slice_cols(gates, 0, hdim);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, hdim, 2 * hdim);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * hdim, 3 * hdim);
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * hdim, 4 * hdim);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        c = tape.blend(c_new, c, keep[t].clone());
        h = tape.blend(h_new, h, keep[t].clone());
        states[t] = h;
    }
    (states, h)
}

/// Parameter leaves registered on a tape.
struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let nodes = params
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.variable(v.clone())))
            .collect();
        Self { nodes }
    }

    fn get(&self, name: &str) -> NodeId {
        self.nodes[name]
    }

    fn lstm(&self, name: &str, hidden: usize) -> LstmWeights {
        LstmWeights {
            wx: self.get(&format!("{name}.wx")),
            wh: self.get(&format!("{name}.wh")),
            b: self.get(&format!("{name}.b")),
            hidden,
        }
    }

    fn dense(&self, tape: &mut Tape, x: NodeId, w: &str, b: &str) -> NodeId {
        let z = tape.matmul(x, self.get(w));
        tape.add_bias(z, self.get(b))
    }
}

/// Head-specific nodes of a forward graph.
#[derive(Clone, Copy, Debug)]
pub enum HeadNodes {
    Attention {
        e_tilde: NodeId,
        a_tilde: NodeId,
        a: NodeId,
        c: NodeId,
        d: NodeId,
        y: NodeId,
    },
    LastState {
        c: NodeId,
        d: NodeId,
        y: NodeId,
    },
    Tagger {
        logits: NodeId,
    },
}

/// A recorded forward pass over one batch, ready for losses and backward.
pub struct Graph {
    pub tape: Tape,
    params: ParamNodes,
    /// `[steps * batch x word_rep_dim]` word representations `w_i` (before dropout).
    pub words: NodeId,
    /// `[steps * batch x 2 * word_hidden]` concatenated BiLSTM states.
    pub bilstm: NodeId,
    /// `[steps * batch x combined_h]` projected states (absent for `LastState`).
    pub hidden: Option<NodeId>,
    pub head: HeadNodes,
    pub batch_size: usize,
    pub steps: usize,
    /// `[batch x steps]` token mask.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Matrix {
    let scale = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn apply_dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: NodeId,
    mode: Mode,
    rng: &mut Option<&mut R>,
) -> NodeId {
    match (mode, rng.as_deref_mut()) {
        (Mode::Train { dropout }, Some(rng)) if dropout > 0.0 => {
            let (r, c) = tape.value(x).shape();
            let m = tape.constant(dropout_mask(r, c, dropout, rng));
            tape.mul(x, m)
        }
        (Mode::Train { dropout }, None) if dropout > 0.0 => {
            panic!("train mode with dropout needs a random generator")
        }
        _ => x,
    }
}

/// Character BiLSTM over `rows` tokens. `char_ids` is `[rows x width]`.
/// Returns `[rows x 2 * char_hidden]` final states (forward then backward).
fn char_encoder(
    tape: &mut Tape,
    p: &ParamNodes,
    dims: &DimensionConfig,
    char_ids: &[usize],
    char_lengths: &[usize],
    width: usize,
) -> NodeId {
    let rows = char_lengths.len();
    tape.set_scope("char_emb");
    let mut ids = Vec::with_capacity(rows * width);
    for k in 0..width {
        for n in 0..rows {
            ids.push(char_ids[n * width + k]);
        }
    }
    let emb = tape.gather(p.get(names::CHAR_EMB), ids);
    let keep: Vec<Vec<bool>> = (0..width)
        .map(|k| char_lengths.iter().map(|&len| k < len).collect())
        .collect();
    tape.set_scope(names::CHAR_FWD);
    let fwd = p.lstm(names::CHAR_FWD, dims.char_hidden);
    let (_, f_last) = lstm_pass(tape, emb, rows, width, &keep, &fwd, false);
    tape.set_scope(names::CHAR_BWD);
    let bwd = p.lstm(names::CHAR_BWD, dims.char_hidden);
    let (_, b_last) = lstm_pass(tape, emb, rows, width, &keep, &bwd, true);
    tape.concat_cols(&[f_last, b_last])
}

/// Word BiLSTM over `words` (time-major). Returns per-step concatenated
/// states `[steps * batch x 2 * word_hidden]` and the two final states.
fn word_encoder(
    tape: &mut Tape,
    p: &ParamNodes,
    dims: &DimensionConfig,
    words: NodeId,
    batch: usize,
    steps: usize,
    keep: &[Vec<bool>],
) -> (NodeId, NodeId, NodeId) {
    tape.set_scope(names::WORD_FWD);
    let fwd = p.lstm(names::WORD_FWD, dims.word_hidden);
    let (f_states, f_last) = lstm_pass(tape, words, batch, steps, keep, &fwd, false);
    tape.set_scope(names::WORD_BWD);
    let bwd = p.lstm(names::WORD_BWD, dims.word_hidden);
    let (b_states, b_first) = lstm_pass(tape, words, batch, steps, keep, &bwd, true);
    let f = tape.concat_rows(&f_states);
    let b = tape.concat_rows(&b_states);
    (tape.concat_cols(&[f, b]), f_last, b_first)
}

/// Records the forward computation for `batch`. In train mode `rng` supplies
/// the dropout masks.
pub fn build_graph<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    mode: Mode,
    attention: AttentionMode,
    mut rng: Option<&mut R>,
) -> Result<Graph> {
    let dims = params.dims;
    let (bsz, steps) = (batch.batch_size, batch.steps);
    let n = bsz * steps;
    let mut tape = Tape::new();
    tape.set_scope("params");
    let p = ParamNodes::register(&mut tape, params);

    // Time-major reorder of the sentence-major batch.
    let mut word_ids = Vec::with_capacity(n);
    let mut char_ids = Vec::with_capacity(n * batch.char_width);
    let mut char_lengths = Vec::with_capacity(n);
    for t in 0..steps {
        for b in 0..bsz {
            let pos = b * steps + t;
            word_ids.push(batch.word_ids[pos]);
            char_ids.extend_from_slice(
                &batch.char_ids[pos * batch.char_width..(pos + 1) * batch.char_width],
            );
            char_lengths.push(batch.char_lengths[pos]);
        }
    }
    let keep: Vec<Vec<bool>> = (0..steps)
        .map(|t| (0..bsz).map(|b| batch.is_token(b, t)).collect())
        .collect();

    tape.set_scope(names::WORD_EMB);
    let emb = tape.gather(p.get(names::WORD_EMB), word_ids);
    let chars = char_encoder(
        &mut tape,
        &p,
        &dims,
        &char_ids,
        &char_lengths,
        batch.char_width,
    );
    tape.set_scope("word_rep");
    let words = tape.concat_cols(&[emb, chars]);
    let dropped = apply_dropout(&mut tape, words, mode, &mut rng);
    let (bilstm, f_last, b_first) = word_encoder(&mut tape, &p, &dims, dropped, bsz, steps, &keep);

    let mut hidden = None;
    let head = match params.arch {
        Architecture::LastState => {
            tape.set_scope(names::DENSE_W);
            let c = tape.concat_cols(&[f_last, b_first]);
            let d = p.dense(&mut tape, c, names::DENSE_W, names::DENSE_B);
            let d = tape.tanh(d);
            tape.set_scope(names::OUT_W);
            let y = p.dense(&mut tape, d, names::OUT_W, names::OUT_B);
            let y = tape.sigmoid(y);
            HeadNodes::LastState { c, d, y }
        }
        arch => {
            tape.set_scope(names::PROJ_W);
            let h = p.dense(&mut tape, bilstm, names::PROJ_W, names::PROJ_B);
            let h = tape.tanh(h);
            hidden = Some(h);
            let h = apply_dropout(&mut tape, h, mode, &mut rng);
            if arch == Architecture::Tagger {
                tape.set_scope(names::TAG_W);
                let logits = p.dense(&mut tape, h, names::TAG_W, names::TAG_B);
                HeadNodes::Tagger { logits }
            } else {
                tape.set_scope(names::ATT_W);
                let e = p.dense(&mut tape, h, names::ATT_W, names::ATT_B);
                let e = tape.tanh(e);
                tape.set_scope(names::ATT_OUT_W);
                let score = p.dense(&mut tape, e, names::ATT_OUT_W, names::ATT_OUT_B);
                let e_tilde = tape.column_to_grid(score, bsz);
                tape.set_scope("attention");
                let a_tilde = tape.sigmoid(e_tilde);
                let a = match attention {
                    AttentionMode::Logistic => tape.normalize_rows(a_tilde, batch.mask.clone()),
                    AttentionMode::Exp => tape.masked_softmax(e_tilde, batch.mask.clone()),
                };
                let c = tape.attention_pool(a, h);
                tape.set_scope(names::DENSE_W);
                let d = p.dense(&mut tape, c, names::DENSE_W, names::DENSE_B);
                let d = tape.tanh(d);
                tape.set_scope(names::OUT_W);
                let y = p.dense(&mut tape, d, names::OUT_W, names::OUT_B);
                let y = tape.sigmoid(y);
                HeadNodes::Attention {
                    e_tilde,
                    a_tilde,
                    a,
                    c,
                    d,
                    y,
                }
            }
        }
    };

    if let Some(block) = tape.first_non_finite() {
        return Err(Error::NonFinite {
            block: block.to_string(),
        });
    }
    Ok(Graph {
        tape,
        params: p,
        words,
        bilstm,
        hidden,
        head,
        batch_size: bsz,
        steps,
        mask: batch.mask.clone(),
        lengths: batch.lengths.clone(),
    })
}

impl Graph {
    fn row(&self, node: NodeId, b: usize, t: usize) -> Vec<f64> {
        self.tape.value(node).row(t * self.batch_size + b).to_vec()
    }

    /// Sentence score node `[batch x 1]`, if the head has one.
    pub fn y(&self) -> Option<NodeId> {
        match self.head {
            HeadNodes::Attention { y, .. } | HeadNodes::LastState { y, .. } => Some(y),
            HeadNodes::Tagger { .. } => None,
        }
    }

    /// Unnormalized attention `[batch x steps]`, for the attention head.
    pub fn a_tilde(&self) -> Option<NodeId> {
        match self.head {
            HeadNodes::Attention { a_tilde, .. } => Some(a_tilde),
            _ => None,
        }
    }

    pub fn traces(&self) -> Vec<ForwardTrace> {
        (0..self.batch_size).map(|b| self.trace(b)).collect()
    }

    fn trace(&self, b: usize) -> ForwardTrace {
        let len = self.lengths[b];
        let t = &self.tape;
        let row_of = |node: NodeId| t.value(node).row(b).to_vec();
        match self.head {
            HeadNodes::Attention {
                e_tilde,
                a_tilde,
                a,
                c,
                d,
                y,
            } => {
                let hidden = self.hidden.expect("attention head has hidden states");
                let a_row = row_of(a)[..len].to_vec();
                let sum: f64 = (0..len).map(|i| t.value(a_tilde).get(b, i)).sum();
                ForwardTrace {
                    h: (0..len).map(|i| self.row(hidden, b, i)).collect(),
                    e_tilde: row_of(e_tilde)[..len].to_vec(),
                    a_tilde: row_of(a_tilde)[..len].to_vec(),
                    a: a_row,
                    c: row_of(c),
                    d: row_of(d),
                    y: t.value(y).get(b, 0),
                    uniform_fallback: sum < NORMALIZE_EPS,
                }
            }
            HeadNodes::LastState { c, d, y } => ForwardTrace {
                h: (0..len).map(|i| self.row(self.bilstm, b, i)).collect(),
                e_tilde: vec![],
                a_tilde: vec![],
                a: vec![],
                c: row_of(c),
                d: row_of(d),
                y: t.value(y).get(b, 0),
                uniform_fallback: false,
            },
            HeadNodes::Tagger { .. } => panic!("tagger graphs have no sentence trace"),
        }
    }

    /// Per-token `[p(0), p(1)]` for the tagger head, per sentence.
    pub fn token_distributions(&self) -> Vec<Vec<[f64; 2]>> {
        let HeadNodes::Tagger { logits } = self.head else {
            panic!("token distributions need a tagger graph")
        };
        let probs = softmax_rows(self.tape.value(logits));
        (0..self.batch_size)
            .map(|b| {
                (0..self.lengths[b])
                    .map(|t| {
                        let r = probs.row(t * self.batch_size + b);
                        [r[0], r[1]]
                    })
                    .collect()
            })
            .collect()
    }

    pub fn backward(&self, loss: NodeId) -> Gradients {
        self.tape.backward(loss)
    }

    /// Gradients for every parameter tensor, zero-filled where untouched.
    pub fn param_gradients(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.params
            .nodes
            .iter()
            .map(|(k, &id)| (k.clone(), grads.get_or_zeros(&self.tape, id)))
            .collect()
    }

    /// Gradient at each token's word representation `w_i`, per sentence.
    pub fn input_gradients(&self, grads: &Gradients) -> Vec<Vec<Vec<f64>>> {
        let g = grads.get_or_zeros(&self.tape, self.words);
        (0..self.batch_size)
            .map(|b| {
                (0..self.steps)
                    .map(|t| g.row(t * self.batch_size + b).to_vec())
                    .collect()
            })
            .collect()
    }
}

/// Eval- or train-mode sentence-classifier forward pass.
pub fn forward<R: Rng + ?Sized>(
    batch: &Batch,
    params: &ModelParams,
    mode: Mode,
    attention: AttentionMode,
    rng: Option<&mut R>,
) -> Result<Vec<ForwardTrace>> {
    Ok(build_graph(params, batch, mode, attention, rng)?.traces())
}

/// Eval-mode tagger forward pass: per-token `[p(0), p(1)]`.
pub fn supervised_forward(batch: &Batch, params: &ModelParams) -> Result<Vec<Vec<[f64; 2]>>> {
    if params.arch != Architecture::Tagger {
        return Err(Error::Contract("supervised_forward needs a tagger model".into()));
    }
    let g = build_graph::<rand_chacha::ChaCha8Rng>(params, batch, Mode::Eval, AttentionMode::Logistic, None)?;
    Ok(g.token_distributions())
}

/// Character BiLSTM representation of a single token.
pub fn char_encode(char_ids: &[usize], params: &ModelParams) -> Vec<f64> {
    assert!(!char_ids.is_empty(), "char_encode needs at least one character");
    let mut tape = Tape::new();
    let p = ParamNodes::register(&mut tape, params);
    let out = char_encoder(
        &mut tape,
        &p,
        &params.dims,
        char_ids,
        &[char_ids.len()],
        char_ids.len(),
    );
    tape.value(out).data().to_vec()
}

/// `h_i = tanh(W_h [fwd_i; bwd_i] + b_h)` for one sentence of word
/// representations `[T x word_rep_dim]`.
pub fn encode_sentence(word_reps: &Matrix, params: &ModelParams) -> Matrix {
    let steps = word_reps.rows();
    assert!(steps >= 1, "encode_sentence needs at least one token");
    let mut tape = Tape::new();
    let p = ParamNodes::register(&mut tape, params);
    let words = tape.constant(word_reps.clone());
    let keep = vec![vec![true]; steps];
    let (bilstm, _, _) = word_encoder(&mut tape, &p, &params.dims, words, 1, steps, &keep);
    let h = p.dense(&mut tape, bilstm, names::PROJ_W, names::PROJ_B);
    let h = tape.tanh(h);
    tape.value(h).clone()
}

/// `e~_i = W_e~ tanh(W_e h_i + b_e) + b_e~` for each row of `h`.
pub fn attention_scores(h: &Matrix, params: &ModelParams) -> Vec<f64> {
    let mut e = h.matmul(params.get(names::ATT_W));
    let bias = params.get(names::ATT_B).data();
    for r in 0..e.rows() {
        for (x, b) in e.row_mut(r).iter_mut().zip(bias) {
            *x = (*x + b).tanh();
        }
    }
    let b = params.get(names::ATT_OUT_B).data()[0];
    e.matmul(params.get(names::ATT_OUT_W))
        .data()
        .iter()
        .map(|x| x + b)
        .collect()
}

/// Logistic attention: `a~_i = sigmoid(e~_i)` and `a_i = a~_i / sum_k a~_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAttention {
    pub a_tilde: Vec<f64>,
    pub a: Vec<f64>,
    pub uniform_fallback: bool,
}

pub fn soft_attention(e_tilde: &[f64]) -> SoftAttention {
    assert!(!e_tilde.is_empty(), "soft_attention needs at least one score");
    let a_tilde: Vec<f64> = e_tilde.iter().map(|&e| sigmoid(e)).collect();
    let sum: f64 = a_tilde.iter().sum();
    let (a, uniform_fallback) = if sum < NORMALIZE_EPS {
        (vec![1.0 / a_tilde.len() as f64; a_tilde.len()], true)
    } else {
        (a_tilde.iter().map(|x| x / sum).collect(), false)
    };
    SoftAttention {
        a_tilde,
        a,
        uniform_fallback,
    }
}

/// Softmax attention with max subtraction.
pub fn exp_attention(e_tilde: &[f64]) -> Vec<f64> {
    assert!(!e_tilde.is_empty(), "exp_attention needs at least one score");
    let max = e_tilde.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = e_tilde.iter().map(|e| (e - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / sum).collect()
}

/// `c = sum_i a_i h_i`.
pub fn sentence_representation(a: &[f64], h: &Matrix) -> Vec<f64> {
    assert_eq!(a.len(), h.rows(), "attention and states differ in length");
    let mut c = vec![0.0; h.cols()];
    for (i, &w) in a.iter().enumerate() {
        for (o, x) in c.iter_mut().zip(h.row(i)) {
            *o += w * x;
        }
    }
    c
}

/// `d = tanh(W_d c + b_d)`, `y = sigmoid(W_y d + b_y)`.
pub fn sentence_score(c: &[f64], params: &ModelParams) -> (Vec<f64>, f64) {
    let cm = Matrix::row_vector(c.to_vec());
    let mut d = cm.matmul(params.get(names::DENSE_W));
    for (x, b) in d.data_mut().iter_mut().zip(params.get(names::DENSE_B).data()) {
        *x = (*x + b).tanh();
    }
    let z = d.matmul(params.get(names::OUT_W)).data()[0] + params.get(names::OUT_B).data()[0];
    (d.into_vec(), sigmoid(z))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ZSLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    dims: DimensionConfig,
    attention: AttentionMode,
    char_max: usize,
    vocab_fingerprint: String,
    vocab: Vocab,
    tensors: Vec<(String, usize, usize)>,
}

/// A trained model with everything needed to run it on new text.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub attention: AttentionMode,
    pub char_max: usize,
}

impl Checkpoint {
    /// Layout: 8-byte magic, `u32` LE version, `u64` LE header length, JSON
    /// header (config, vocabulary, tensor names and shapes), then every tensor
    /// as little-endian `f64` in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            arch: self.params.arch,
            dims: self.params.dims,
            attention: self.attention,
            char_max: self.char_max,
            vocab_fingerprint: self.vocab.fingerprint(),
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .tensors
                .iter()
                .map(|(k, m)| (k.clone(), m.rows(), m.cols()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + 8 * self.params.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in self.params.tensors.values() {
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.vocab.fingerprint() != header.vocab_fingerprint {
            return Err(bad("vocabulary fingerprint mismatch"));
        }
        let mut offset = 20 + hlen;
        let mut tensors = BTreeMap::new();
        for (name, rows, cols) in header.tensors {
            let n = rows * cols;
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Matrix::from_vec(rows, cols, data));
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            params: ModelParams {
                arch: header.arch,
                dims: header.dims,
                tensors,
            },
            vocab: header.vocab,
            attention: header.attention,
            char_max: header.char_max,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
