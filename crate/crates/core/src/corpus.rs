//! Corpus ingestion: token- and sentence-annotated text formats, vocabularies,
//! pretrained embeddings and padded batches.
//!
//! Two interchange formats are read:
//!
//! * token-annotated TSV, one `token<TAB>label` per line, sentences separated
//!   by blank lines;
//! * sentence-annotated lines, `label<TAB>tok tok tok`, one sentence per line.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const DEFAULT_CHAR_MAX: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub token_labels: Option<Vec<u8>>,
    pub sentence_label: Option<u8>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract("a sentence needs at least one token".into()));
        }
        Ok(Self {
            tokens,
            token_labels: None,
            sentence_label: None,
        })
    }

    pub fn with_token_labels(tokens: Vec<String>, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != tokens.len() {
            return Err(Error::Contract(format!(
                "{} token labels for {} tokens",
                labels.len(),
                tokens.len()
            )));
        }
        let mut s = Self::new(tokens)?;
        s.token_labels = Some(labels);
        Ok(s)
    }

    pub fn with_sentence_label(tokens: Vec<String>, label: u8) -> Result<Self> {
        let mut s = Self::new(tokens)?;
        s.sentence_label = Some(label);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub split: Split,
}

impl Dataset {
    pub fn new(sentences: Vec<Sentence>, split: Split) -> Self {
        Self { sentences, split }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn has_token_labels(&self) -> bool {
        self.sentences.iter().all(|s| s.token_labels.is_some())
    }

    pub fn has_sentence_labels(&self) -> bool {
        self.sentences.iter().all(|s| s.sentence_label.is_some())
    }
}

/// Mapping between label strings and the binary label space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelScheme {
    pub positive: HashSet<String>,
    /// Strings written back out for labels 1 and 0.
    pub write_positive: String,
    pub write_negative: String,
}

impl Default for LabelScheme {
    fn default() -> Self {
        Self::new(["1"])
    }
}

impl LabelScheme {
    pub fn new<I, S>(positive: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let positive: HashSet<String> = positive.into_iter().map(Into::into).collect();
        let mut sorted: Vec<&String> = positive.iter().collect();
        sorted.sort();
        let write_positive = sorted.first().map(|s| s.to_string()).unwrap_or_else(|| "1".into());
        Self {
            positive,
            write_positive,
            write_negative: "0".into(),
        }
    }

    pub fn label(&self, raw: &str) -> u8 {
        u8::from(self.positive.contains(raw))
    }

    fn render(&self, label: u8) -> &str {
        if label == 1 {
            &self.write_positive
        } else {
            &self.write_negative
        }
    }
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_token_annotated(path: &Path, scheme: &LabelScheme, split: Split) -> Result<Dataset> {
    parse_token_annotated(&read_file(path)?, path, scheme, split)
}

pub fn parse_token_annotated(
    text: &str,
    path: &Path,
    scheme: &LabelScheme,
    split: Split,
) -> Result<Dataset> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, labels: &mut Vec<u8>| -> Result<()> {
        if !tokens.is_empty() {
            sentences.push(Sentence::with_token_labels(
                std::mem::take(tokens),
                std::mem::take(labels),
            )?);
        }
        Ok(())
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut labels)?;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields[0].is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected `token<TAB>label`, found {} field(s)", fields.len()),
            });
        }
        tokens.push(fields[0].to_string());
        labels.push(scheme.label(fields[1].trim()));
    }
    flush(&mut tokens, &mut labels)?;
    if sentences.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(Dataset::new(sentences, split))
}

pub fn load_sentence_annotated(path: &Path, scheme: &LabelScheme, split: Split) -> Result<Dataset> {
    parse_sentence_annotated(&read_file(path)?, path, scheme, split)
}

pub fn parse_sentence_annotated(
    text: &str,
    path: &Path,
    scheme: &LabelScheme,
    split: Split,
) -> Result<Dataset> {
    let mut sentences = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: message.to_string(),
        };
        let (label, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `label<TAB>tokens`"))?;
        let tokens: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(parse_err("sentence has no tokens"));
        }
        sentences.push(Sentence::with_sentence_label(tokens, scheme.label(label.trim()))?);
    }
    if sentences.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(Dataset::new(sentences, split))
}

/// Loads either format, sniffing the first non-blank line: a line whose
/// second field contains whitespace is sentence-annotated.
pub fn load_any(path: &Path, scheme: &LabelScheme, split: Split) -> Result<Dataset> {
    let text = read_file(path)?;
    let sentence_format = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| l.split_once('\t'))
        .is_some_and(|(_, rest)| rest.trim().contains(char::is_whitespace));
    if sentence_format {
        parse_sentence_annotated(&text, path, scheme, split)
    } else {
        let mut ds = parse_token_annotated(&text, path, scheme, split)?;
        if ds.has_token_labels() {
            ds = derive_sentence_labels(ds)?;
        }
        Ok(ds)
    }
}

pub fn write_token_annotated(dataset: &Dataset, scheme: &LabelScheme) -> Result<String> {
    let mut out = String::new();
    for s in &dataset.sentences {
        let labels = s
            .token_labels
            .as_ref()
            .ok_or_else(|| Error::Contract("token-annotated output needs token labels".into()))?;
        for (tok, &l) in s.tokens.iter().zip(labels) {
            let _ = writeln!(out, "{tok}\t{}", scheme.render(l));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Sentence label 1 iff any token label is 1.
pub fn derive_sentence_labels(mut dataset: Dataset) -> Result<Dataset> {
    for (i, s) in dataset.sentences.iter_mut().enumerate() {
        let labels = s
            .token_labels
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sentence {i} has no token labels")))?;
        s.sentence_label = Some(u8::from(labels.contains(&1)));
    }
    Ok(dataset)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabParts")]
pub struct Vocab {
    words: Vec<String>,
    chars: Vec<char>,
    #[serde(skip)]
    word_to_id: HashMap<String, usize>,
    #[serde(skip)]
    char_to_id: HashMap<char, usize>,
}

#[derive(Deserialize)]
struct VocabParts {
    words: Vec<String>,
    chars: Vec<char>,
}

impl From<VocabParts> for Vocab {
    fn from(p: VocabParts) -> Self {
        Vocab::from_parts(p.words, p.chars)
    }
}

impl Vocab {
    /// Word keys are lowercased; characters keep their case. Ids are assigned by
    /// descending count, ties broken lexicographically, after PAD and UNK.
    pub fn build(train: &Dataset, min_count: usize) -> Self {
        let mut word_counts: HashMap<String, usize> = HashMap::new();
        let mut char_counts: HashMap<char, usize> = HashMap::new();
        for s in &train.sentences {
            for tok in &s.tokens {
                *word_counts.entry(tok.to_lowercase()).or_default() += 1;
                for c in tok.chars() {
                    *char_counts.entry(c).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = word_counts
            .into_iter()
            .filter(|(_, n)| *n >= min_count)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut chars: Vec<(char, usize)> = char_counts.into_iter().collect();
        chars.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut all_words = vec!["<pad>".to_string(), "<unk>".to_string()];
        all_words.extend(words.into_iter().map(|(w, _)| w));
        let mut all_chars = vec!['\0', '\u{1}'];
        all_chars.extend(chars.into_iter().map(|(c, _)| c));
        Self::from_parts(all_words, all_chars)
    }

    /// Rebuilds the lookup maps from ordered id lists (PAD and UNK first).
    pub fn from_parts(words: Vec<String>, chars: Vec<char>) -> Self {
        let word_to_id = words
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let char_to_id = chars.iter().enumerate().skip(2).map(|(i, &c)| (c, i)).collect();
        Self {
            words,
            chars,
            word_to_id,
            char_to_id,
        }
    }

    pub fn word_id(&self, token: &str) -> usize {
        self.word_to_id
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_to_id.get(&c).copied().unwrap_or(UNK)
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn char_count(&self) -> usize {
        self.chars.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Hex SHA-256 over the ordered word and character lists.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        h.update([0xffu8]);
        for c in &self.chars {
            h.update(c.to_string().as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Embedding matrix plus a flag per row telling whether it came from the file.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub matrix: Matrix,
    pub pretrained: Vec<bool>,
}

/// Reads `word v1 ... v_dim` lines. Rows for vocabulary words found in the file
/// are copied, the rest are drawn from the Glorot initializer, and the PAD row
/// is zero. A leading `count dim` header line (word2vec text) is skipped.
pub fn load_embeddings<R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<Embeddings> {
    parse_embeddings(&read_file(path)?, path, vocab, dim, rng)
}

pub fn parse_embeddings<R: Rng + ?Sized>(
    text: &str,
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<Embeddings> {
    let mut matrix = Matrix::glorot(vocab.word_count(), dim, rng);
    let mut pretrained = vec![false; vocab.word_count()];
    for (idx, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if idx == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        if fields.len() != dim + 1 {
            return Err(err(format!(
                "expected {dim} values, found {}",
                fields.len() - 1
            )));
        }
        let id = vocab.word_id(fields[0]);
        if id == UNK || id == PAD || pretrained[id] {
            continue;
        }
        let row = matrix.row_mut(id);
        for (slot, f) in row.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| err(format!("`{f}` is not a number")))?;
        }
        pretrained[id] = true;
    }
    matrix.row_mut(PAD).fill(0.0);
    Ok(Embeddings { matrix, pretrained })
}

/// A padded, masked group of sentences.
///
/// Word ids are `[batch x steps]` (sentence-major); char ids are
/// `[batch x steps x char_width]`. Padded positions carry PAD.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub steps: usize,
    pub char_width: usize,
    pub word_ids: Vec<usize>,
    pub char_ids: Vec<usize>,
    pub char_lengths: Vec<usize>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub sentence_labels: Option<Vec<u8>>,
    pub token_labels: Option<Vec<Vec<u8>>>,
    /// Positions of these sentences in the source dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    /// Builds a batch padded to at least `min_steps` positions.
    pub fn new(
        sentences: &[&Sentence],
        indices: Vec<usize>,
        vocab: &Vocab,
        char_max: usize,
        min_steps: usize,
    ) -> Self {
        let batch_size = sentences.len();
        let lengths: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
        let steps = lengths.iter().copied().max().unwrap_or(0).max(min_steps);
        let char_width = sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(|t| t.chars().count()))
            .max()
            .unwrap_or(0)
            .min(char_max)
            .max(1);
        let mut word_ids = vec![PAD; batch_size * steps];
        let mut char_ids = vec![PAD; batch_size * steps * char_width];
        let mut char_lengths = vec![0; batch_size * steps];
        let mut mask = vec![false; batch_size * steps];
        for (b, s) in sentences.iter().enumerate() {
            for (t, tok) in s.tokens.iter().enumerate() {
                let pos = b * steps + t;
                word_ids[pos] = vocab.word_id(tok);
                mask[pos] = true;
                let mut n = 0;
                for (c, ch) in tok.chars().take(char_width).enumerate() {
                    char_ids[pos * char_width + c] = vocab.char_id(ch);
                    n += 1;
                }
                char_lengths[pos] = n;
            }
        }
        let sentence_labels = sentences
            .iter()
            .map(|s| s.sentence_label)
            .collect::<Option<Vec<u8>>>();
        let token_labels = sentences
            .iter()
            .map(|s| s.token_labels.clone())
            .collect::<Option<Vec<Vec<u8>>>>();
        Self {
            batch_size,
            steps,
            char_width,
            word_ids,
            char_ids,
            char_lengths,
            mask,
            lengths,
            sentence_labels,
            token_labels,
            indices,
        }
    }

    pub fn is_token(&self, b: usize, t: usize) -> bool {
        self.mask[b * self.steps + t]
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.mask[b * self.steps..(b + 1) * self.steps]
    }
}

/// Splits `dataset` into batches of at most `batch_size` sentences. With a
/// seed, sentence order is a deterministic permutation of it.
pub fn make_batches(
    dataset: &Dataset,
    vocab: &Vocab,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    char_max: usize,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let sents: Vec<&Sentence> = chunk.iter().map(|&i| &dataset.sentences[i]).collect();
            Batch::new(&sents, chunk.to_vec(), vocab, char_max, 0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.tsv")
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn parses_single_block() {
        let ds = parse_token_annotated("I\t0\nsaw\t0\na\t1\n\n", p(), &LabelScheme::default(), Split::Train)
            .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sentences[0].tokens, toks("I saw a"));
        assert_eq!(ds.sentences[0].token_labels, Some(vec![0, 0, 1]));
    }

    #[test]
    fn parses_two_blocks() {
        let ds = parse_token_annotated("a\t0\n\nb\t1\nc\t0\n", p(), &LabelScheme::default(), Split::Dev)
            .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.split, Split::Dev);
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let err = parse_token_annotated("tok", p(), &LabelScheme::default(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_token_annotated("a\t0\nb\t0\t1\n", p(), &LabelScheme::default(), Split::Train)
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = parse_token_annotated("\n\n", p(), &LabelScheme::default(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn configurable_positive_labels() {
        let scheme = LabelScheme::new(["i"]);
        let ds = parse_token_annotated("He\tc\ngo\ti\n", p(), &scheme, Split::Train).unwrap();
        assert_eq!(ds.sentences[0].token_labels, Some(vec![0, 1]));
    }

    #[test]
    fn sentence_format() {
        let ds = parse_sentence_annotated("1\tthe cat sat\n0\ta dog\n", p(), &LabelScheme::default(), Split::Train)
            .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sentences[0].sentence_label, Some(1));
        assert_eq!(ds.sentences[1].tokens, toks("a dog"));
        assert!(parse_sentence_annotated("1\t  \n", p(), &LabelScheme::default(), Split::Train).is_err());
    }

    #[test]
    fn derive_uses_or_rule() {
        let mk = |l: Vec<u8>| Sentence::with_token_labels(toks("a b c"), l).unwrap();
        let ds = Dataset::new(vec![mk(vec![0, 0, 1]), mk(vec![0, 0, 0]), mk(vec![1, 1, 1])], Split::Train);
        let ds = derive_sentence_labels(ds).unwrap();
        let got: Vec<_> = ds.sentences.iter().map(|s| s.sentence_label).collect();
        assert_eq!(got, vec![Some(1), Some(0), Some(1)]);

        let bare = Dataset::new(vec![Sentence::new(toks("x")).unwrap()], Split::Train);
        assert!(matches!(derive_sentence_labels(bare), Err(Error::Contract(_))));
    }

    #[test]
    fn sentence_invariants() {
        assert!(Sentence::new(vec![]).is_err());
        assert!(Sentence::with_token_labels(toks("a b"), vec![1]).is_err());
    }

    fn aab() -> Dataset {
        Dataset::new(vec![Sentence::new(toks("a a b")).unwrap()], Split::Train)
    }

    #[test]
    fn vocab_min_count() {
        let v = Vocab::build(&aab(), 1);
        assert!(v.word_id("a") > UNK && v.word_id("b") > UNK);
        assert_eq!(v.word_id("c"), UNK);
        assert_eq!(v.word_id("a"), 2, "most frequent word gets the first free id");

        let v2 = Vocab::build(&aab(), 2);
        assert!(v2.word_id("a") > UNK);
        assert_eq!(v2.word_id("b"), UNK);
    }

    #[test]
    fn vocab_is_deterministic_and_lowercases_words_only() {
        let ds = Dataset::new(vec![Sentence::new(toks("Word word zeta alpha")).unwrap()], Split::Train);
        let a = Vocab::build(&ds, 1);
        let b = Vocab::build(&ds, 1);
        assert_eq!(a.words(), b.words());
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.words()[2..], ["word", "alpha", "zeta"]);
        assert_eq!(a.word_id("WORD"), a.word_id("word"));
        assert_ne!(a.char_id('W'), a.char_id('w'));
        assert_eq!(a.char_id('?'), UNK);
    }

    #[test]
    fn embeddings_copy_and_initialize() {
        let ds = Dataset::new(vec![Sentence::new(toks("the cat")).unwrap()], Split::Train);
        let v = Vocab::build(&ds, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = parse_embeddings("the 0.1 0.2\n", p(), &v, 2, &mut rng).unwrap();
        assert_eq!(e.matrix.row(v.word_id("the")), &[0.1, 0.2]);
        assert!(e.pretrained[v.word_id("the")]);
        assert!(!e.pretrained[v.word_id("cat")]);
        assert!(e.matrix.row(v.word_id("cat")).iter().any(|&x| x != 0.0));
        assert_eq!(e.matrix.row(PAD), &[0.0, 0.0]);

        let err = parse_embeddings("the 0.1 0.2 0.3\n", p(), &v, 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let header = parse_embeddings("1 2\nthe 1 2\n", p(), &v, 2, &mut rng).unwrap();
        assert_eq!(header.matrix.row(v.word_id("the")), &[1.0, 2.0]);
    }

    fn five() -> Dataset {
        let lens = [3, 5, 1, 2, 4];
        let sents = lens
            .iter()
            .map(|&n| Sentence::with_sentence_label(vec!["w".to_string(); n], 0).unwrap())
            .collect();
        Dataset::new(sents, Split::Train)
    }

    #[test]
    fn batch_sizes_and_masks() {
        let ds = five();
        let v = Vocab::build(&ds, 1);
        let batches = make_batches(&ds, &v, 2, None, DEFAULT_CHAR_MAX);
        let sizes: Vec<usize> = batches.iter().map(|b| b.batch_size).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let first = &batches[0];
        assert_eq!(first.steps, 5);
        assert_eq!(first.mask_row(0), &[true, true, true, false, false]);
        assert_eq!(first.word_ids[3], PAD);
        assert_eq!(first.char_lengths[4], 0);
    }

    #[test]
    fn seeded_shuffle_is_deterministic() {
        let ds = five();
        let v = Vocab::build(&ds, 1);
        let a = make_batches(&ds, &v, 2, Some(9), DEFAULT_CHAR_MAX);
        let b = make_batches(&ds, &v, 2, Some(9), DEFAULT_CHAR_MAX);
        assert_eq!(a, b);
    }

    #[test]
    fn chars_are_truncated() {
        let ds = Dataset::new(vec![Sentence::new(toks("abcdefgh")).unwrap()], Split::Train);
        let v = Vocab::build(&ds, 1);
        let b = &make_batches(&ds, &v, 1, None, 4)[0];
        assert_eq!(b.char_width, 4);
        assert_eq!(b.char_lengths[0], 4);
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let sentence = prop::collection::vec(("[a-zA-Z]{1,6}", 0u8..2), 1..8).prop_map(|pairs| {
            let (t, l): (Vec<String>, Vec<u8>) = pairs.into_iter().unzip();
            Sentence::with_token_labels(t, l).unwrap()
        });
        prop::collection::vec(sentence, 1..12).prop_map(|s| Dataset::new(s, Split::Train))
    }

    proptest! {
        #[test]
        fn tsv_round_trip(ds in arb_dataset()) {
            let scheme = LabelScheme::default();
            let text = write_token_annotated(&ds, &scheme).unwrap();
            let back = parse_token_annotated(&text, p(), &scheme, Split::Train).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn batches_cover_each_sentence_once(ds in arb_dataset(), bs in 1usize..6, seed in any::<u64>()) {
            let v = Vocab::build(&ds, 1);
            let batches = make_batches(&ds, &v, bs, Some(seed), DEFAULT_CHAR_MAX);
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
            prop_assert_eq!(seen.len(), ds.len());
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
            for b in &batches {
                for (i, &len) in b.lengths.iter().enumerate() {
                    for t in 0..b.steps {
                        prop_assert_eq!(b.is_token(i, t), t < len);
                        if t >= len {
                            prop_assert_eq!(b.word_ids[i * b.steps + t], PAD);
                        }
                    }
                }
            }
        }
    }
}
