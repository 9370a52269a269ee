//! Flat `key = value` run configuration. An empty file yields the defaults.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::labelers::Method;
use crate::metrics::MapOptions;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
    pub positive_labels: Vec<String>,
    pub map: MapOptions,
    pub relfreq_smoothing: f64,
    pub parallel_seeds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            train_path: None,
            dev_path: None,
            test_path: None,
            methods: vec![Method::Attention, Method::Backprop, Method::RelFreq, Method::Supervised],
            out_dir: PathBuf::from("out"),
            positive_labels: vec!["1".to_string()],
            map: MapOptions::default(),
            relfreq_smoothing: 0.0,
            parallel_seeds: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut t.dims;
        match key {
            "arch" => t.arch = parse(key, value)?,
            "word_emb_dim" => d.word_emb_dim = parse(key, value)?,
            "char_emb_dim" => d.char_emb_dim = parse(key, value)?,
            "char_hidden" => d.char_hidden = parse(key, value)?,
            "word_hidden" => d.word_hidden = parse(key, value)?,
            "combined_h" => d.combined_h = parse(key, value)?,
            "attention_e" => d.attention_e = parse(key, value)?,
            "sentence_d" => d.sentence_d = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "rho" => t.rho = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "seeds" => t.seeds = list(value).map(|s| parse(key, s)).collect::<Result<_>>()?,
            "attention" => t.attention = parse(key, value)?,
            "selection" => t.selection = parse(key, value)?,
            "reduction" => {
                t.reduction = match value {
                    "sum" => crate::objectives::Reduction::Sum,
                    "mean" => crate::objectives::Reduction::Mean,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
                }
            }
            "clip_norm" => {
                t.clip_norm = match value {
                    "" | "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "min_count" => t.min_count = parse(key, value)?,
            "char_max" => t.char_max = parse(key, value)?,
            "embeddings" => t.embeddings = opt_path(value),
            "train" => self.train_path = opt_path(value),
            "dev" => self.dev_path = opt_path(value),
            "test" => self.test_path = opt_path(value),
            "methods" => self.methods = list(value).map(str::parse).collect::<Result<_>>()?,
            "out" => self.out_dir = PathBuf::from(value),
            "positive_labels" => self.positive_labels = list(value).map(str::to_string).collect(),
            "map_global" => self.map.global = parse_bool(key, value)?,
            "map_empty_as_zero" => self.map.empty_as_zero = parse_bool(key, value)?,
            "relfreq_smoothing" => self.relfreq_smoothing = parse(key, value)?,
            "parallel_seeds" => self.parallel_seeds = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{pair}` is not `key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.relfreq_smoothing < 0.0 {
            return Err(Error::Config("relfreq_smoothing must be nonnegative".into()));
        }
        Ok(())
    }

    /// Every key with its current value, parseable by `from_text`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &t.dims;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let join = |v: Vec<String>| v.join(",");
        let lines = [
            ("arch", serde_json::to_value(t.arch).unwrap().as_str().unwrap().to_string()),
            ("word_emb_dim", d.word_emb_dim.to_string()),
            ("char_emb_dim", d.char_emb_dim.to_string()),
            ("char_hidden", d.char_hidden.to_string()),
            ("word_hidden", d.word_hidden.to_string()),
            ("combined_h", d.combined_h.to_string()),
            ("attention_e", d.attention_e.to_string()),
            ("sentence_d", d.sentence_d.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("dropout", t.dropout.to_string()),
            ("gamma", t.gamma.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("rho", t.rho.to_string()),
            ("eps", t.eps.to_string()),
            ("patience", t.patience.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("seeds", join(t.seeds.iter().map(u64::to_string).collect())),
            ("attention", serde_json::to_value(t.attention).unwrap().as_str().unwrap().to_string()),
            ("selection", serde_json::to_value(t.selection).unwrap().as_str().unwrap().to_string()),
            ("reduction", serde_json::to_value(t.reduction).unwrap().as_str().unwrap().to_string()),
            ("clip_norm", t.clip_norm.map_or("none".to_string(), |c| c.to_string())),
            ("min_count", t.min_count.to_string()),
            ("char_max", t.char_max.to_string()),
            ("embeddings", path(&t.embeddings)),
            ("train", path(&self.train_path)),
            ("dev", path(&self.dev_path)),
            ("test", path(&self.test_path)),
            ("methods", join(self.methods.iter().map(|m| m.to_string()).collect())),
            ("out", self.out_dir.display().to_string()),
            ("positive_labels", join(self.positive_labels.clone())),
            ("map_global", self.map.global.to_string()),
            ("map_empty_as_zero", self.map.empty_as_zero.to_string()),
            ("relfreq_smoothing", self.relfreq_smoothing.to_string()),
            ("parallel_seeds", self.parallel_seeds.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, AttentionMode};

    #[test]
    fn empty_is_default() {
        let c = RunConfig::from_text("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.dropout, 0.5);
        assert_eq!(c.train.gamma, 0.01);
        assert_eq!(c.train.patience, 7);
        assert_eq!(c.train.dims.word_emb_dim, 300);
        assert_eq!(c.train.dims.combined_h, 200);
    }

    #[test]
    fn parses_and_overrides() {
        let mut c = RunConfig::from_text("# comment\narch = tagger\nseeds = 3, 4\nword_hidden=50 # inline\n").unwrap();
        assert_eq!(c.train.arch, Architecture::Tagger);
        assert_eq!(c.train.seeds, vec![3, 4]);
        assert_eq!(c.train.dims.word_hidden, 50);
        c.apply_overrides(["attention=exp", "map_global=true"]).unwrap();
        assert_eq!(c.train.attention, AttentionMode::Exp);
        assert!(c.map.global);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::from_text("gamma = 0.1\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(RunConfig::from_text("gamma\n").is_err());
        assert!(RunConfig::from_text("gamma = x\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_overrides(["clip_norm=5", "embeddings=/tmp/e.txt", "methods=attention,relfreq"]).unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_text(&d.to_text()).unwrap(), d);
    }
}
