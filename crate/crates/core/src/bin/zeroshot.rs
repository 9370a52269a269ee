use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zeroshot::config::RunConfig;
use zeroshot::corpus::{load_any, Dataset, LabelScheme, Split};
use zeroshot::labelers::{self, Method, RelFreqModel, TokenPrediction};
use zeroshot::metrics::EvalReport;
use zeroshot::model::{Architecture, Checkpoint};
use zeroshot::synth::{self, SyntheticSpec};
use zeroshot::trainer::{self, SeedSummary};
use zeroshot::{viz, Error, Result};

#[derive(Parser)]
#[command(name = "zeroshot", version, about = "Token labels from sentence-level supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_parser = ["logistic", "exp"])]
    attention: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Rank all tokens of the corpus together for MAP.
    #[arg(long)]
    map_global: bool,
    /// Comma-separated labelers: attention, backprop, relfreq, supervised.
    #[arg(long)]
    method: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(self.overrides.iter().map(String::as_str))?;
        if let Some(a) = &self.attention {
            cfg.set("attention", a)?;
        }
        if let Some(g) = self.gamma {
            cfg.train.gamma = g;
        }
        if self.map_global {
            cfg.map.global = true;
        }
        if let Some(m) = &self.method {
            cfg.set("methods", m)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trigger-word corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        vocab_size: usize,
        #[arg(long, default_value_t = 10)]
        triggers: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 15)]
        max_len: usize,
        #[arg(long, default_value_t = 0.5)]
        positive_rate: f64,
        #[arg(long, default_value_t = 2000)]
        train_size: usize,
        #[arg(long, default_value_t = 500)]
        dev_size: usize,
        #[arg(long, default_value_t = 500)]
        test_size: usize,
    },
    /// Train one model and write `<arch>.ckpt`, its history and `relfreq.tsv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, value_parser = ["attention", "last", "tagger"])]
        arch: Option<String>,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score labelers against gold token labels, one row per method and model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding checkpoints and `relfreq.tsv`.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Write JSON lines here in addition to the table on stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump token predictions as TSV.
    Label {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint, or `relfreq.tsv` for the relfreq method.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render token scores as a self-contained HTML heatmap.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train over several seeds, evaluate on test and average.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn scheme(cfg: &RunConfig) -> LabelScheme {
    LabelScheme::new(cfg.positive_labels.iter().cloned())
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} path given (flag or config key `{what}`)")))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn arch_name(arch: Architecture) -> &'static str {
    match arch {
        Architecture::Attention => "attention",
        Architecture::LastState => "last",
        Architecture::Tagger => "tagger",
    }
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn cmd_train(cfg: &mut RunConfig, seed: Option<u64>) -> Result<()> {
    let scheme = scheme(cfg);
    let train = load_any(required(&cfg.train_path, "train")?, &scheme, Split::Train)?;
    let dev = load_any(required(&cfg.dev_path, "dev")?, &scheme, Split::Dev)?;
    let seed = seed
        .or_else(|| cfg.train.seeds.first().copied())
        .ok_or_else(|| Error::Config("no seed given".into()))?;
    cfg.train.seeds = vec![seed];
    let name = arch_name(cfg.train.arch);
    let out = cfg.out_dir.clone();
    let (checkpoint, history) = trainer::train_with_observer(&cfg.train, &train, &dev, seed, |r| {
        eprintln!("epoch {:>3}  loss {:.6}  dev {:.4}", r.epoch, r.train_loss.total, r.dev_metric);
    })?;
    for w in &history.warnings {
        warn(w);
    }
    write(&out.join(format!("{name}.ckpt")), checkpoint.to_bytes())?;
    write(&out.join(format!("{name}.history.jsonl")), history.to_jsonl())?;
    write(&out.join(format!("{name}.timing.jsonl")), history.timings_jsonl())?;
    write(&out.join(format!("{name}.config")), cfg.to_text())?;
    if train.has_sentence_labels() {
        let rf = labelers::relfreq_train(&train, cfg.relfreq_smoothing)?;
        write(&out.join("relfreq.tsv"), rf.to_tsv())?;
    }
    eprintln!(
        "best epoch {} of {}; wrote {}",
        history.best_epoch,
        history.epochs.len(),
        out.join(format!("{name}.ckpt")).display()
    );
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_relfreq(path: &Path, smoothing: f64) -> Result<RelFreqModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RelFreqModel::from_tsv(&text, smoothing)
}

/// A JSON line for one report, tagged with the model it came from.
fn report_json(model: &str, report: &EvalReport) -> String {
    let mut v = serde_json::to_value(report).expect("report serializes");
    v["model"] = serde_json::Value::from(model);
    serde_json::to_string(&v).expect("value serializes")
}

fn table(rows: &[(String, EvalReport)]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut out = format!(
        "{:<11} {:<10} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "method", "model", "Sent-F1", "MAP", "P", "R", "F1"
    );
    for (model, r) in rows {
        out.push_str(&format!(
            "{:<11} {:<10} {:>7} {:>7} {:>7.2} {:>7.2} {:>7.2}\n",
            r.method,
            model,
            opt(r.sentence_f1),
            opt(r.token_map),
            100.0 * r.token_precision,
            100.0 * r.token_recall,
            100.0 * r.token_f1
        ));
    }
    out
}

fn emit(rows: &[(String, EvalReport)], out: Option<&Path>) -> Result<()> {
    print!("{}", table(rows));
    if let Some(path) = out {
        let lines: String = rows.iter().map(|(m, r)| report_json(m, r) + "\n").collect();
        write(path, lines)?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, models: &Path, out: Option<&Path>) -> Result<()> {
    let data = load_any(required(&cfg.test_path, "test")?, &scheme(cfg), Split::Test)?;
    if !data.has_token_labels() {
        return Err(Error::Contract("evaluation data has no token labels".into()));
    }
    let load = |arch: Architecture| -> Result<Option<Checkpoint>> {
        let path = models.join(format!("{}.ckpt", arch_name(arch)));
        if path.exists() {
            Ok(Some(Checkpoint::from_bytes(&read_bytes(&path)?)?))
        } else {
            Ok(None)
        }
    };
    let attention = load(Architecture::Attention)?;
    let last = load(Architecture::LastState)?;
    let tagger = load(Architecture::Tagger)?;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let candidates: Vec<(&str, &Checkpoint)> = match method {
            Method::Attention => attention.iter().map(|c| ("attention", c)).collect(),
            Method::Backprop => attention
                .iter()
                .map(|c| ("attention", c))
                .chain(last.iter().map(|c| ("last", c)))
                .collect(),
            Method::Supervised => tagger.iter().map(|c| ("tagger", c)).collect(),
            Method::RelFreq => {
                let path = models.join("relfreq.tsv");
                if path.exists() {
                    let model = load_relfreq(&path, cfg.relfreq_smoothing)?;
                    rows.push(("relfreq".to_string(), labelers::evaluate_relfreq(&model, &data, cfg.map)?));
                } else {
                    warn(&format!("skipping relfreq: {} not found", path.display()));
                }
                continue;
            }
        };
        if candidates.is_empty() {
            warn(&format!("skipping {method}: no suitable checkpoint in {}", models.display()));
        }
        for (name, ckpt) in candidates {
            rows.push((name.to_string(), labelers::evaluate(ckpt, &data, method, cfg.map)?));
        }
    }
    emit(&rows, out)
}

enum Model {
    Net(Checkpoint),
    Counts(RelFreqModel),
}

fn load_model(path: &Path, smoothing: f64) -> Result<Model> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"ZSLCKPT") {
        Ok(Model::Net(Checkpoint::from_bytes(&bytes)?))
    } else {
        load_relfreq(path, smoothing).map(Model::Counts)
    }
}

fn predictions(cfg: &RunConfig, model: &Model, data: &Dataset) -> Result<Vec<Vec<TokenPrediction>>> {
    let method = *cfg
        .methods
        .first()
        .ok_or_else(|| Error::Config("no method selected".into()))?;
    match (model, method) {
        (Model::Counts(rf), Method::RelFreq) => {
            Ok(data.sentences.iter().map(|s| labelers::relfreq_score(rf, s)).collect())
        }
        (Model::Net(_), Method::RelFreq) => Err(Error::Config("relfreq needs a relfreq.tsv model".into())),
        (Model::Net(ckpt), m) => labelers::predict_tokens(ckpt, data, m),
        (Model::Counts(_), m) => Err(Error::Config(format!("{m} needs a checkpoint"))),
    }
}

fn single_method(cfg: &mut RunConfig, explicit: bool, model: &Model) {
    if !explicit {
        cfg.methods = vec![match model {
            Model::Net(c) => Method::for_arch(c.params.arch),
            Model::Counts(_) => Method::RelFreq,
        }];
    }
}

fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let corpus = synth::generate(spec)?;
    synth::write_corpus(&corpus, out)?;
    eprintln!(
        "wrote {} / {} / {} sentences to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn experiment_rows(summary: &SeedSummary, model: &str, rows: &mut Vec<(String, EvalReport)>, per_seed: &mut String) {
    for run in &summary.runs {
        for r in &run.reports {
            let mut v: serde_json::Value = serde_json::from_str(&report_json(model, r)).expect("valid json");
            v["seed"] = serde_json::Value::from(run.seed);
            per_seed.push_str(&serde_json::to_string(&v).expect("serializes"));
            per_seed.push('\n');
        }
    }
    for r in &summary.averaged {
        rows.push((model.to_string(), r.clone()));
    }
}

fn cmd_experiment(cfg: &RunConfig) -> Result<()> {
    let scheme = scheme(cfg);
    let train = load_any(required(&cfg.train_path, "train")?, &scheme, Split::Train)?;
    let dev = load_any(required(&cfg.dev_path, "dev")?, &scheme, Split::Dev)?;
    let test = load_any(required(&cfg.test_path, "test")?, &scheme, Split::Test)?;
    let sentence_methods: Vec<Method> = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| matches!(m, Method::Attention | Method::Backprop))
        .collect();
    let mut rows = Vec::new();
    let mut per_seed = String::new();
    if !sentence_methods.is_empty() {
        let mut tc = cfg.train.clone();
        tc.arch = Architecture::Attention;
        let s = trainer::run_seeds(&tc, &train, &dev, &test, &sentence_methods, cfg.map, cfg.parallel_seeds)?;
        experiment_rows(&s, "attention", &mut rows, &mut per_seed);
    }
    if cfg.methods.contains(&Method::Supervised) {
        let mut tc = cfg.train.clone();
        tc.arch = Architecture::Tagger;
        let s = trainer::run_seeds(&tc, &train, &dev, &test, &[Method::Supervised], cfg.map, cfg.parallel_seeds)?;
        experiment_rows(&s, "tagger", &mut rows, &mut per_seed);
    }
    if cfg.methods.contains(&Method::RelFreq) {
        let rf = labelers::relfreq_train(&train, cfg.relfreq_smoothing)?;
        rows.push(("relfreq".to_string(), labelers::evaluate_relfreq(&rf, &test, cfg.map)?));
    }
    write(&cfg.out_dir.join("per_seed.jsonl"), per_seed)?;
    emit(&rows, Some(&cfg.out_dir.join("report.jsonl")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            vocab_size,
            triggers,
            min_len,
            max_len,
            positive_rate,
            train_size,
            dev_size,
            test_size,
        } => {
            let spec = SyntheticSpec {
                vocab_size,
                triggers,
                min_len,
                max_len,
                positive_rate,
                train_size,
                dev_size,
                test_size,
                seed,
                ..SyntheticSpec::default()
            };
            cmd_synth(&spec, &out)
        }
        Command::Train {
            common,
            train,
            dev,
            arch,
            seed,
            out,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(a) = arch {
                cfg.set("arch", &a)?;
            }
            cfg.train_path = train.or(cfg.train_path);
            cfg.dev_path = dev.or(cfg.dev_path);
            cfg.out_dir = out.unwrap_or(cfg.out_dir);
            cmd_train(&mut cfg, seed)
        }
        Command::Eval {
            common,
            data,
            models,
            out,
        } => {
            let mut cfg = common.resolve()?;
            cfg.test_path = data.or(cfg.test_path);
            let models = models.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_eval(&cfg, &models, out.as_deref())
        }
        Command::Label { common, data, model, out } => {
            let mut cfg = common.resolve()?;
            let model = load_model(&model, cfg.relfreq_smoothing)?;
            single_method(&mut cfg, common.method.is_some(), &model);
            let ds = load_any(&data, &scheme(&cfg), Split::Test)?;
            let tsv = labelers::predictions_tsv(&ds, &predictions(&cfg, &model, &ds)?);
            match out {
                Some(p) => write(&p, tsv),
                None => {
                    print!("{tsv}");
                    Ok(())
                }
            }
        }
        Command::Visualize {
            common,
            data,
            model,
            out,
            limit,
        } => {
            let mut cfg = common.resolve()?;
            let model = load_model(&model, cfg.relfreq_smoothing)?;
            single_method(&mut cfg, common.method.is_some(), &model);
            let mut ds = load_any(&data, &scheme(&cfg), Split::Test)?;
            if let Some(n) = limit {
                ds.sentences.truncate(n);
            }
            let preds = predictions(&cfg, &model, &ds)?;
            let pairs: Vec<(&[String], &[TokenPrediction])> = ds
                .sentences
                .iter()
                .zip(&preds)
                .map(|(s, p)| (s.tokens.as_slice(), p.as_slice()))
                .collect();
            let title = format!("{} token scores", cfg.methods[0]);
            write(&out, viz::render_page(&title, &pairs))
        }
        Command::Experiment { common, seeds, out } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = seeds {
                cfg.set("seeds", &s)?;
            }
            cfg.out_dir = out.unwrap_or(cfg.out_dir);
            cmd_experiment(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
