//! Command-line surface: flat `key = value` configuration, command dispatch, CSV output.
//!
//! ```text
//! slicesort <command> [--config=FILE] [--key=value ...]
//! ```
//!
//! A config file holds `key = value` pairs, one or several per line, with `#`
//! comments. Flags given on the command line override file entries.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::{
    bench_attention, softmax_std_curve, spectrum_experiment, BenchRecord, SpectrumReport,
};
use crate::data::{gen_listops_lite, gen_multiset_majority, listops, load_idx, LabeledSequence, Rng};
use crate::encoder::{AttentionKind, EncoderConfig, EncoderParams, StrategyKind};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::tensor::Tensor;
use crate::training::{train_loop, AdamConfig, TrainConfig, TrainLog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const USAGE: &str = "\
usage: slicesort <command> [--config=FILE] [--key=value ...]

commands:
  train      train one encoder, write training_log.csv
  bench      time both attention mechanisms, write bench.csv
  smoothing  softmax output spread versus length, write smoothing.csv
  spectrum   train both mechanisms, write spectrum_<mechanism>_<layer>.csv
  gradcheck  finite-difference check of every op and the full model
";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Bench,
    Smoothing,
    Spectrum,
    GradCheck,
}

impl Command {
    pub fn parse(name: &str) -> Option<Command> {
        Some(match name {
            "train" => Command::Train,
            "bench" => Command::Bench,
            "smoothing" => Command::Smoothing,
            "spectrum" => Command::Spectrum,
            "gradcheck" => Command::GradCheck,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Majority,
    ListOps,
    Idx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub task: Task,
    pub attention: AttentionKind,
    pub strategy: StrategyKind,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    /// Encoder length including the CLS slot.
    pub seq_len: usize,
    pub n_classes: usize,
    pub output_projection: bool,
    pub positional_encoding: bool,
    pub train_samples: usize,
    pub test_samples: usize,
    pub listops_depth: usize,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub target_test_acc: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub bench_n: Vec<usize>,
    pub bench_d: usize,
    pub bench_heads: usize,
    pub bench_head_dim: usize,
    pub repeats: usize,
    pub smoothing_n: Vec<usize>,
    pub trials: usize,
    pub probe_size: usize,
    pub gradcheck_seeds: u64,
}

pub const KEYS: &[&str] = &[
    "task",
    "attention",
    "strategy",
    "layers",
    "d_model",
    "heads",
    "head_dim",
    "ffn_mult",
    "vocab",
    "seq_len",
    "n_classes",
    "output_projection",
    "positional_encoding",
    "train_samples",
    "test_samples",
    "listops_depth",
    "idx_images",
    "idx_labels",
    "idx_test_images",
    "idx_test_labels",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
    "batch_size",
    "epochs",
    "target_test_acc",
    "seed",
    "out_dir",
    "bench_n",
    "bench_d",
    "bench_heads",
    "bench_head_dim",
    "repeats",
    "smoothing_n",
    "trials",
    "probe_size",
    "gradcheck_seeds",
];

impl RunConfig {
    pub fn new(command: Command) -> Self {
        let enc = EncoderConfig::default();
        let adam = AdamConfig::default();
        RunConfig {
            command,
            task: Task::Majority,
            attention: enc.attention,
            strategy: enc.strategy,
            layers: enc.layers,
            d_model: enc.d_model,
            heads: enc.heads,
            head_dim: enc.head_dim,
            ffn_mult: enc.ffn_mult,
            vocab: enc.vocab,
            seq_len: enc.seq_len,
            n_classes: enc.n_classes,
            output_projection: enc.output_projection,
            positional_encoding: enc.positional_encoding,
            train_samples: 500,
            test_samples: 200,
            listops_depth: 3,
            idx_images: None,
            idx_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: 1.0,
            batch_size: 16,
            epochs: 50,
            target_test_acc: None,
            seed: 0,
            out_dir: PathBuf::from("."),
            bench_n: (8..=13).map(|k| 1usize << k).collect(),
            bench_d: 16,
            bench_heads: 1,
            bench_head_dim: 16,
            repeats: 3,
            smoothing_n: (1..=6).map(|k| 10usize.pow(k)).collect(),
            trials: 100,
            probe_size: 32,
            gradcheck_seeds: 10,
        }
    }

    /// Apply one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => {
                self.task = match value {
                    "majority" => Task::Majority,
                    "listops" => Task::ListOps,
                    "idx" => Task::Idx,
                    _ => return Err(bad_variant(key, value, &["majority", "listops", "idx"])),
                }
            }
            "attention" => {
                self.attention = match value {
                    "softmax" => AttentionKind::SoftmaxMha,
                    "slicesort" => AttentionKind::SliceSort,
                    _ => return Err(bad_variant(key, value, &["softmax", "slicesort"])),
                }
            }
            "strategy" => {
                self.strategy = match value {
                    "ascending" => StrategyKind::Ascending,
                    "interleave" => StrategyKind::Interleave,
                    "max_exchange" => StrategyKind::MaxExchange,
                    _ => {
                        return Err(bad_variant(
                            key,
                            value,
                            &["ascending", "interleave", "max_exchange"],
                        ))
                    }
                }
            }
            "layers" => self.layers = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "head_dim" => self.head_dim = parse(key, value)?,
            "ffn_mult" => self.ffn_mult = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "output_projection" => self.output_projection = parse(key, value)?,
            "positional_encoding" => self.positional_encoding = parse(key, value)?,
            "train_samples" => self.train_samples = parse(key, value)?,
            "test_samples" => self.test_samples = parse(key, value)?,
            "listops_depth" => self.listops_depth = parse(key, value)?,
            "idx_images" => self.idx_images = Some(PathBuf::from(value)),
            "idx_labels" => self.idx_labels = Some(PathBuf::from(value)),
            "idx_test_images" => self.idx_test_images = Some(PathBuf::from(value)),
            "idx_test_labels" => self.idx_test_labels = Some(PathBuf::from(value)),
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "target_test_acc" => {
                self.target_test_acc = match value {
                    "none" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "bench_n" => self.bench_n = parse_list(key, value)?,
            "bench_d" => self.bench_d = parse(key, value)?,
            "bench_heads" => self.bench_heads = parse(key, value)?,
            "bench_head_dim" => self.bench_head_dim = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "smoothing_n" => self.smoothing_n = parse_list(key, value)?,
            "trials" => self.trials = parse(key, value)?,
            "probe_size" => self.probe_size = parse(key, value)?,
            "gradcheck_seeds" => self.gradcheck_seeds = parse(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    /// Encoder shape for `attention`, with the input alphabet fixed by the task.
    pub fn encoder(&self, attention: AttentionKind) -> EncoderConfig {
        let (vocab, n_classes) = match self.task {
            Task::Majority => (self.vocab, self.n_classes),
            Task::ListOps => (listops::VOCAB, listops::CLASSES),
            Task::Idx => (256, 10),
        };
        EncoderConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            head_dim: self.head_dim,
            ffn_mult: self.ffn_mult,
            vocab,
            seq_len: self.seq_len,
            n_classes,
            attention,
            strategy: self.strategy,
            output_projection: self.output_projection,
            positional_encoding: self.positional_encoding,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            clip_norm: self.clip_norm,
            target_test_acc: self.target_test_acc,
        }
    }

    fn check_required(&self) -> Result<()> {
        if self.task == Task::Idx && matches!(self.command, Command::Train | Command::Spectrum) {
            for (key, value) in [
                ("idx_images", &self.idx_images),
                ("idx_labels", &self.idx_labels),
                ("idx_test_images", &self.idx_test_images),
                ("idx_test_labels", &self.idx_test_labels),
            ] {
                if value.is_none() {
                    return Err(Error::Config(format!("task=idx requires key `{key}`")));
                }
            }
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn bad_variant(key: &str, value: &str, valid: &[&str]) -> Error {
    Error::Config(format!(
        "unknown {key} `{value}`; expected one of: {}",
        valid.join(", ")
    ))
}

fn unknown_key(key: &str) -> Error {
    let closest = KEYS
        .iter()
        .min_by_key(|k| strsim::levenshtein(key, k))
        .copied()
        .unwrap_or_default();
    Error::Config(format!(
        "unknown key `{key}` (did you mean `{closest}`?); valid keys: {}",
        KEYS.join(", ")
    ))
}

/// `key=value` pairs of a flat config text, in order of appearance.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default();
        // Glue `key = value` into `key=value` so pairs split on whitespace.
        let mut glued = String::with_capacity(line.len());
        for part in line.split('=') {
            if !glued.is_empty() {
                glued = glued.trim_end().to_string();
                glued.push('=');
                glued.push_str(part.trim_start());
            } else {
                glued.push_str(part);
            }
        }
        for token in glued.split_whitespace() {
            match token.split_once('=') {
                Some((k, v)) if !k.is_empty() && !v.is_empty() => {
                    pairs.push((k.to_string(), v.to_string()))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: expected key = value, got `{token}`",
                        lineno + 1
                    )))
                }
            }
        }
    }
    Ok(pairs)
}

/// Build a [`RunConfig`] from `args` (without the program name).
pub fn parse_args(args: &[String]) -> Result<RunConfig> {
    let Some(name) = args.first() else {
        return Err(Error::Config("missing command".into()));
    };
    let command =
        Command::parse(name).ok_or_else(|| Error::Config(format!("unknown command `{name}`")))?;
    let mut config_file = None;
    let mut flags = Vec::new();
    let mut rest = args[1..].iter();
    while let Some(arg) = rest.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument `{arg}`")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = rest
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if key == "config" {
            config_file = Some(PathBuf::from(value));
        } else {
            flags.push((key, value));
        }
    }
    let mut config = RunConfig::new(command);
    if let Some(path) = config_file {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for (k, v) in parse_config_text(&text)? {
            config.set(&k, &v)?;
        }
    }
    for (k, v) in flags {
        config.set(&k, &v)?;
    }
    config.check_required()?;
    Ok(config)
}

/// Write `contents` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(contents.as_bytes())
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn datasets(cfg: &RunConfig) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>)> {
    let tokens = cfg.seq_len.saturating_sub(1);
    let test_seed = cfg.seed ^ 0x7e57_7e57_7e57_7e57;
    match cfg.task {
        Task::Majority => Ok((
            gen_multiset_majority(cfg.seed, cfg.train_samples, tokens, cfg.vocab, cfg.n_classes)?,
            gen_multiset_majority(test_seed, cfg.test_samples, tokens, cfg.vocab, cfg.n_classes)?,
        )),
        Task::ListOps => Ok((
            gen_listops_lite(cfg.seed, cfg.train_samples, cfg.listops_depth, tokens)?,
            gen_listops_lite(test_seed, cfg.test_samples, cfg.listops_depth, tokens)?,
        )),
        Task::Idx => {
            let path = |p: &Option<PathBuf>| p.clone().unwrap_or_default();
            let train = load_idx(
                &path(&cfg.idx_images),
                &path(&cfg.idx_labels),
                Some(cfg.train_samples),
            )?;
            let test = load_idx(
                &path(&cfg.idx_test_images),
                &path(&cfg.idx_test_labels),
                Some(cfg.test_samples),
            )?;
            if let Some(s) = train.first() {
                if s.tokens.len() + 1 != cfg.seq_len {
                    return Err(Error::Config(format!(
                        "images flatten to {} pixels; set seq_len = {}",
                        s.tokens.len(),
                        s.tokens.len() + 1
                    )));
                }
            }
            Ok((train, test))
        }
    }
}

fn train_model(
    cfg: &RunConfig,
    attention: AttentionKind,
    train: &[LabeledSequence],
    test: &[LabeledSequence],
) -> Result<(EncoderConfig, EncoderParams<Tensor>, TrainLog)> {
    let enc = cfg.encoder(attention);
    let mut rng = Rng::new(cfg.seed).split(1);
    let mut params = EncoderParams::init(&enc, &mut rng)?;
    let log = train_loop(&enc, &mut params, &cfg.train_config(), train, Some(test))?;
    Ok((enc, params, log))
}

pub fn training_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,loss,train_acc,test_acc,seconds\n");
    for e in &log.epochs {
        let test = e.test_acc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{:.6}", e.epoch, e.loss, e.train_acc, test, e.seconds);
    }
    s
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("mechanism,N,fwd_s,fwdbwd_s,peak_bytes\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{:.6e},{:.6e},{}",
            r.mechanism.tag(),
            r.n,
            r.fwd_s,
            r.fwdbwd_s,
            r.peak_bytes
        );
    }
    s
}

pub fn smoothing_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("N,mean_std\n");
    for (n, std) in curve {
        let _ = writeln!(s, "{n},{std}");
    }
    s
}

pub fn spectrum_csv(report: &SpectrumReport) -> String {
    let mut s = String::from("index,sigma\n");
    for (i, v) in report.values.iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s
}

pub fn spectrum_file_name(report: &SpectrumReport) -> String {
    format!("spectrum_{}_{}.csv", report.mechanism.tag(), report.layer)
}

/// Run one command. Returns the process exit code.
pub fn dispatch(cfg: &RunConfig) -> Result<i32> {
    match cfg.command {
        Command::Train => {
            let (train, test) = datasets(cfg)?;
            let (_, _, log) = train_model(cfg, cfg.attention, &train, &test)?;
            for e in &log.epochs {
                println!(
                    "epoch {:>3}  loss {:.4}  train {:.3}  test {:.3}  {:.2}s",
                    e.epoch,
                    e.loss,
                    e.train_acc,
                    e.test_acc.unwrap_or(f64::NAN),
                    e.seconds
                );
            }
            write_atomic(&cfg.out_dir.join("training_log.csv"), &training_csv(&log))?;
        }
        Command::Bench => {
            let records = bench_attention(
                &cfg.bench_n,
                cfg.bench_d,
                cfg.bench_heads,
                cfg.bench_head_dim,
                cfg.repeats,
                cfg.seed,
            )?;
            for r in &records {
                println!(
                    "{:<9} N={:<6} fwd {:.3e}s  fwd+bwd {:.3e}s  peak {} B",
                    r.mechanism.tag(),
                    r.n,
                    r.fwd_s,
                    r.fwdbwd_s,
                    r.peak_bytes
                );
            }
            write_atomic(&cfg.out_dir.join("bench.csv"), &bench_csv(&records))?;
        }
        Command::Smoothing => {
            let curve = softmax_std_curve(&cfg.smoothing_n, cfg.trials, cfg.seed)?;
            for (n, std) in &curve {
                println!("N={n:<8} mean std {std:.6e}");
            }
            write_atomic(&cfg.out_dir.join("smoothing.csv"), &smoothing_csv(&curve))?;
        }
        Command::Spectrum => {
            let (train, test) = datasets(cfg)?;
            let (soft_cfg, soft, _) = train_model(cfg, AttentionKind::SoftmaxMha, &train, &test)?;
            let (sort_cfg, sort, _) = train_model(cfg, AttentionKind::SliceSort, &train, &test)?;
            let probe = &test[..cfg.probe_size.min(test.len())];
            let reports = spectrum_experiment(&[(&soft_cfg, &soft), (&sort_cfg, &sort)], probe)?;
            for r in &reports {
                write_atomic(&cfg.out_dir.join(spectrum_file_name(r)), &spectrum_csv(r))?;
            }
            let last = |kind| {
                reports
                    .iter()
                    .filter(|r| r.mechanism == kind)
                    .last()
                    .map(SpectrumReport::area)
                    .unwrap_or(0.0)
            };
            let (a_sort, a_soft) = (last(AttentionKind::SliceSort), last(AttentionKind::SoftmaxMha));
            println!(
                "final-layer normalized spectrum area: slicesort {a_sort:.4}, softmax {a_soft:.4} \
                 (slower decay for slicesort: {})",
                a_sort >= a_soft
            );
        }
        Command::GradCheck => {
            let results = run_suite(cfg.gradcheck_seeds)?;
            println!(
                "{:<28} {:>12} {:>10} {:>8} {:>8} {:>8} {:>7}",
                "op", "max_rel_err", "tolerance", "checked", "at_res", "skipped", "result"
            );
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                println!(
                    "{:<28} {:>12.3e} {:>10.0e} {:>8} {:>8} {:>8} {:>7}",
                    r.name,
                    r.report.max_rel_err,
                    r.tolerance,
                    r.report.checked,
                    r.report.at_resolution,
                    r.report.skipped,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parse, dispatch and map errors to exit codes.
pub fn run(args: &[String]) -> i32 {
    let cfg = match parse_args(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}\n\n{USAGE}");
            return EXIT_USAGE;
        }
    };
    match dispatch(&cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
