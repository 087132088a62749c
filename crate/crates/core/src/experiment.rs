//! Config-driven experiment runs, kernel verification and inference timing.
//!
//! A run writes `<outdir>/<mode>/<seed>/{metrics.jsonl, model.ckpt,
//! reliability.csv}`, `<outdir>/summary.json` and `<outdir>/config.json`.
//! Everything except bench timings is a pure function of the config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::{
    kernel_decomposed_attention, kernel_propagation_attention, prefix_propagation_attention, Alpha,
    AttentionConfig, AttentionMask, LayerWeights, Window,
};
use crate::calibration::{collect_predictions, ece, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig, TuningMode};
use crate::rng::SplitMix64;
use crate::tasks::{
    gen_majority_split, gen_needle_split, load_labeled_text, Dataset, Split, SyntheticTask, Tokenizer,
};
use crate::training::{evaluate, train, warm_backbone, EvalMetrics, TrainConfig, WarmConfig};
use crate::Tensor;

pub const SEED_ENV: &str = "PREFIXPROP_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Needle,
    Majority,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub generator: Generator,
    pub seq_len: usize,
    pub n_classes: usize,
    /// Needle distance from `[CLS]`; defaults to `seq_len / 4`.
    pub min_offset: Option<usize>,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub vocab_path: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            generator: Generator::Needle,
            seq_len: 256,
            n_classes: 4,
            min_offset: None,
            n_train: 2000,
            n_dev: 400,
            n_test: 400,
            seed: 0,
            train_path: None,
            dev_path: None,
            test_path: None,
            vocab_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl TaskConfig {
    pub fn synthetic(&self, vocab_size: usize) -> SyntheticTask {
        SyntheticTask {
            vocab_size,
            min_offset: self.min_offset.unwrap_or(self.seq_len / 4),
            ..SyntheticTask::new(self.seq_len, self.n_classes)
        }
    }

    pub fn split(&self, split: Split, vocab_size: usize, max_len: usize) -> Result<Dataset> {
        let task = self.synthetic(vocab_size);
        let n = match split {
            Split::Train => self.n_train,
            Split::Dev => self.n_dev,
            Split::Test => self.n_test,
        };
        match self.generator {
            Generator::Needle => gen_needle_split(&task, n, self.seed, split),
            Generator::Majority => gen_majority_split(&task, n, self.seed, split),
            Generator::Csv => {
                let (train_path, vocab) = (self.path("train_path")?, self.path("vocab_path")?);
                let tok = Tokenizer::from_file(vocab, max_len)?;
                let train = load_labeled_text(train_path, &tok, None, Split::Train)?;
                if split == Split::Train {
                    return Ok(train);
                }
                let field = if split == Split::Dev { "dev_path" } else { "test_path" };
                load_labeled_text(self.path(field)?, &tok, Some(&train.label_names), split)
            }
        }
    }

    pub fn load(&self, vocab_size: usize, max_len: usize) -> Result<Splits> {
        Ok(Splits {
            train: self.split(Split::Train, vocab_size, max_len)?,
            dev: self.split(Split::Dev, vocab_size, max_len)?,
            test: self.split(Split::Test, vocab_size, max_len)?,
        })
    }

    fn path(&self, field: &str) -> Result<&Path> {
        let p = match field {
            "train_path" => &self.train_path,
            "dev_path" => &self.dev_path,
            "test_path" => &self.test_path,
            _ => &self.vocab_path,
        };
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("task.{field}: required for the csv generator")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub modes: Vec<TuningMode>,
    pub train: TrainConfig,
    /// Backbone warm phase; `None` keeps the seeded random backbone.
    pub warm: Option<WarmConfig>,
    pub seeds: Vec<u64>,
    pub outdir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            model: ModelConfig {
                d_model: 32,
                n_heads: 2,
                n_layers: 1,
                d_ff: 64,
                max_len: 256,
                window: Window::Size(32),
                prefix_len: 8,
                n_classes: 4,
                ..ModelConfig::default()
            },
            modes: vec![TuningMode::PrefixTuning, TuningMode::PrefixPropagation],
            train: TrainConfig {
                epochs: 15,
                lr: Some(1e-2),
                ..TrainConfig::default()
            },
            warm: Some(WarmConfig::default()),
            seeds: vec![0, 1, 2, 3, 4],
            outdir: PathBuf::from("runs"),
        }
    }
}

/// Sets `a.b.c` in a JSON object tree. The value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!("{}: not an object", parts[..i].join("."))));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one segment")
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Merges a JSON config over the defaults (so partial sections keep the
    /// remaining default fields), applies
    /// `key=value` overrides, and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        if !text.trim().is_empty() {
            let file: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
            merge(&mut root, file);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(root).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, overrides)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let t = &self.task;
        if self.modes.is_empty() {
            return Err(Error::Config("modes: at least one tuning mode is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if t.generator != Generator::Csv {
            if t.n_classes != self.model.n_classes {
                return Err(Error::Config(format!(
                    "task.n_classes: {} differs from model.n_classes {}",
                    t.n_classes, self.model.n_classes
                )));
            }
            if t.seq_len > self.model.max_len {
                return Err(Error::Config(format!(
                    "task.seq_len: {} exceeds model.max_len {}",
                    t.seq_len, self.model.max_len
                )));
            }
            if t.n_train == 0 || t.n_dev == 0 || t.n_test == 0 {
                return Err(Error::Config("task.n_train: every split needs at least one example".into()));
            }
        }
        if let Some(w) = &self.warm {
            if w.seq_len > self.model.max_len {
                return Err(Error::Config(format!(
                    "warm.seq_len: {} exceeds model.max_len {}",
                    w.seq_len, self.model.max_len
                )));
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Splits> {
        let splits = self.task.load(self.model.vocab_size, self.model.max_len)?;
        if splits.train.n_classes != self.model.n_classes {
            return Err(Error::Config(format!(
                "model.n_classes: {} but the corpus has {} labels",
                self.model.n_classes, splits.train.n_classes
            )));
        }
        Ok(splits)
    }

    /// The frozen backbone shared by every mode and seed.
    pub fn backbone(&self) -> Result<EncoderModel> {
        match &self.warm {
            Some(w) => Ok(warm_backbone(&self.model, w)?.model),
            None => EncoderModel::new(self.model.clone(), TuningMode::FineTuning),
        }
    }

    /// Prefixes and head drawn from `seed`, backbone copied from `backbone`.
    pub fn build_model(&self, backbone: &EncoderModel, mode: TuningMode, seed: u64) -> Result<EncoderModel> {
        let mut model = EncoderModel::new(
            ModelConfig {
                seed,
                ..self.model.clone()
            },
            mode,
        )?;
        model.with_backbone(backbone)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub dev_metric: f64,
    pub test: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    pub prefix: usize,
    pub trainable_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: TuningMode,
    pub parameters: ParamSummary,
    pub runs: Vec<RunSummary>,
    pub mean: EvalMetrics,
    /// Sample standard deviation (zero for a single run).
    pub std: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Mean test accuracy, propagation minus tuning.
    pub accuracy_delta: f64,
    /// Mean test ECE, propagation minus tuning.
    pub ece_delta: f64,
    /// Seeds where propagation's test accuracy is at least tuning's.
    pub propagation_wins: usize,
    pub seeds: usize,
    /// Prefix parameters, propagation over tuning.
    pub prefix_param_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: crate::training::Metric,
    pub modes: Vec<ModeSummary>,
    pub comparison: Option<Comparison>,
}

fn aggregate(runs: &[RunSummary]) -> (EvalMetrics, EvalMetrics) {
    let fields = |m: &EvalMetrics| [m.accuracy, m.f1_micro, m.macro_precision, m.macro_recall, m.ece];
    let rows: Vec<[f64; 5]> = runs.iter().map(|r| fields(&r.test)).collect();
    let n = rows.len() as f64;
    let mut mean = [0.0; 5];
    let mut std = [0.0; 5];
    for k in 0..5 {
        mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        if rows.len() > 1 {
            std[k] = (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        }
    }
    let build = |a: [f64; 5]| EvalMetrics {
        accuracy: a[0],
        f1_micro: a[1],
        macro_precision: a[2],
        macro_recall: a[3],
        ece: a[4],
    };
    (build(mean), build(std))
}

fn compare(modes: &[ModeSummary]) -> Option<Comparison> {
    let find = |m: TuningMode| modes.iter().find(|s| s.mode == m);
    let (tun, prop) = (find(TuningMode::PrefixTuning)?, find(TuningMode::PrefixPropagation)?);
    let wins = tun
        .runs
        .iter()
        .filter(|t| {
            prop.runs
                .iter()
                .find(|p| p.seed == t.seed)
                .is_some_and(|p| p.test.accuracy >= t.test.accuracy)
        })
        .count();
    Some(Comparison {
        accuracy_delta: prop.mean.accuracy - tun.mean.accuracy,
        ece_delta: prop.mean.ece - tun.mean.ece,
        propagation_wins: wins,
        seeds: tun.runs.len(),
        prefix_param_ratio: prop.parameters.prefix as f64 / tun.parameters.prefix as f64,
    })
}

pub fn run_dir(outdir: &Path, mode: TuningMode, seed: u64) -> PathBuf {
    outdir.join(mode.name()).join(seed.to_string())
}

/// Trains every (mode, seed) pair and writes all result files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let backbone = cfg.backbone()?;
    fs::create_dir_all(&cfg.outdir)?;
    fs::write(cfg.outdir.join("config.json"), cfg.to_json()?)?;

    let mut modes = Vec::new();
    for &mode in &cfg.modes {
        let mut runs = Vec::new();
        let mut parameters = None;
        for &seed in &cfg.seeds {
            let model = cfg.build_model(&backbone, mode, seed)?;
            let part = model.partition_parameters();
            parameters.get_or_insert(ParamSummary {
                trainable: part.trainable_count,
                frozen: part.frozen_count,
                total: part.total,
                prefix: part.prefix_count,
                trainable_fraction: part.trainable_fraction,
            });
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let result = train(model, &data.train, &data.dev, &tc)?;
            let test = evaluate(&result.model, &data.test)?;
            let report = ece(&collect_predictions(&result.model, &data.test)?, DEFAULT_BINS)?;

            let dir = run_dir(&cfg.outdir, mode, seed);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("metrics.jsonl"), result.log_jsonl()?)?;
            fs::write(dir.join("reliability.csv"), report.reliability_csv())?;
            result.model.save(dir.join("model.ckpt"))?;
            runs.push(RunSummary {
                seed,
                best_epoch: result.best_epoch,
                epochs_run: result.log.len(),
                dev_metric: result.best_dev_metric,
                test,
            });
        }
        let (mean, std) = aggregate(&runs);
        modes.push(ModeSummary {
            mode,
            parameters: parameters.expect("at least one seed"),
            runs,
            mean,
            std,
        });
    }
    let summary = Summary {
        metric: cfg.train.metric,
        comparison: compare(&modes),
        modes,
    };
    fs::write(
        cfg.outdir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

/// Plain-text table of a summary.
pub fn render_summary(s: &Summary) -> String {
    let mut out = format!(
        "{:<20} {:>5} {:>17} {:>17} {:>9} {:>9} {:>10} {:>10}\n",
        "mode", "runs", "accuracy", "ece", "macro_p", "macro_r", "trainable", "prefix"
    );
    for m in &s.modes {
        out.push_str(&format!(
            "{:<20} {:>5} {:>8.4}±{:<8.4} {:>8.4}±{:<8.4} {:>9.4} {:>9.4} {:>10} {:>10}\n",
            m.mode.name(),
            m.runs.len(),
            m.mean.accuracy,
            m.std.accuracy,
            m.mean.ece,
            m.std.ece,
            m.mean.macro_precision,
            m.mean.macro_recall,
            m.parameters.trainable,
            m.parameters.prefix,
        ));
    }
    if let Some(c) = &s.comparison {
        out.push_str(&format!(
            "propagation - tuning: accuracy {:+.4}, ece {:+.4}; propagation >= tuning on {}/{} seeds; prefix parameter ratio {}\n",
            c.accuracy_delta, c.ece_delta, c.propagation_wins, c.seeds, c.prefix_param_ratio
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTrial {
    pub prefix_len: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub trials: usize,
    pub tol: f64,
    pub max_error: f64,
    pub worst: Option<KernelTrial>,
    /// Largest difference between the kernel route and standard attention
    /// with no prefixes; both share one code path, so this is zero.
    pub empty_prefix_max_error: f64,
    pub passed: bool,
}

/// Checks the kernel decomposition against dense attention over `cat(P, C)`
/// on random configurations.
pub fn verify_kernel(trials: usize, seed: u64, tol: f64) -> Result<KernelReport> {
    if trials == 0 {
        return Err(Error::Config("verify_kernel: trials must be positive".into()));
    }
    let mut max_error: f64 = 0.0;
    let mut worst = None;
    let mut empty: f64 = 0.0;
    for t in 0..trials {
        let mut rng = SplitMix64::stream(seed, t as u64);
        let j = 1 + rng.below(4);
        let m = 2 + rng.below(15);
        let d = [4, 8, 16][rng.below(3)];
        let heads = 1 + rng.below(2);
        let cfg = AttentionConfig {
            d_model: d,
            n_heads: heads,
            prefix_len: j,
            window: Window::Full,
            global_positions: vec![0],
        };
        let w = LayerWeights::random(d, 2 * d, &mut rng);
        let p = random_matrix(j, d, &mut rng);
        let c = random_matrix(m, d, &mut rng);
        let d_in = Tensor::concat_rows(&[&p, &c])?;
        let dense = prefix_propagation_attention(&d_in, &w, &AttentionMask::full(j + m, j + m), &cfg)?;
        let kern = kernel_decomposed_attention(&d_in, &p, &c, &w, &cfg, Alpha::Exact)?;
        let err = kern.max_abs_diff(&dense);
        if err > max_error || worst.is_none() {
            max_error = max_error.max(err);
            worst = Some(KernelTrial {
                prefix_len: j,
                seq_len: m,
                d_model: d,
                n_heads: heads,
                max_error: err,
            });
        }

        let cfg0 = AttentionConfig { prefix_len: 0, ..cfg };
        let full = AttentionMask::full(m, m);
        let single = kernel_propagation_attention(&c, &w, Some(&full), &cfg0, Alpha::Exact)?;
        let standard = prefix_propagation_attention(&c, &w, &full, &cfg0)?;
        empty = empty.max(single.max_abs_diff(&standard));
    }
    Ok(KernelReport {
        trials,
        tol,
        max_error,
        worst,
        empty_prefix_max_error: empty,
        passed: max_error < tol && empty == 0.0,
    })
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("sized")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub mode: TuningMode,
    /// Seconds per pass over the input batch.
    pub samples: Vec<f64>,
    pub median: f64,
    /// Median absolute deviation from the median.
    pub mad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seq_len: usize,
    pub prefix_len: usize,
    pub n_inputs: usize,
    pub repeats: usize,
    pub modes: Vec<ModeTiming>,
    /// Median time, propagation over tuning.
    pub ratio: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Times evaluation-mode forward passes of the three modes on identical
/// random inputs. Modes are interleaved within each repeat so drift in
/// machine speed affects them alike.
pub fn bench_inference(model: &ModelConfig, seq_len: usize, n_inputs: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats < 5 {
        return Err(Error::Config(format!("bench: repeats {repeats} < 5")));
    }
    if seq_len == 0 || seq_len > model.max_len || n_inputs == 0 {
        return Err(Error::Config(format!(
            "bench: need 1 <= seq_len <= {} and n_inputs >= 1",
            model.max_len
        )));
    }
    let modes = [TuningMode::FineTuning, TuningMode::PrefixTuning, TuningMode::PrefixPropagation];
    let base = EncoderModel::new(model.clone(), TuningMode::FineTuning)?;
    let models: Vec<EncoderModel> = modes.iter().map(|&m| base.with_mode(m)).collect::<Result<_>>()?;
    let mut rng = SplitMix64::stream(seed, 7);
    let inputs: Vec<Vec<usize>> = (0..n_inputs)
        .map(|_| {
            std::iter::once(crate::model::CLS_ID)
                .chain((1..seq_len).map(|_| crate::model::FIRST_FREE_ID + rng.below(model.vocab_size - crate::model::FIRST_FREE_ID)))
                .collect()
        })
        .collect();
    for m in &models {
        m.forward_batch(&inputs)?;
    }
    let mut samples = vec![Vec::with_capacity(repeats); modes.len()];
    for _ in 0..repeats {
        for (k, m) in models.iter().enumerate() {
            let start = Instant::now();
            std::hint::black_box(m.forward_batch(&inputs)?);
            samples[k].push(start.elapsed().as_secs_f64());
        }
    }
    let timings: Vec<ModeTiming> = modes
        .iter()
        .zip(samples)
        .map(|(&mode, s)| {
            let med = median(&s);
            let dev: Vec<f64> = s.iter().map(|x| (x - med).abs()).collect();
            ModeTiming {
                mode,
                mad: median(&dev),
                median: med,
                samples: s,
            }
        })
        .collect();
    Ok(BenchReport {
        seq_len,
        prefix_len: model.prefix_len,
        n_inputs,
        repeats,
        ratio: timings[2].median / timings[1].median,
        modes: timings,
    })
}
