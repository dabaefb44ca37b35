//! The `kcode` command-line driver.
//!
//! Every subcommand takes `--config`, `--seed` and `--out`. `--out` names a
//! directory that receives the artifacts and a `result.json` document
//! holding the resolved config, the SHA-256 of every input file, traces and
//! metrics. Set `KCODE_THREADS` to bound the worker threads.

pub mod config;
pub mod io;
pub mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::{json, Map, Value};

use crate::classify::{evaluate, nn_classify, residual_classify};
use crate::coders::encode_batch;
use crate::dictlearn::{fit_alternating_gram, fit_per_class, init_dictionary, DualDictionary};
use crate::kernellearn::{eval_ratio, fit_kernel, KernelTarget};
use crate::kernels::{gram_matrix, gram_self, KernelSpec, Samples};
use crate::supervised::{fit_supervised, predict, ClassifierKind, SupervisedOptions};

use config::{Config, DictMode};
use io::{
    format_labels, format_model, read_labels, read_matrix, read_model, samples_from_matrix, samples_to_matrix,
    sha256_hex, write_atomic, write_matrix,
};
use pipeline::{load_dataset, mkl_bases, run_pipeline, InputHashes};

/// Environment variable bounding the number of worker threads.
pub const THREADS_ENV: &str = "KCODE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "kcode", version, about = "Kernel coding: encode, learn and classify in feature space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DictArgs {
    /// Training samples the dictionary coefficients refer to.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Dictionary coefficients over the training samples (M x N).
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Explicit atoms, one per column (instead of --dict).
    #[arg(long, conflicts_with = "dict")]
    atoms: Option<PathBuf>,
    /// Class label of each atom.
    #[arg(long)]
    atom_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Residual,
    Nn,
    Model,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labelled data set (x.mat, labels.txt).
    Gen,
    /// Kernel matrix between two sample sets (gram.mat).
    Gram {
        #[arg(long)]
        x: PathBuf,
        /// Second set; defaults to --x.
        #[arg(long)]
        y: Option<PathBuf>,
    },
    /// Encode samples over a dictionary (codes.mat).
    Encode {
        #[arg(long)]
        x: PathBuf,
        #[command(flatten)]
        dict: DictArgs,
    },
    /// Learn a dictionary by alternating coding and closed-form updates.
    LearnDict {
        #[arg(long)]
        x: PathBuf,
        /// Required for per-class dictionaries.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Learn the kernel parameter, or the weights when the kernel is a
    /// combination, for a fixed dictionary.
    LearnKernel {
        #[command(flatten)]
        dict: DictArgs,
    },
    /// Learn simplex weights over the members of a combination kernel.
    LearnMkl {
        #[command(flatten)]
        dict: DictArgs,
    },
    /// Learn dictionary, codes and classifier jointly.
    TrainSupervised {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Label samples (predictions.txt).
    Classify {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        x: PathBuf,
        #[command(flatten)]
        dict: DictArgs,
        /// Labels of the training samples (nn).
        #[arg(long)]
        train_labels: Option<PathBuf>,
        /// Supervised model file (model).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Accuracy, per-class accuracy and confusion matrix.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Config-driven end-to-end experiment.
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Gram { .. } => "gram",
            Command::Encode { .. } => "encode",
            Command::LearnDict { .. } => "learn-dict",
            Command::LearnKernel { .. } => "learn-kernel",
            Command::LearnMkl { .. } => "learn-mkl",
            Command::TrainSupervised { .. } => "train-supervised",
            Command::Classify { .. } => "classify",
            Command::Eval { .. } => "eval",
            Command::Pipeline => "pipeline",
        }
    }
}

/// Runs the driver and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        // Fails harmlessly when the pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Inputs, config and output location shared by all subcommands.
struct Run {
    cfg: Config,
    base: PathBuf,
    out: PathBuf,
    inputs: InputHashes,
}

impl Run {
    fn hash(&mut self, role: &str, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(role.into(), sha256_hex(&bytes));
        Ok(())
    }

    fn matrix(&mut self, role: &str, path: &Path) -> anyhow::Result<DMatrix<f64>> {
        self.hash(role, path)?;
        read_matrix(path)
    }

    fn samples(&mut self, role: &str, path: &Path) -> anyhow::Result<Samples> {
        let m = self.matrix(role, path)?;
        samples_from_matrix(m, self.cfg.spd_data).with_context(|| format!("reading samples from {}", path.display()))
    }

    fn labels(&mut self, role: &str, path: &Path) -> anyhow::Result<Vec<usize>> {
        self.hash(role, path)?;
        read_labels(path)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_matrix(&self, name: &str, m: &DMatrix<f64>) -> anyhow::Result<()> {
        write_matrix(&self.path(name), m, self.cfg.format)
    }

    fn write_text(&self, name: &str, text: &str) -> anyhow::Result<()> {
        write_atomic(&self.path(name), text)
    }

    /// Loads the dictionary and, for a dual one, its training samples.
    fn dictionary(&mut self, args: &DictArgs) -> anyhow::Result<(DualDictionary, Option<Samples>)> {
        let train = match &args.train {
            Some(p) => Some(self.samples("train", p)?),
            None => None,
        };
        let mut dict = if let Some(p) = &args.atoms {
            DualDictionary::explicit(self.samples("atoms", p)?)
        } else if let Some(p) = &args.dict {
            let a = self.matrix("dict", p)?;
            let t = train.as_ref().ok_or_else(|| anyhow!("--dict needs --train, the samples its coefficients refer to"))?;
            if a.nrows() != t.len() {
                bail!("{} has {} rows but there are {} training samples", p.display(), a.nrows(), t.len());
            }
            DualDictionary::dual(a)
        } else {
            bail!("a dictionary is required: pass --dict with --train, or --atoms");
        };
        if let Some(p) = &args.atom_labels {
            let labels = self.labels("atom_labels", p)?;
            dict = dict.with_labels(labels)?;
        }
        Ok((dict, train))
    }

    fn finish(self, command: &str, sections: Value) -> anyhow::Result<()> {
        let doc = result_document(command, &self.cfg, &self.inputs, sections);
        self.write_text("result.json", &(serde_json::to_string_pretty(&doc)? + "\n"))
    }
}

/// The result document: command, timestamp, resolved config, input hashes
/// and the command's own sections.
pub fn result_document(command: &str, cfg: &Config, inputs: &InputHashes, sections: Value) -> Value {
    let generated_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut doc = Map::new();
    doc.insert("command".into(), json!(command));
    doc.insert("generated_at".into(), json!(generated_at));
    let config: Map<String, Value> = cfg.entries().into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    doc.insert("config".into(), Value::Object(config));
    doc.insert("inputs".into(), json!(inputs));
    if let Value::Object(extra) = sections {
        for (k, v) in extra {
            if k != "command" && k != "inputs" {
                doc.insert(k, v);
            }
        }
    }
    Value::Object(doc)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut inputs = InputHashes::new();
    let (mut cfg, base) = match &cli.config {
        Some(p) => {
            let text = io::read_text(p)?;
            inputs.insert("config".into(), sha256_hex(text.as_bytes()));
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (Config::parse(&text, &p.display().to_string())?, base)
        }
        None => (Config::default(), PathBuf::new()),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().ok_or_else(|| anyhow!("--out <DIR> is required"))?;
    let mut run = Run { cfg, base, out, inputs };
    let name = cli.command.name();
    let sections = match cli.command {
        Command::Gen => gen(&mut run)?,
        Command::Gram { x, y } => gram(&mut run, &x, y.as_deref())?,
        Command::Encode { x, dict } => encode(&mut run, &x, &dict)?,
        Command::LearnDict { x, labels } => learn_dict(&mut run, &x, labels.as_deref())?,
        Command::LearnKernel { dict } => learn_kernel(&mut run, &dict, false)?,
        Command::LearnMkl { dict } => learn_kernel(&mut run, &dict, true)?,
        Command::TrainSupervised { x, labels } => train_supervised(&mut run, &x, &labels)?,
        Command::Classify { method, x, dict, train_labels, model } => {
            classify(&mut run, method, &x, &dict, train_labels.as_deref(), model.as_deref())?
        }
        Command::Eval { predictions, labels } => eval(&mut run, &predictions, &labels)?,
        Command::Pipeline => pipeline_command(&mut run)?,
    };
    run.finish(name, sections).with_context(|| format!("{name}: writing results"))
}

fn gen(run: &mut Run) -> anyhow::Result<Value> {
    let data = load_dataset(&run.cfg, &run.base, &mut run.inputs)?;
    run.write_matrix("x.mat", &samples_to_matrix(&data.samples))?;
    run.write_text("labels.txt", &format_labels(&data.labels))?;
    let spd = matches!(data.samples, Samples::Spd(_));
    Ok(json!({ "samples": data.labels.len(), "classes": data.classes(), "spd": spd }))
}

fn gram(run: &mut Run, x: &Path, y: Option<&Path>) -> anyhow::Result<Value> {
    let a = run.samples("x", x)?;
    let k = match y {
        Some(p) => {
            let b = run.samples("y", p)?;
            gram_matrix(&run.cfg.kernel, &a, &b)
        }
        None => gram_self(&run.cfg.kernel, &a),
    }
    .context("computing the kernel matrix")?;
    run.write_matrix("gram.mat", &k)?;
    Ok(json!({ "rows": k.nrows(), "cols": k.ncols() }))
}

fn encode(run: &mut Run, x: &Path, args: &DictArgs) -> anyhow::Result<Value> {
    let queries = run.samples("x", x)?;
    let (dict, train) = run.dictionary(args)?;
    let spec = run.cfg.kernel.clone();
    let bundle = dict.bundle(&spec, train.as_ref().unwrap_or(&queries), &queries)?;
    let codes = encode_batch(&bundle, &run.cfg.coding(), run.cfg.scheme).context("encoding")?;
    run.write_matrix("codes.mat", &codes.y)?;
    let objective = crate::dictlearn::mean_objective(&bundle, &codes.y, run.cfg.scheme, &run.cfg.coding());
    Ok(json!({ "atoms": dict.len(), "samples": queries.len(), "mean_objective": objective }))
}

fn learn_dict(run: &mut Run, x: &Path, labels: Option<&Path>) -> anyhow::Result<Value> {
    let samples = run.samples("x", x)?;
    let cfg = run.cfg.clone();
    let k = gram_self(&cfg.kernel, &samples)?;
    let params = cfg.coding();
    let (dict, reports, trace) = match cfg.dict_mode {
        DictMode::PerClass => {
            let p = labels.ok_or_else(|| anyhow!("per-class dictionaries need --labels (or set dict_mode = shared)"))?;
            let labels = run.labels("labels", p)?;
            if labels.len() != samples.len() {
                bail!("{} labels for {} samples", labels.len(), samples.len());
            }
            let (dict, reports) = fit_per_class(&k, &labels, cfg.scheme, &params, &cfg.fit_options()).context("learning the dictionary")?;
            (dict, reports, None)
        }
        DictMode::Shared => {
            let a0 = init_dictionary(samples.len(), cfg.atoms, cfg.seed)?.coefficients().expect("dual").clone();
            let (a, codes, report) = fit_alternating_gram(&k, a0, cfg.scheme, &params, &cfg.fit_options()).context("learning the dictionary")?;
            let trace = report.objective_trace.clone();
            run.write_matrix("codes.mat", &codes.y)?;
            (DualDictionary::dual(a), vec![report], Some(trace))
        }
    };
    run.write_matrix("dictionary.mat", dict.coefficients().expect("dual"))?;
    if let Some(l) = &dict.atom_labels {
        run.write_text("atom_labels.txt", &format_labels(l))?;
    }
    Ok(json!({ "atoms": dict.len(), "reports": reports, "objective_trace": trace }))
}

fn learn_kernel(run: &mut Run, args: &DictArgs, force_mkl: bool) -> anyhow::Result<Value> {
    let (dict, train) = run.dictionary(args)?;
    let train = train.ok_or_else(|| anyhow!("kernel learning needs --train, the samples to encode"))?;
    let cfg = run.cfg.clone();
    let target = match (&cfg.kernel, force_mkl) {
        (KernelSpec::Base(_), false) => KernelTarget::Beta(cfg.kernel.clone()),
        _ => KernelTarget::Weights(mkl_bases(&cfg.kernel)?),
    };
    let params = cfg.coding();
    let (spec, rounds) =
        fit_kernel(&target, &dict, &train, cfg.scheme, &params, cfg.kernel_rounds.max(1), &cfg.descent()).context("learning the kernel")?;
    let codes = encode_batch(&dict.bundle(&spec, &train, &train)?, &params, cfg.scheme)?;
    let ratio = eval_ratio(&spec, &dict, &train, &crate::dictlearn::masked_codes(&codes)?)?;
    run.write_matrix("codes.mat", &codes.y)?;
    run.write_text("kernel.txt", &format!("kernel = {spec}\n"))?;
    let weights = match (&target, &spec) {
        (KernelTarget::Weights(_), KernelSpec::Combination(m)) => Some(m.iter().map(|(_, w)| *w).collect::<Vec<_>>()),
        _ => None,
    };
    Ok(json!({ "kernel": spec.to_string(), "weights": weights, "rounds": rounds, "ratio": ratio }))
}

fn train_supervised(run: &mut Run, x: &Path, labels: &Path) -> anyhow::Result<Value> {
    let samples = run.samples("x", x)?;
    let labels = run.labels("labels", labels)?;
    let cfg = run.cfg.clone();
    let kind = match cfg.classifier {
        config::ClassifierChoice::Bilinear => ClassifierKind::Bilinear,
        config::ClassifierChoice::Linear => ClassifierKind::Linear,
        _ => bail!("train-supervised needs classifier = linear or bilinear"),
    };
    let opts = SupervisedOptions {
        kind,
        eta: cfg.eta,
        rho: cfg.rho,
        atoms: cfg.atoms,
        max_iter: cfg.max_iter,
        tol: cfg.tol,
        seed: cfg.seed,
        bilinear_cap: cfg.bilinear_cap,
    };
    let (dict, model, codes, report) =
        fit_supervised(&samples, &labels, &cfg.kernel, cfg.scheme, &cfg.coding(), &opts).context("supervised learning")?;
    let kappa = gram_self(&cfg.kernel, &samples)?;
    let predictions = (0..labels.len())
        .map(|i| predict(&model, &codes.y.column(i).into_owned(), Some(&kappa.column(i).into_owned())))
        .collect::<crate::Result<Vec<_>>>()?;
    let metrics = evaluate(&predictions, &labels)?;
    run.write_matrix("dictionary.mat", dict.coefficients().expect("dual"))?;
    run.write_matrix("codes.mat", &codes.y)?;
    run.write_text("model.txt", &format_model(&model, cfg.format))?;
    Ok(json!({ "report": report, "objective_trace": report.objective_trace, "training_metrics": metrics }))
}

fn classify(
    run: &mut Run,
    method: Method,
    x: &Path,
    args: &DictArgs,
    train_labels: Option<&Path>,
    model: Option<&Path>,
) -> anyhow::Result<Value> {
    let queries = run.samples("x", x)?;
    let (dict, train) = run.dictionary(args)?;
    let spec = run.cfg.kernel.clone();
    let params = run.cfg.coding();
    let scheme = run.cfg.scheme;
    let bundle = dict.bundle(&spec, train.as_ref().unwrap_or(&queries), &queries)?;
    let codes = encode_batch(&bundle, &params, scheme).context("encoding")?;
    let column = |i: usize| codes.y.column(i).into_owned();
    let predictions: Vec<usize> = match method {
        Method::Residual => {
            let labels = dict.atom_labels.clone().ok_or_else(|| anyhow!("residual classification needs --atom-labels"))?;
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            (0..queries.len())
                .map(|i| Ok(residual_classify(&bundle.query(i), &column(i), &labels, classes)?.0))
                .collect::<crate::Result<_>>()?
        }
        Method::Nn => {
            let p = train_labels.ok_or_else(|| anyhow!("nn classification needs --train-labels"))?;
            let labels = run.labels("train_labels", p)?;
            let train = train.as_ref().ok_or_else(|| anyhow!("nn classification needs --train"))?;
            let train_codes = encode_batch(&dict.bundle(&spec, train, train)?, &params, scheme).context("encoding the training set")?;
            (0..queries.len()).map(|i| nn_classify(&train_codes.y, &labels, &column(i))).collect::<crate::Result<_>>()?
        }
        Method::Model => {
            let p = model.ok_or_else(|| anyhow!("model classification needs --model"))?;
            run.hash("model", p)?;
            let m = read_model(p)?;
            let kappa = match &m.classifier {
                crate::supervised::Classifier::Bilinear(_) => {
                    let train = train.as_ref().ok_or_else(|| anyhow!("the bilinear classifier needs --train"))?;
                    Some(gram_matrix(&spec, train, &queries)?)
                }
                _ => None,
            };
            (0..queries.len())
                .map(|i| predict(&m, &column(i), kappa.as_ref().map(|k| k.column(i).into_owned()).as_ref()))
                .collect::<crate::Result<_>>()?
        }
    };
    run.write_text("predictions.txt", &format_labels(&predictions))?;
    Ok(json!({ "samples": predictions.len() }))
}

fn eval(run: &mut Run, predictions: &Path, labels: &Path) -> anyhow::Result<Value> {
    let p = run.labels("predictions", predictions)?;
    let l = run.labels("labels", labels)?;
    let metrics = evaluate(&p, &l)?;
    Ok(json!({ "metrics": metrics }))
}

fn pipeline_command(run: &mut Run) -> anyhow::Result<Value> {
    let out = run_pipeline(&run.cfg, &run.base, run.inputs.clone())?;
    run.write_matrix("dictionary.mat", out.dictionary.coefficients().expect("dual"))?;
    if let Some(l) = &out.dictionary.atom_labels {
        run.write_text("atom_labels.txt", &format_labels(l))?;
    }
    if let Some(m) = &out.model {
        run.write_text("model.txt", &format_model(m, run.cfg.format))?;
    }
    run.write_text("train_indices.txt", &format_labels(&out.train_indices))?;
    run.write_text("predictions.txt", &format_labels(&out.predictions))?;
    run.write_text("config.txt", &run.cfg.render())?;
    Ok(out.document)
}
