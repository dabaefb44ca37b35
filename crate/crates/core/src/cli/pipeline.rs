//! Config-driven end-to-end runs: data, split, kernel, dictionary, codes,
//! labels and metrics.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::classify::{evaluate, nn_classify, residual_classify, Metrics};
use crate::coders::encode_batch;
use crate::dictlearn::{fit_alternating_gram, fit_per_class, init_dictionary, DualDictionary, FitReport};
use crate::kernellearn::{fit_kernel, KernelRound, KernelTarget};
use crate::kernels::{gram_matrix, gram_self, BaseKernel, KernelSpec};
use crate::supervised::{fit_supervised, predict, ClassifierKind, SupervisedModel, SupervisedOptions};
use crate::synth::{gen_blobs, gen_circles, gen_spd_classes, gen_xor, split_indices, LabeledSamples};

use super::config::{ClassifierChoice, Config, DataSource, DictMode, KernelLearning};
use super::io::{read_labels, read_matrix, samples_from_matrix, sha256_hex};

/// Content hashes of input files, keyed by role.
pub type InputHashes = BTreeMap<String, String>;

/// Generates or loads the labelled data set a config describes. Relative
/// file paths are taken from `base`.
pub fn load_dataset(cfg: &Config, base: &Path, inputs: &mut InputHashes) -> anyhow::Result<LabeledSamples> {
    let n = cfg.samples_per_class;
    let data = match cfg.data {
        DataSource::Circles => gen_circles(n, &cfg.radii, cfg.noise, cfg.seed)?,
        DataSource::Xor => gen_xor(n, cfg.xor_offset, cfg.xor_spread, cfg.seed)?,
        DataSource::Blobs => {
            let centers: Vec<_> = cfg.blob_centers.iter().map(|c| nalgebra::DVector::from_vec(c.clone())).collect();
            let d = centers.first().map_or(0, |c| c.len());
            if centers.iter().any(|c| c.len() != d) {
                bail!("blob_centers must all have the same dimension");
            }
            let cov = DMatrix::identity(d, d) * cfg.blob_spread.powi(2);
            gen_blobs(n, &centers, &vec![cov; centers.len()], cfg.seed)?
        }
        DataSource::Spd => gen_spd_classes(n, cfg.spd_dim, &cfg.spd_anisotropy, cfg.seed)?,
        DataSource::File => {
            if cfg.data_file.is_empty() || cfg.labels_file.is_empty() {
                bail!("data = file needs data_file and labels_file");
            }
            let xp = base.join(&cfg.data_file);
            let lp = base.join(&cfg.labels_file);
            inputs.insert("data_file".into(), sha256_hex(&std::fs::read(&xp).with_context(|| format!("reading {}", xp.display()))?));
            inputs.insert("labels_file".into(), sha256_hex(&std::fs::read(&lp).with_context(|| format!("reading {}", lp.display()))?));
            let samples = samples_from_matrix(read_matrix(&xp)?, cfg.spd_data)?;
            let labels = read_labels(&lp)?;
            if labels.len() != samples.len() {
                bail!("{} has {} labels for {} samples", lp.display(), labels.len(), samples.len());
            }
            LabeledSamples { samples, labels }
        }
    };
    Ok(data)
}

/// Base kernels an MKL run weighs: the members of a combination.
pub fn mkl_bases(spec: &KernelSpec) -> anyhow::Result<Vec<BaseKernel>> {
    match spec {
        KernelSpec::Combination(members) => Ok(members.iter().map(|(b, _)| *b).collect()),
        KernelSpec::Base(_) => bail!("multiple kernel learning needs a combination kernel such as `0.5*linear + 0.5*gaussian:1`"),
    }
}

pub struct PipelineOutput {
    pub document: Value,
    pub spec: KernelSpec,
    pub dictionary: DualDictionary,
    pub model: Option<SupervisedModel>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub predictions: Vec<usize>,
    pub metrics: Metrics,
}

/// Mean per-sample objective over all classes at each iteration; classes
/// that stopped early keep their final value.
fn pooled_trace(reports: &[FitReport], sizes: &[usize]) -> Vec<f64> {
    let len = reports.iter().map(|r| r.objective_trace.len()).max().unwrap_or(0);
    let total: usize = sizes.iter().sum();
    (0..len)
        .map(|t| {
            reports
                .iter()
                .zip(sizes)
                .map(|(r, &m)| {
                    let tr = &r.objective_trace;
                    tr[t.min(tr.len() - 1)] * m as f64
                })
                .sum::<f64>()
                / total as f64
        })
        .collect()
}

/// Runs the whole experiment in memory. `inputs` already holds the hashes
/// of files read by the caller (the config file).
pub fn run_pipeline(cfg: &Config, base: &Path, mut inputs: InputHashes) -> anyhow::Result<PipelineOutput> {
    let data = load_dataset(cfg, base, &mut inputs).context("loading data")?;
    let total = data.labels.len();
    let train_size = if cfg.train_size == 0 { total / 2 } else { cfg.train_size };
    let (tr, te) = split_indices(total, train_size, cfg.seed)?;
    if te.is_empty() {
        bail!("the split leaves no test samples");
    }
    let train = data.select(&tr);
    let test = data.select(&te);
    let classes = train.classes();
    let params = cfg.coding();
    let opts = cfg.fit_options();
    let supervised = matches!(cfg.classifier, ClassifierChoice::Linear | ClassifierChoice::Bilinear);
    let per_class = cfg.dict_mode == DictMode::PerClass && !supervised;
    if cfg.classifier == ClassifierChoice::Residual && !per_class {
        bail!("the residual classifier needs per-class atoms (dict_mode = per_class)");
    }

    // Kernel learning on a dictionary of training samples.
    let mut spec = cfg.kernel.clone();
    let mut rounds: Vec<KernelRound> = Vec::new();
    if cfg.learn_kernel != KernelLearning::None {
        let k = gram_self(&spec, &train.samples)?;
        let d0 = if per_class {
            fit_per_class(&k, &train.labels, cfg.scheme, &params, &crate::dictlearn::FitOptions { max_iter: 0, ..opts.clone() })?.0
        } else {
            init_dictionary(train.labels.len(), cfg.atoms, cfg.seed)?
        };
        let target = match cfg.learn_kernel {
            KernelLearning::Beta => KernelTarget::Beta(spec.clone()),
            _ => KernelTarget::Weights(mkl_bases(&spec)?),
        };
        let (learned, history) =
            fit_kernel(&target, &d0, &train.samples, cfg.scheme, &params, cfg.kernel_rounds, &cfg.descent()).context("learning the kernel")?;
        spec = learned;
        rounds = history;
    }

    let k = gram_self(&spec, &train.samples)?;
    let mut model = None;
    let (dictionary, dict_section, objective_trace) = if supervised {
        let sopts = SupervisedOptions {
            kind: if cfg.classifier == ClassifierChoice::Linear { ClassifierKind::Linear } else { ClassifierKind::Bilinear },
            eta: cfg.eta,
            rho: cfg.rho,
            atoms: cfg.atoms,
            max_iter: cfg.max_iter,
            tol: cfg.tol,
            seed: cfg.seed,
            bilinear_cap: cfg.bilinear_cap,
        };
        let (dict, m, _, report) =
            fit_supervised(&train.samples, &train.labels, &spec, cfg.scheme, &params, &sopts).context("supervised learning")?;
        model = Some(m);
        let trace = report.objective_trace.clone();
        (dict, json!({ "mode": "supervised", "reports": [report] }), trace)
    } else if per_class {
        let (dict, reports) = fit_per_class(&k, &train.labels, cfg.scheme, &params, &opts).context("learning the dictionary")?;
        let sizes: Vec<usize> = (0..classes).map(|c| train.labels.iter().filter(|&&l| l == c).count()).filter(|&n| n > 0).collect();
        let trace = if reports.is_empty() { Vec::new() } else { pooled_trace(&reports, &sizes) };
        (dict, json!({ "mode": "per_class", "reports": reports }), trace)
    } else {
        let a0 = init_dictionary(train.labels.len(), cfg.atoms, cfg.seed)?.coefficients().expect("dual").clone();
        let (a, _, report) = fit_alternating_gram(&k, a0, cfg.scheme, &params, &opts).context("learning the dictionary")?;
        let trace = report.objective_trace.clone();
        (DualDictionary::dual(a), json!({ "mode": "shared", "reports": [report] }), trace)
    };

    let bundle = dictionary.bundle(&spec, &train.samples, &test.samples)?;
    let codes = encode_batch(&bundle, &params, cfg.scheme).context("encoding the test set")?;
    let predictions: Vec<usize> = match cfg.classifier {
        ClassifierChoice::Residual => {
            let labels = dictionary.atom_labels.as_ref().expect("per-class atoms are labelled");
            (0..te.len())
                .map(|i| Ok(residual_classify(&bundle.query(i), &codes.y.column(i).into_owned(), labels, classes)?.0))
                .collect::<crate::Result<_>>()?
        }
        ClassifierChoice::Nn => {
            let train_bundle = dictionary.bundle(&spec, &train.samples, &train.samples)?;
            let train_codes = encode_batch(&train_bundle, &params, cfg.scheme).context("encoding the training set")?;
            (0..te.len())
                .map(|i| nn_classify(&train_codes.y, &train.labels, &codes.y.column(i).into_owned()))
                .collect::<crate::Result<_>>()?
        }
        ClassifierChoice::Linear | ClassifierChoice::Bilinear => {
            let m = model.as_ref().expect("supervised model");
            let kappa = gram_matrix(&spec, &train.samples, &test.samples)?;
            (0..te.len())
                .map(|i| predict(m, &codes.y.column(i).into_owned(), Some(&kappa.column(i).into_owned())))
                .collect::<crate::Result<_>>()?
        }
    };
    let metrics = evaluate(&predictions, &test.labels)?;

    let document = json!({
        "command": "pipeline",
        "inputs": inputs,
        "data": {
            "samples": total,
            "train": tr.len(),
            "test": te.len(),
            "classes": classes,
        },
        "kernel": {
            "initial": cfg.kernel.to_string(),
            "final": spec.to_string(),
            "rounds": rounds,
        },
        "dictionary": dict_section,
        "objective_trace": objective_trace,
        "metrics": metrics,
    });
    Ok(PipelineOutput {
        document,
        spec,
        dictionary,
        model,
        train_indices: tr,
        test_indices: te,
        predictions,
        metrics,
    })
}
