//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment and blank lines are
//! ignored. Unknown keys and malformed values are reported with their line
//! and column. Every key has a default, and [`Config::entries`] lists the
//! fully resolved configuration in a form that parses back to itself.

use std::str::FromStr;

use crate::coders::{CodingParams, LlcNormalization, Scheme};
use crate::dictlearn::FitOptions;
use crate::kernellearn::DescentOptions;
use crate::kernels::{BaseKernel, KernelSpec};

use super::io::{NumberFormat, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Circles,
    Xor,
    Blobs,
    Spd,
    /// `data_file` (samples as columns) with `labels_file`.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelLearning {
    None,
    Beta,
    Mkl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictMode {
    /// `atoms` atoms learned from each class, labelled by class.
    PerClass,
    /// `atoms` atoms learned from the whole training set.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierChoice {
    Residual,
    Nn,
    Linear,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub format: NumberFormat,

    pub data: DataSource,
    pub data_file: String,
    pub labels_file: String,
    pub spd_data: bool,
    pub samples_per_class: usize,
    pub radii: Vec<f64>,
    pub noise: f64,
    pub xor_offset: f64,
    pub xor_spread: f64,
    pub blob_centers: Vec<Vec<f64>>,
    pub blob_spread: f64,
    pub spd_dim: usize,
    pub spd_anisotropy: Vec<f64>,
    /// Training share of a pipeline split; 0 means half of the samples.
    pub train_size: usize,

    pub kernel: KernelSpec,
    pub learn_kernel: KernelLearning,
    pub kernel_rounds: usize,
    pub kernel_iter: usize,
    pub kernel_tol: f64,

    pub scheme: Scheme,
    pub gamma: f64,
    pub sigma: f64,
    pub n_local: usize,
    pub eps_llc: f64,
    pub tau: f64,
    pub llc_normalization: LlcNormalization,

    pub atoms: usize,
    pub dict_mode: DictMode,
    pub max_iter: usize,
    pub tol: f64,

    pub classifier: ClassifierChoice,
    pub eta: f64,
    pub rho: f64,
    pub bilinear_cap: usize,
}

impl Default for Config {
    fn default() -> Self {
        let coding = CodingParams::default();
        Config {
            seed: 0,
            format: NumberFormat::Hex,
            data: DataSource::Circles,
            data_file: String::new(),
            labels_file: String::new(),
            spd_data: false,
            samples_per_class: 100,
            radii: vec![1.0, 3.0],
            noise: 0.15,
            xor_offset: 1.5,
            xor_spread: 0.4,
            blob_centers: vec![vec![0.0, 0.0], vec![3.0, 3.0]],
            blob_spread: 0.5,
            spd_dim: 3,
            spd_anisotropy: vec![1.5, 6.0],
            train_size: 0,
            kernel: KernelSpec::Base(BaseKernel::Gaussian { beta: 1.0 }),
            learn_kernel: KernelLearning::None,
            kernel_rounds: 3,
            kernel_iter: 50,
            kernel_tol: 1e-6,
            scheme: Scheme::Ksc,
            gamma: coding.gamma,
            sigma: coding.sigma,
            n_local: coding.n_local,
            eps_llc: coding.eps_llc,
            tau: coding.tau,
            llc_normalization: coding.normalization,
            atoms: 8,
            dict_mode: DictMode::PerClass,
            max_iter: 5,
            tol: 1e-6,
            classifier: ClassifierChoice::Residual,
            eta: 1.0,
            rho: 1e-3,
            bilinear_cap: 4096,
        }
    }
}

fn pick<T: Copy>(v: &str, options: &[(&str, T)]) -> Result<T, String> {
    options.iter().find(|(n, _)| *n == v).map(|&(_, t)| t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        format!("`{v}` is not one of {}", names.join(", "))
    })
}

fn name<T: PartialEq>(v: &T, options: &[(&'static str, T)]) -> &'static str
where
    T: Copy,
{
    options.iter().find(|(_, t)| t == v).map(|(n, _)| *n).expect("listed")
}

const SOURCES: &[(&str, DataSource)] = &[
    ("circles", DataSource::Circles),
    ("xor", DataSource::Xor),
    ("blobs", DataSource::Blobs),
    ("spd", DataSource::Spd),
    ("file", DataSource::File),
];
const LEARNING: &[(&str, KernelLearning)] =
    &[("none", KernelLearning::None), ("beta", KernelLearning::Beta), ("mkl", KernelLearning::Mkl)];
const MODES: &[(&str, DictMode)] = &[("per_class", DictMode::PerClass), ("shared", DictMode::Shared)];
const CLASSIFIERS: &[(&str, ClassifierChoice)] = &[
    ("residual", ClassifierChoice::Residual),
    ("nn", ClassifierChoice::Nn),
    ("linear", ClassifierChoice::Linear),
    ("bilinear", ClassifierChoice::Bilinear),
];
const NORMALIZATIONS: &[(&str, LlcNormalization)] =
    &[("signed_sum", LlcNormalization::SignedSum), ("absolute_l1", LlcNormalization::AbsoluteL1)];

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn real(v: &str) -> Result<f64, String> {
    super::io::parse_number(v)
}

fn reals(v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|t| real(t.trim())).collect()
}

fn bool_value(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "seed", "format", "data", "data_file", "labels_file", "spd_data", "samples_per_class", "radii", "noise",
        "xor_offset", "xor_spread", "blob_centers", "blob_spread", "spd_dim", "spd_anisotropy", "train_size",
        "kernel", "learn_kernel", "kernel_rounds", "kernel_iter", "kernel_tol", "scheme", "gamma", "sigma",
        "n_local", "eps_llc", "tau", "llc_normalization", "atoms", "dict_mode", "max_iter", "tol", "classifier",
        "eta", "rho", "bilinear_cap",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = num(v)?,
            "format" => self.format = v.parse()?,
            "data" => self.data = pick(v, SOURCES)?,
            "data_file" => self.data_file = v.into(),
            "labels_file" => self.labels_file = v.into(),
            "spd_data" => self.spd_data = bool_value(v)?,
            "samples_per_class" => self.samples_per_class = num(v)?,
            "radii" => self.radii = reals(v)?,
            "noise" => self.noise = real(v)?,
            "xor_offset" => self.xor_offset = real(v)?,
            "xor_spread" => self.xor_spread = real(v)?,
            "blob_centers" => self.blob_centers = v.split(';').map(|p| reals(p.trim())).collect::<Result<_, _>>()?,
            "blob_spread" => self.blob_spread = real(v)?,
            "spd_dim" => self.spd_dim = num(v)?,
            "spd_anisotropy" => self.spd_anisotropy = reals(v)?,
            "train_size" => self.train_size = num(v)?,
            "kernel" => self.kernel = v.parse().map_err(|e: crate::Error| e.to_string())?,
            "learn_kernel" => self.learn_kernel = pick(v, LEARNING)?,
            "kernel_rounds" => self.kernel_rounds = num(v)?,
            "kernel_iter" => self.kernel_iter = num(v)?,
            "kernel_tol" => self.kernel_tol = real(v)?,
            "scheme" => self.scheme = v.parse().map_err(|e: crate::Error| e.to_string())?,
            "gamma" => self.gamma = real(v)?,
            "sigma" => self.sigma = real(v)?,
            "n_local" => self.n_local = num(v)?,
            "eps_llc" => self.eps_llc = real(v)?,
            "tau" => self.tau = real(v)?,
            "llc_normalization" => self.llc_normalization = pick(v, NORMALIZATIONS)?,
            "atoms" => self.atoms = num(v)?,
            "dict_mode" => self.dict_mode = pick(v, MODES)?,
            "max_iter" => self.max_iter = num(v)?,
            "tol" => self.tol = real(v)?,
            "classifier" => self.classifier = pick(v, CLASSIFIERS)?,
            "eta" => self.eta = real(v)?,
            "rho" => self.rho = real(v)?,
            "bilinear_cap" => self.bilinear_cap = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in [`Config::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        Self::KEYS
            .iter()
            .map(|&k| {
                let v = match k {
                    "seed" => self.seed.to_string(),
                    "format" => self.format.name().into(),
                    "data" => name(&self.data, SOURCES).into(),
                    "data_file" => self.data_file.clone(),
                    "labels_file" => self.labels_file.clone(),
                    "spd_data" => self.spd_data.to_string(),
                    "samples_per_class" => self.samples_per_class.to_string(),
                    "radii" => join(&self.radii),
                    "noise" => format!("{:?}", self.noise),
                    "xor_offset" => format!("{:?}", self.xor_offset),
                    "xor_spread" => format!("{:?}", self.xor_spread),
                    "blob_centers" => self.blob_centers.iter().map(|c| join(c)).collect::<Vec<_>>().join(";"),
                    "blob_spread" => format!("{:?}", self.blob_spread),
                    "spd_dim" => self.spd_dim.to_string(),
                    "spd_anisotropy" => join(&self.spd_anisotropy),
                    "train_size" => self.train_size.to_string(),
                    "kernel" => self.kernel.to_string(),
                    "learn_kernel" => name(&self.learn_kernel, LEARNING).into(),
                    "kernel_rounds" => self.kernel_rounds.to_string(),
                    "kernel_iter" => self.kernel_iter.to_string(),
                    "kernel_tol" => format!("{:?}", self.kernel_tol),
                    "scheme" => self.scheme.name().into(),
                    "gamma" => format!("{:?}", self.gamma),
                    "sigma" => format!("{:?}", self.sigma),
                    "n_local" => self.n_local.to_string(),
                    "eps_llc" => format!("{:?}", self.eps_llc),
                    "tau" => format!("{:?}", self.tau),
                    "llc_normalization" => name(&self.llc_normalization, NORMALIZATIONS).into(),
                    "atoms" => self.atoms.to_string(),
                    "dict_mode" => name(&self.dict_mode, MODES).into(),
                    "max_iter" => self.max_iter.to_string(),
                    "tol" => format!("{:?}", self.tol),
                    "classifier" => name(&self.classifier, CLASSIFIERS).into(),
                    "eta" => format!("{:?}", self.eta),
                    "rho" => format!("{:?}", self.rho),
                    "bilinear_cap" => self.bilinear_cap.to_string(),
                    _ => unreachable!("every key is listed"),
                };
                (k, v)
            })
            .collect()
    }

    pub fn parse(text: &str, source: &str) -> Result<Config, ParseError> {
        let mut cfg = Config::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("");
            if line.trim().is_empty() {
                continue;
            }
            let err = |column: usize, message: String| ParseError { source: source.into(), line: ln + 1, column, message };
            let Some(eq) = line.find('=') else {
                let col = line.len() - line.trim_start().len() + 1;
                return Err(err(col, "expected `key = value`".into()));
            };
            let key = line[..eq].trim();
            let key_col = line.len() - line.trim_start().len() + 1;
            let value_part = &line[eq + 1..];
            let value = value_part.trim();
            let value_col = eq + 2 + (value_part.len() - value_part.trim_start().len());
            if !Self::KEYS.contains(&key) {
                return Err(err(key_col, format!("unknown key `{key}`")));
            }
            if value.is_empty() && !matches!(key, "data_file" | "labels_file") {
                return Err(err(value_col, format!("`{key}` has no value")));
            }
            cfg.set(key, value).map_err(|m| err(value_col, format!("{key}: {m}")))?;
        }
        Ok(cfg)
    }

    /// The resolved configuration as config-file text.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn coding(&self) -> CodingParams {
        CodingParams {
            gamma: self.gamma,
            sigma: self.sigma,
            n_local: self.n_local,
            eps_llc: self.eps_llc,
            tau: self.tau,
            normalization: self.llc_normalization,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { atoms: self.atoms, max_iter: self.max_iter, tol: self.tol, seed: self.seed }
    }

    pub fn descent(&self) -> DescentOptions {
        DescentOptions { max_iter: self.kernel_iter, tol: self.kernel_tol }
    }
}
