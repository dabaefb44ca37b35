//! Text formats: matrices, labels, models and result documents.
//!
//! A matrix file is a `rows cols` header followed by `rows` lines of
//! whitespace-separated values. Values are either hexadecimal floats
//! (`0x1.8p+1`, exact) or decimal with 17 significant digits; readers accept
//! both, so only writers need to know the format.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::kernels::{Samples, SpdDescriptor};
use crate::supervised::{Classifier, SupervisedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NumberFormat {
    #[default]
    Hex,
    Decimal,
}

impl NumberFormat {
    pub fn name(self) -> &'static str {
        match self {
            NumberFormat::Hex => "hex",
            NumberFormat::Decimal => "decimal",
        }
    }

    pub fn format(self, v: f64) -> String {
        match self {
            NumberFormat::Hex => format_hex(v),
            NumberFormat::Decimal => format!("{v:.16e}"),
        }
    }
}

impl std::str::FromStr for NumberFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hex" => Ok(NumberFormat::Hex),
            "decimal" => Ok(NumberFormat::Decimal),
            other => Err(format!("unknown number format `{other}` (hex or decimal)")),
        }
    }
}

/// Exact hexadecimal rendering of a double, `[-]0x1.<13 digits>p<exp>`
/// (`0x0.` for subnormals).
pub fn format_hex(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    let sign = if v.is_sign_negative() { "-" } else { "" };
    if v.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    match (exp, frac) {
        (0, 0) => format!("{sign}0x0p+0"),
        (0, f) => format!("{sign}0x0.{f:013x}p-1022"),
        (e, f) => format!("{sign}0x1.{f:013x}p{:+}", e - 1023),
    }
}

/// Parses a hexadecimal float such as `-0x1.8p+1`, `0x3p-2` or `0x.4p0`.
pub fn parse_hex(s: &str) -> Result<f64, String> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let body = body
        .strip_prefix("0x")
        .or_else(|| body.strip_prefix("0X"))
        .ok_or_else(|| format!("`{s}` is not a hexadecimal float"))?;
    let (digits, exp) = match body.find(['p', 'P']) {
        Some(i) => {
            let e = body[i + 1..].parse::<i64>().map_err(|e| format!("`{s}`: exponent: {e}"))?;
            (&body[..i], e)
        }
        None => (body, 0),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(format!("`{s}` has no digits"));
    }
    let mut mant: u64 = 0;
    let mut shift = exp;
    let mut significant = 0;
    for (k, c) in int.chars().chain(frac.chars()).enumerate() {
        let d = c.to_digit(16).ok_or_else(|| format!("`{s}`: invalid hex digit `{c}`"))? as u64;
        if k >= int.len() {
            shift -= 4;
        }
        if mant == 0 && d == 0 {
            continue;
        }
        significant += 1;
        if significant > 15 {
            return Err(format!("`{s}` has more hex digits than a double holds"));
        }
        mant = mant << 4 | d;
    }
    let mut v = mant as f64;
    // Scale in steps that stay exact for every representable result.
    while shift > 0 {
        let step = shift.min(1000);
        v *= 2f64.powi(step as i32);
        shift -= step;
    }
    while shift < 0 {
        let step = (-shift).min(1000);
        v *= 2f64.powi(-(step as i32));
        shift += step;
    }
    Ok(if neg { -v } else { v })
}

pub fn parse_number(s: &str) -> Result<f64, String> {
    let body = s.trim_start_matches(['-', '+']);
    if body.starts_with("0x") || body.starts_with("0X") {
        parse_hex(s)
    } else {
        s.parse::<f64>().map_err(|e| format!("`{s}`: {e}"))
    }
}

/// Problem in a text input, with a 1-based position.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub source: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}: {}", self.source, self.line, self.column, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Tokens of a line with their 1-based columns.
pub(crate) fn tokens(line: &str) -> impl Iterator<Item = (usize, &str)> {
    line.split_whitespace().map(move |t| (t.as_ptr() as usize - line.as_ptr() as usize + 1, t))
}

pub fn parse_matrix(text: &str, source: &str) -> Result<DMatrix<f64>, ParseError> {
    let err = |line: usize, column: usize, message: String| ParseError { source: source.into(), line, column, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| err(1, 1, "missing `rows cols` header".into()))?;
    let head: Vec<(usize, &str)> = tokens(header).collect();
    if head.len() != 2 {
        return Err(err(hl + 1, 1, "header must be `rows cols`".into()));
    }
    let dim = |(col, t): (usize, &str)| t.parse::<usize>().map_err(|e| err(hl + 1, col, format!("`{t}`: {e}")));
    let (rows, cols) = (dim(head[0])?, dim(head[1])?);
    let mut m = DMatrix::zeros(rows, cols);
    if cols == 0 {
        // Rows of an empty-width matrix are blank lines.
        return Ok(m);
    }
    let mut r = 0;
    for (ln, line) in lines {
        if r == rows {
            return Err(err(ln + 1, 1, format!("more than the declared {rows} rows")));
        }
        let mut c = 0;
        for (col, t) in tokens(line) {
            if c == cols {
                return Err(err(ln + 1, col, format!("more than the declared {cols} columns")));
            }
            m[(r, c)] = parse_number(t).map_err(|e| err(ln + 1, col, e))?;
            c += 1;
        }
        if c != cols {
            return Err(err(ln + 1, line.len() + 1, format!("row has {c} values, expected {cols}")));
        }
        r += 1;
    }
    if r != rows {
        return Err(err(text.lines().count() + 1, 1, format!("found {r} rows, expected {rows}")));
    }
    Ok(m)
}

pub fn format_matrix(m: &DMatrix<f64>, fmt: NumberFormat) -> String {
    let mut out = format!("{} {}\n", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|&v| fmt.format(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_labels(text: &str, source: &str) -> Result<Vec<usize>, ParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(ln, l)| {
            let (col, t) = tokens(l).next().expect("nonempty");
            if tokens(l).count() != 1 {
                return Err(ParseError { source: source.into(), line: ln + 1, column: col, message: "expected one label per line".into() });
            }
            t.parse::<usize>().map_err(|e| ParseError { source: source.into(), line: ln + 1, column: col, message: format!("`{t}`: {e}") })
        })
        .collect()
}

pub fn format_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_matrix(path: &Path) -> anyhow::Result<DMatrix<f64>> {
    Ok(parse_matrix(&read_text(path)?, &path.display().to_string())?)
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, fmt: NumberFormat) -> anyhow::Result<()> {
    write_atomic(path, &format_matrix(m, fmt))
}

pub fn read_labels(path: &Path) -> anyhow::Result<Vec<usize>> {
    Ok(parse_labels(&read_text(path)?, &path.display().to_string())?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Samples stored one per column. SPD descriptors are stored row-major
/// flattened, so the row count must be a square.
pub fn samples_from_matrix(m: DMatrix<f64>, spd: bool) -> anyhow::Result<Samples> {
    if !spd {
        return Ok(Samples::Vectors(m));
    }
    let n = (m.nrows() as f64).sqrt().round() as usize;
    if n * n != m.nrows() {
        bail!("SPD data needs n*n rows per sample, found {}", m.nrows());
    }
    let descriptors = m
        .column_iter()
        .enumerate()
        .map(|(i, c)| SpdDescriptor::new(DMatrix::from_row_slice(n, n, c.as_slice())).with_context(|| format!("sample {i}")))
        .collect::<anyhow::Result<_>>()?;
    Ok(Samples::Spd(descriptors))
}

pub fn samples_to_matrix(s: &Samples) -> DMatrix<f64> {
    match s {
        Samples::Vectors(m) => m.clone(),
        Samples::Spd(v) => {
            let n = v.first().map_or(0, |d| d.dim());
            let mut m = DMatrix::zeros(n * n, v.len());
            for (j, d) in v.iter().enumerate() {
                for r in 0..n {
                    for c in 0..n {
                        m[(r * n + c, j)] = d.matrix()[(r, c)];
                    }
                }
            }
            m
        }
    }
}

/// Model file: `kind`, `eta`, `rho` and `classes` lines, then the matrix
/// blocks (one for the linear kind, one per class for the bilinear kind).
pub fn format_model(model: &SupervisedModel, fmt: NumberFormat) -> String {
    let (kind, blocks): (&str, Vec<&DMatrix<f64>>) = match &model.classifier {
        Classifier::Linear(w) => ("linear", vec![w]),
        Classifier::Bilinear(a) => ("bilinear", a.iter().collect()),
    };
    let mut out = format!(
        "kind {kind}\neta {}\nrho {}\nclasses {}\n",
        fmt.format(model.eta),
        fmt.format(model.rho),
        model.classes()
    );
    for b in blocks {
        out.push_str(&format_matrix(b, fmt));
    }
    out
}

pub fn parse_model(text: &str, source: &str) -> Result<SupervisedModel, ParseError> {
    let err = |line: usize, column: usize, message: String| ParseError { source: source.into(), line, column, message };
    let lines: Vec<&str> = text.lines().collect();
    let field = |i: usize, key: &str| -> Result<(usize, &str), ParseError> {
        let l = lines.get(i).ok_or_else(|| err(i + 1, 1, format!("missing `{key}` line")))?;
        let t: Vec<(usize, &str)> = tokens(l).collect();
        match t.as_slice() {
            [(_, k), v] if *k == key => Ok(*v),
            _ => Err(err(i + 1, 1, format!("expected `{key} <value>`"))),
        }
    };
    let (kc, kind) = field(0, "kind")?;
    let number = |i: usize, key: &str| -> Result<f64, ParseError> {
        let (c, v) = field(i, key)?;
        parse_number(v).map_err(|e| err(i + 1, c, e))
    };
    let eta = number(1, "eta")?;
    let rho = number(2, "rho")?;
    let (cc, classes) = field(3, "classes")?;
    let classes: usize = classes.parse().map_err(|e| err(4, cc, format!("`{classes}`: {e}")))?;
    let blocks = match kind {
        "linear" => 1,
        "bilinear" => classes,
        other => return Err(err(1, kc, format!("unknown model kind `{other}`"))),
    };
    // Split the remainder into matrix blocks using their headers.
    let mut mats = Vec::with_capacity(blocks);
    let mut i = 4;
    for _ in 0..blocks {
        let header = lines.get(i).ok_or_else(|| err(i + 1, 1, "missing matrix block".into()))?;
        let rows: usize = tokens(header)
            .next()
            .and_then(|(_, t)| t.parse().ok())
            .ok_or_else(|| err(i + 1, 1, "expected a `rows cols` header".into()))?;
        let end = (i + 1 + rows).min(lines.len());
        let block = lines[i..end].join("\n");
        let m = parse_matrix(&block, source).map_err(|e| ParseError { line: e.line + i, ..e })?;
        mats.push(m);
        i = end;
    }
    let classifier = if kind == "linear" {
        let w = mats.pop().expect("one block");
        if w.nrows() != classes {
            return Err(err(5, 1, format!("classifier has {} rows for {classes} classes", w.nrows())));
        }
        Classifier::Linear(w)
    } else {
        Classifier::Bilinear(mats)
    };
    Ok(SupervisedModel { classifier, eta, rho })
}

pub fn read_model(path: &Path) -> anyhow::Result<SupervisedModel> {
    Ok(parse_model(&read_text(path)?, &path.display().to_string())?)
}

pub fn column(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.column(i).into_owned()
}
