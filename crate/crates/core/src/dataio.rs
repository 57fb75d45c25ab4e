//! Synthetic cross-domain data and the plain-text dataset/model formats.
//!
//! Dataset file:
//!
//! ```text
//! GSIM-DATA 1 <dim_x> <dim_y>
//! <X|Y> <class_id> <v1> ... <vk>
//! ```
//!
//! Model file: header `GSIM-MODEL 1`, the layer layout (`layers <group>
//! <activation>...` and `normalize <0|1>`), then named tensor blocks
//! `<name> <rows> <cols>` each followed by `rows` lines of row-major values.
//! Floats are written with 17 significant digits so both formats round-trip
//! exactly and are byte-reproducible.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::featnet::{Activation, FeatureNet, Layer};
use crate::simcore::{Matrix, SimilarityComponents, Vector};
use crate::trainer::{ModelState, Sample};
use crate::{fmt_f64, Domain, Error, Result};

pub const DATA_MAGIC: &str = "GSIM-DATA";
pub const MODEL_MAGIC: &str = "GSIM-MODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim_x: usize,
    pub dim_y: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(dim_x: usize, dim_y: usize, samples: Vec<Sample>) -> Result<Self> {
        for (k, s) in samples.iter().enumerate() {
            let want = match s.domain {
                Domain::X => dim_x,
                Domain::Y => dim_y,
            };
            if s.raw.len() != want {
                return Err(Error::dim(format!("sample {k}"), want, s.raw.len()));
            }
            if !s.raw.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("sample {k}")));
            }
        }
        Ok(Dataset {
            dim_x,
            dim_y,
            samples,
        })
    }

    /// Distinct class ids in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.class_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.samples.iter().filter(|s| s.domain == domain).count()
    }

    /// Splits off the `holdout` classes with the largest ids.
    /// Returns `(train, held_out)`.
    pub fn split_holdout(&self, holdout: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let classes = self.classes();
        if holdout > classes.len() {
            return Err(Error::param(
                "holdout_classes",
                format!("{holdout} requested, dataset has {} classes", classes.len()),
            ));
        }
        let held: BTreeSet<u32> = classes[classes.len() - holdout..].iter().copied().collect();
        let (test, train): (Vec<Sample>, Vec<Sample>) = self
            .samples
            .iter()
            .cloned()
            .partition(|s| held.contains(&s.class_id));
        Ok((train, test))
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class_x: usize,
    pub samples_per_class_y: usize,
    pub latent_dim: usize,
    pub input_dim_x: usize,
    pub input_dim_y: usize,
    pub noise_sigma: f64,
    pub nonlinear: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 40,
            samples_per_class_x: 6,
            samples_per_class_y: 6,
            latent_dim: 8,
            input_dim_x: 32,
            input_dim_y: 32,
            noise_sigma: 0.15,
            nonlinear: true,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("samples_per_class_x", self.samples_per_class_x),
            ("samples_per_class_y", self.samples_per_class_y),
            ("latent_dim", self.latent_dim),
            ("input_dim_x", self.input_dim_x),
            ("input_dim_y", self.input_dim_y),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param("noise_sigma", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One Gaussian latent center per class, observed through an independent
/// random affine map per domain (optionally followed by `tanh`).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let u_x = Matrix::from_fn(spec.input_dim_x, spec.latent_dim, |_, _| normal() * scale);
    let u_y = Matrix::from_fn(spec.input_dim_y, spec.latent_dim, |_, _| normal() * scale);
    let shift_x = Vector::from_fn(spec.input_dim_x, |_, _| normal() * 0.5);
    let shift_y = Vector::from_fn(spec.input_dim_y, |_, _| normal() * 0.5);
    let centers: Vec<Vector> = (0..spec.num_classes)
        .map(|_| Vector::from_fn(spec.latent_dim, |_, _| normal()))
        .collect();

    let mut samples = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for (domain, n, u, shift) in [
            (Domain::X, spec.samples_per_class_x, &u_x, &shift_x),
            (Domain::Y, spec.samples_per_class_y, &u_y, &shift_y),
        ] {
            for _ in 0..n {
                let latent = center + Vector::from_fn(spec.latent_dim, |_, _| normal() * spec.noise_sigma);
                let mut raw = u * latent + shift;
                if spec.nonlinear {
                    raw.apply(|v| *v = v.tanh());
                }
                samples.push(Sample {
                    id: samples.len(),
                    domain,
                    class_id: c as u32,
                    raw,
                });
            }
        }
    }
    Dataset::new(spec.input_dim_x, spec.input_dim_y, samples)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn join_values<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    values.into_iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = format!("{DATA_MAGIC} {FORMAT_VERSION} {} {}\n", ds.dim_x, ds.dim_y);
    for s in &ds.samples {
        let _ = writeln!(out, "{} {} {}", s.domain, s.class_id, join_values(s.raw.iter()));
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, format_dataset(ds)).map_err(|e| io_err(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    let (_, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&DATA_MAGIC) {
        return Err(parse_err(path, 1, "missing header"));
    }
    if fields.get(1) != Some(&"1") {
        return Err(Error::Version {
            what: "dataset".into(),
            found: fields.get(1).unwrap_or(&"").to_string(),
            expected: FORMAT_VERSION,
        });
    }
    if fields.len() != 4 {
        return Err(parse_err(path, 1, "header must be `GSIM-DATA 1 <dim_x> <dim_y>`"));
    }
    let dim = |s: &str, name: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| parse_err(path, 1, format!("invalid {name} `{s}`")))
    };
    let dim_x = dim(fields[2], "dim_x")?;
    let dim_y = dim(fields[3], "dim_y")?;

    let mut samples = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let domain = match parts.next() {
            Some("X") => Domain::X,
            Some("Y") => Domain::Y,
            other => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("row {}: expected domain X or Y, found {:?}", samples.len(), other),
                ))
            }
        };
        let class_id = parts
            .next()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| parse_err(path, line_no, format!("row {}: bad class id", samples.len())))?;
        let values = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(path, line_no, format!("row {}: {e}", samples.len())))?;
        let want = if domain == Domain::X { dim_x } else { dim_y };
        if values.len() != want {
            return Err(parse_err(
                path,
                line_no,
                format!(
                    "row {} has {} values, header declares {want} for domain {domain}",
                    samples.len(),
                    values.len()
                ),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(parse_err(path, line_no, format!("row {}: non-finite value", samples.len())));
        }
        samples.push(Sample {
            id: samples.len(),
            domain,
            class_id,
            raw: Vector::from_vec(values),
        });
    }
    Dataset::new(dim_x, dim_y, samples)
}

fn write_tensor(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let _ = writeln!(out, "{}", join_values(row.iter()));
    }
}

fn write_vector(out: &mut String, name: &str, v: &Vector) {
    let _ = writeln!(out, "{name} {} 1", v.len());
    for x in v.iter() {
        let _ = writeln!(out, "{}", fmt_f64(*x));
    }
}

const GROUPS: [&str; 3] = ["branch_x", "branch_y", "shared"];

fn groups(net: &FeatureNet) -> [&Vec<Layer>; 3] {
    [&net.branch_x, &net.branch_y, &net.shared]
}

pub fn format_model(state: &ModelState) -> String {
    let mut out = format!("{MODEL_MAGIC} {FORMAT_VERSION}\n");
    for (name, layers) in GROUPS.iter().zip(groups(&state.net)) {
        let acts: Vec<&str> = layers.iter().map(|l| l.activation.name()).collect();
        let _ = writeln!(out, "layers {name}{}{}", if acts.is_empty() { "" } else { " " }, acts.join(" "));
    }
    let _ = writeln!(out, "normalize {}", u8::from(state.net.normalize_output));
    for (name, layers) in GROUPS.iter().zip(groups(&state.net)) {
        for (k, l) in layers.iter().enumerate() {
            write_tensor(&mut out, &format!("{name}.w{k}"), &l.w);
            write_vector(&mut out, &format!("{name}.b{k}"), &l.b);
        }
    }
    let phi = &state.phi;
    write_tensor(&mut out, "phi.l_a", &phi.l_a);
    write_tensor(&mut out, "phi.l_b", &phi.l_b);
    write_tensor(&mut out, "phi.l_cx", &phi.l_cx);
    write_tensor(&mut out, "phi.l_cy", &phi.l_cy);
    write_vector(&mut out, "phi.d", &phi.d);
    write_vector(&mut out, "phi.e", &phi.e);
    let _ = writeln!(out, "phi.f 1 1\n{}", fmt_f64(phi.f));
    out
}

pub fn save_model(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, format_model(state)).map_err(|e| io_err(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_model(&text, path)
}

struct ModelReader<'a> {
    lines: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    path: &'a Path,
    last_line: usize,
}

impl<'a> ModelReader<'a> {
    fn next_line(&mut self, expecting: &str) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((n, l)) => {
                self.last_line = n;
                Ok((n, l))
            }
            None => Err(Error::Format {
                path: self.path.display().to_string(),
                reason: format!("truncated file: expected {expecting} after line {}", self.last_line),
            }),
        }
    }

    fn keyword(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let (n, line) = self.next_line(&format!("`{key}`"))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(parse_err(self.path, n, format!("expected `{key}`")));
        }
        Ok(parts.collect())
    }

    fn tensor(&mut self, name: &str) -> Result<Matrix> {
        let (n, line) = self.next_line(&format!("tensor `{name}`"))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != name {
            return Err(parse_err(
                self.path,
                n,
                format!("expected tensor header `{name} <rows> <cols>`"),
            ));
        }
        let rows: usize = parts[1]
            .parse()
            .map_err(|_| parse_err(self.path, n, "bad row count"))?;
        let cols: usize = parts[2]
            .parse()
            .map_err(|_| parse_err(self.path, n, "bad column count"))?;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (n, line) = self.next_line(&format!("values of `{name}`"))?;
            let row = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| parse_err(self.path, n, e.to_string()))?;
            if row.len() != cols {
                return Err(parse_err(
                    self.path,
                    n,
                    format!("`{name}` row has {} values, expected {cols}", row.len()),
                ));
            }
            values.extend(row);
        }
        Ok(Matrix::from_row_slice(rows, cols, &values))
    }

    fn vector(&mut self, name: &str) -> Result<Vector> {
        let m = self.tensor(name)?;
        if m.ncols() != 1 {
            return Err(Error::Format {
                path: self.path.display().to_string(),
                reason: format!("`{name}` must have one column, found {}", m.ncols()),
            });
        }
        Ok(Vector::from_column_slice(m.as_slice()))
    }
}

pub fn parse_model(text: &str, path: &Path) -> Result<ModelState> {
    let iter: Box<dyn Iterator<Item = (usize, &str)>> = Box::new(
        text.lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l))
            .filter(|(_, l)| !l.trim().is_empty()),
    );
    let mut rd = ModelReader {
        lines: iter.peekable(),
        path,
        last_line: 0,
    };
    let (n, header) = rd.next_line("header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&MODEL_MAGIC) {
        return Err(parse_err(path, n, "missing header"));
    }
    if fields.get(1) != Some(&"1") || fields.len() != 2 {
        return Err(Error::Version {
            what: "model".into(),
            found: fields[1..].join(" "),
            expected: FORMAT_VERSION,
        });
    }

    let mut activations: Vec<Vec<Activation>> = Vec::new();
    for group in GROUPS {
        let parts = rd.keyword("layers")?;
        if parts.first() != Some(&group) {
            return Err(parse_err(path, rd.last_line, format!("expected `layers {group}`")));
        }
        let acts = parts[1..]
            .iter()
            .map(|s| {
                Activation::parse(s)
                    .ok_or_else(|| parse_err(path, rd.last_line, format!("unknown activation `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        activations.push(acts);
    }
    let normalize = match rd.keyword("normalize")?.as_slice() {
        ["0"] => false,
        ["1"] => true,
        _ => return Err(parse_err(path, rd.last_line, "normalize must be 0 or 1")),
    };

    let mut layer_groups: Vec<Vec<Layer>> = Vec::new();
    for (group, acts) in GROUPS.iter().zip(&activations) {
        let mut layers = Vec::new();
        for (k, &activation) in acts.iter().enumerate() {
            let w = rd.tensor(&format!("{group}.w{k}"))?;
            let b = rd.vector(&format!("{group}.b{k}"))?;
            layers.push(Layer { w, b, activation });
        }
        layer_groups.push(layers);
    }
    let shared = layer_groups.pop().unwrap_or_default();
    let branch_y = layer_groups.pop().unwrap_or_default();
    let branch_x = layer_groups.pop().unwrap_or_default();
    let net = FeatureNet::from_layers(branch_x, branch_y, shared, normalize)?;

    let l_a = rd.tensor("phi.l_a")?;
    let l_b = rd.tensor("phi.l_b")?;
    let l_cx = rd.tensor("phi.l_cx")?;
    let l_cy = rd.tensor("phi.l_cy")?;
    let d = rd.vector("phi.d")?;
    let e = rd.vector("phi.e")?;
    let f = rd.tensor("phi.f")?;
    if f.shape() != (1, 1) {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "`phi.f` must be 1×1".into(),
        });
    }
    if let Some((n, _)) = rd.lines.next() {
        return Err(parse_err(path, n, "unexpected trailing content"));
    }
    let phi = SimilarityComponents::new(l_a, l_b, l_cx, l_cy, d, e, f[(0, 0)])?;
    ModelState::new(net, phi)
}

/// Whitespace-separated decimal vector (the `score` command's input files).
pub fn load_vector(path: &Path) -> Result<Vector> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut values = Vec::new();
    for (k, line) in text.lines().enumerate() {
        for tok in line.split_whitespace() {
            let v = tok
                .parse::<f64>()
                .map_err(|e| parse_err(path, k + 1, format!("`{tok}`: {e}")))?;
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "empty vector".into(),
        });
    }
    Ok(Vector::from_vec(values))
}
