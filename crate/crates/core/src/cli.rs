//! The `gsim` command-line driver.
//!
//! Every command takes an optional `key = value` config file (`#` starts a
//! comment) plus `--seed` and repeated `--set key=value` overrides; the
//! command line wins over the file. Effective settings are echoed as `# key =
//! value` lines before any other output. Exit codes: 0 success, 1 validation
//! or numeric failure, 2 IO or parse failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{self, Dataset, SynthSpec};
use crate::evalkit::{self, CmcCurve};
use crate::featnet::NetShape;
use crate::trainer::{self, BatchScheme, ModelState, PairLabel, Sample, TrainConfig, Variant};
use crate::{fmt_f64, Domain, Error, Result};

/// Recognized config keys and their defaults.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "1"),
    // synthetic data
    ("num_classes", "40"),
    ("samples_per_class_x", "6"),
    ("samples_per_class_y", "6"),
    ("latent_dim", "8"),
    ("input_dim_x", "32"),
    ("input_dim_y", "32"),
    ("noise_sigma", "0.15"),
    ("nonlinear", "true"),
    // feature net
    ("branch_dim", "24"),
    ("hidden_dim", "16"),
    ("feature_dim", "16"),
    ("normalize_output", "true"),
    // training
    ("learning_rate", "0.05"),
    ("reg_w", "1e-3"),
    ("reg_phi", "1e-4"),
    ("iterations", "2000"),
    ("f", "-1.9"),
    ("variant", "generalized"),
    ("phi_init_noise", "0.01"),
    ("max_step_ratio", "0.01"),
    // batch scheme
    ("k_hat", "10"),
    ("o1", "2"),
    ("o2", "2"),
    ("pairs_per_anchor", "8"),
    ("positive_fraction", "0.5"),
    // evaluation
    ("holdout_classes", "10"),
    ("splits", "10"),
    // gradient check
    ("grad_step", "1e-5"),
    ("grad_tolerance", "1e-6"),
    ("grad_k_hat", "4"),
    ("grad_pairs_per_anchor", "2"),
    ("grad_init_scale", "0.5"),
];

/// Effective key/value settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: CONFIG_KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: k + 1,
                reason: format!("expected `key = value`, found `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: k + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::param(key, "unknown config key")),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse::<T>()
            .map_err(|e| Error::param(key, format!("`{}`: {e}", self.get(key))))
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let v: usize = self.typed(key)?;
        if v == 0 {
            return Err(Error::param(key, "must be positive"));
        }
        Ok(v)
    }

    pub fn echo(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("# {k} = {v}\n"))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let spec = SynthSpec {
            num_classes: self.positive("num_classes")?,
            samples_per_class_x: self.positive("samples_per_class_x")?,
            samples_per_class_y: self.positive("samples_per_class_y")?,
            latent_dim: self.positive("latent_dim")?,
            input_dim_x: self.positive("input_dim_x")?,
            input_dim_y: self.positive("input_dim_y")?,
            noise_sigma: self.typed("noise_sigma")?,
            nonlinear: self.typed("nonlinear")?,
            seed: self.seed()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn scheme(&self) -> Result<BatchScheme> {
        let scheme = BatchScheme {
            k_hat: self.positive("k_hat")?,
            o1: self.positive("o1")?,
            o2: self.positive("o2")?,
            pairs_per_anchor: self.positive("pairs_per_anchor")?,
            positive_fraction: self.typed("positive_fraction")?,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let variant = Variant::parse(self.get("variant")).ok_or_else(|| {
            Error::param("variant", "expected generalized, euclidean or cosine")
        })?;
        let cfg = TrainConfig {
            learning_rate: self.typed("learning_rate")?,
            reg_w: self.typed("reg_w")?,
            reg_phi: self.typed("reg_phi")?,
            iterations: self.typed("iterations")?,
            seed: self.seed()?,
            scheme: self.scheme()?,
            f: self.typed("f")?,
            variant,
            phi_init_noise: self.typed("phi_init_noise")?,
            max_step_ratio: self.typed("max_step_ratio")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Net layout for inputs of the given dimensions.
    pub fn net_shape(&self, input_x: usize, input_y: usize) -> Result<NetShape> {
        let mut shape = NetShape::desk(
            input_x,
            input_y,
            self.positive("branch_dim")?,
            self.positive("hidden_dim")?,
            self.positive("feature_dim")?,
        );
        shape.normalize_output = self.typed("normalize_output")?;
        shape.validate()?;
        Ok(shape)
    }

    pub fn holdout_classes(&self) -> Result<usize> {
        self.typed("holdout_classes")
    }

    pub fn splits(&self) -> Result<usize> {
        self.positive("splits")
    }
}

#[derive(Debug, Parser)]
#[command(name = "gsim", about = "Generalized cross-domain similarity learning", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides any config key, e.g. `--set iterations=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Cmc,
    Verify,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cross-domain dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all non-held-out classes of a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Model output path.
        #[arg(long)]
        out: PathBuf,
        /// Loss trace output (`iter<TAB>mean_loss`); printed to stdout when absent.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a model on the held-out classes.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Overrides the `splits` key.
        #[arg(long)]
        splits: Option<usize>,
    },
    /// Score one x-domain vector against one y-domain vector.
    Score {
        #[arg(long)]
        model: PathBuf,
        x_vector: PathBuf,
        y_vector: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a fresh model.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the `grad_step` key.
        #[arg(long)]
        step: Option<f64>,
        /// Perturb the analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for ov in &args.overrides {
        let (k, v) = ov.split_once('=').ok_or_else(|| Error::Parse {
            path: "--set".into(),
            line: 0,
            reason: format!("expected KEY=VALUE, found `{ov}`"),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn io_out(e: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenData { cfg, out: path } => {
            let cfg = resolve(&cfg)?;
            cmd_gen_data(&cfg, &path, out)
        }
        Command::Train {
            cfg,
            data,
            out: model,
            trace,
        } => {
            let cfg = resolve(&cfg)?;
            cmd_train(&cfg, &data, &model, trace.as_deref(), out)
        }
        Command::Eval {
            cfg,
            model,
            data,
            mode,
            splits,
        } => {
            let mut cfg = resolve(&cfg)?;
            if let Some(s) = splits {
                cfg.set("splits", &s.to_string())?;
            }
            cmd_eval(&cfg, &model, &data, mode, out)
        }
        Command::Score {
            model,
            x_vector,
            y_vector,
        } => cmd_score(&model, &x_vector, &y_vector, out),
        Command::GradCheck {
            cfg,
            data,
            step,
            corrupt_gradient,
        } => {
            let mut cfg = resolve(&cfg)?;
            if let Some(s) = step {
                cfg.set("grad_step", &s.to_string())?;
            }
            cmd_grad_check(&cfg, &data, corrupt_gradient, out)
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, path: &Path, out: &mut dyn Write) -> Result<i32> {
    write!(out, "{}", cfg.echo()).map_err(io_out)?;
    let ds = dataio::generate_synthetic(&cfg.synth_spec()?)?;
    dataio::save_dataset(&ds, path)?;
    writeln!(out, "classes\t{}", ds.classes().len()).map_err(io_out)?;
    writeln!(out, "samples_x\t{}", ds.count(Domain::X)).map_err(io_out)?;
    writeln!(out, "samples_y\t{}", ds.count(Domain::Y)).map_err(io_out)?;
    writeln!(out, "samples\t{}", ds.samples.len()).map_err(io_out)?;
    Ok(0)
}

/// Trains on the dataset minus its held-out classes.
pub fn train_on_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<trainer::TrainOutcome> {
    let (train, _) = ds.split_holdout(cfg.holdout_classes()?)?;
    let shape = cfg.net_shape(ds.dim_x, ds.dim_y)?;
    trainer::train(&train, &shape, &cfg.train_config()?)
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    model: &Path,
    trace: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    write!(out, "{}", cfg.echo()).map_err(io_out)?;
    let ds = dataio::load_dataset(data)?;
    let outcome = train_on_dataset(cfg, &ds)?;
    dataio::save_model(&outcome.state, model)?;
    let text = trainer::format_loss_trace(&outcome.loss_trace);
    match trace {
        Some(p) => std::fs::write(p, &text).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        })?,
        None => out.write_all(text.as_bytes()).map_err(io_out)?,
    }
    match outcome.loss_trace.last() {
        Some(l) => writeln!(out, "final_mean_loss\t{l:?}").map_err(io_out)?,
        None => writeln!(out, "final_mean_loss\tnone").map_err(io_out)?,
    }
    Ok(0)
}

fn check_model_fits(state: &ModelState, ds: &Dataset) -> Result<()> {
    for (domain, dim) in [(Domain::X, ds.dim_x), (Domain::Y, ds.dim_y)] {
        let want = state.net.input_dim(domain);
        if want != dim {
            return Err(Error::dim(format!("dataset dim_{domain} vs model input"), want, dim));
        }
    }
    Ok(())
}

/// One CMC curve per split. Each split draws one y-domain gallery sample per
/// held-out class; every x-domain sample of those classes is a probe.
pub fn cmc_protocol(
    state: &ModelState,
    held_out: &[Sample],
    splits: usize,
    seed: u64,
) -> Result<Vec<CmcCurve>> {
    let mut by_class: BTreeMap<u32, Vec<&Sample>> = BTreeMap::new();
    for s in held_out.iter().filter(|s| s.domain == Domain::Y) {
        by_class.entry(s.class_id).or_default().push(s);
    }
    let probes: Vec<Sample> = held_out
        .iter()
        .filter(|s| s.domain == Domain::X && by_class.contains_key(&s.class_id))
        .cloned()
        .collect();
    if probes.is_empty() {
        return Err(Error::Evaluation("no held-out probes with a gallery class".into()));
    }
    (0..splits)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let gallery: Vec<Sample> = by_class
                .values()
                .map(|ys| (*ys.choose(&mut rng).expect("non-empty")).clone())
                .collect();
            evalkit::cmc(&evalkit::score_all(state, &probes, &gallery)?)
        })
        .collect()
}

/// Balanced verification pairs over the held-out classes: for every x-domain
/// sample, one same-class and one different-class y-domain partner.
pub fn verification_pairs(held_out: &[Sample], seed: u64) -> Result<Vec<PairLabel>> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, s) in held_out.iter().enumerate().filter(|(_, s)| s.domain == Domain::Y) {
        by_class.entry(s.class_id).or_default().push(k);
    }
    if by_class.len() < 2 {
        return Err(Error::Evaluation("verification needs >= 2 held-out classes".into()));
    }
    let classes: Vec<u32> = by_class.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (i, s) in held_out.iter().enumerate() {
        if s.domain != Domain::X {
            continue;
        }
        let Some(same) = by_class.get(&s.class_id) else {
            continue;
        };
        pairs.push(PairLabel {
            i,
            j: *same.choose(&mut rng).expect("non-empty"),
            ell: -1,
        });
        let other = loop {
            let c = classes[rng.gen_range(0..classes.len())];
            if c != s.class_id {
                break c;
            }
        };
        pairs.push(PairLabel {
            i,
            j: *by_class[&other].choose(&mut rng).expect("non-empty"),
            ell: 1,
        });
    }
    Ok(pairs)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    model: &Path,
    data: &Path,
    mode: EvalMode,
    out: &mut dyn Write,
) -> Result<i32> {
    write!(out, "{}", cfg.echo()).map_err(io_out)?;
    let state = dataio::load_model(model)?;
    let ds = dataio::load_dataset(data)?;
    check_model_fits(&state, &ds)?;
    let (_, held_out) = ds.split_holdout(cfg.holdout_classes()?)?;
    let seed = cfg.seed()?;
    match mode {
        EvalMode::Cmc => {
            let curves = cmc_protocol(&state, &held_out, cfg.splits()?, seed)?;
            for (k, c) in curves.iter().enumerate() {
                writeln!(
                    out,
                    "split\t{}\trank-1\t{}\trank-5\t{}\trank-10\t{}",
                    k + 1,
                    fmt_f64(c.at_rank(1)),
                    fmt_f64(c.at_rank(5)),
                    fmt_f64(c.at_rank(10))
                )
                .map_err(io_out)?;
            }
            let avg = CmcCurve::average(&curves)?;
            out.write_all(avg.to_tsv().as_bytes()).map_err(io_out)?;
            for r in [1, 5, 10] {
                writeln!(out, "rank-{r}\t{:?}", avg.at_rank(r)).map_err(io_out)?;
            }
        }
        EvalMode::Verify => {
            let pairs = verification_pairs(&held_out, seed)?;
            let scores = pairs
                .iter()
                .map(|p| state.score(&held_out[p.i], &held_out[p.j]))
                .collect::<Result<Vec<f64>>>()?;
            let labels: Vec<i8> = pairs.iter().map(|p| p.ell).collect();
            let (threshold, accuracy) = evalkit::verification_accuracy(&scores, &labels)?;
            writeln!(out, "pairs\t{}", pairs.len()).map_err(io_out)?;
            writeln!(out, "threshold\t{threshold:?}").map_err(io_out)?;
            writeln!(out, "accuracy\t{accuracy:?}").map_err(io_out)?;
        }
    }
    Ok(0)
}

pub fn cmd_score(model: &Path, x_path: &Path, y_path: &Path, out: &mut dyn Write) -> Result<i32> {
    let state = dataio::load_model(model)?;
    let sample = |path: &Path, domain: Domain| -> Result<Sample> {
        Ok(Sample {
            id: 0,
            domain,
            class_id: 0,
            raw: dataio::load_vector(path)?,
        })
    };
    let x = sample(x_path, Domain::X)?;
    let y = sample(y_path, Domain::Y)?;
    let score = state.score(&x, &y)?;
    writeln!(out, "score\t{score:?}").map_err(io_out)?;
    writeln!(out, "# lower = more similar").map_err(io_out)?;
    Ok(0)
}

/// Model with every trainable parameter drawn from `U(-scale, scale)`,
/// `f` from `cfg`.
pub fn random_model(shape: &NetShape, cfg: &TrainConfig, scale: f64) -> Result<ModelState> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::param("grad_init_scale", "must be finite and > 0"));
    }
    let mut state = ModelState::init(shape, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for s in state.param_slices_mut() {
        s.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
    Ok(state)
}

pub fn cmd_grad_check(
    cfg: &RunConfig,
    data: &Path,
    corrupt: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    write!(out, "{}", cfg.echo()).map_err(io_out)?;
    let ds = dataio::load_dataset(data)?;
    let (train, _) = ds.split_holdout(cfg.holdout_classes()?)?;
    let shape = cfg.net_shape(ds.dim_x, ds.dim_y)?;
    let tcfg = cfg.train_config()?;
    let state = random_model(&shape, &tcfg, cfg.typed("grad_init_scale")?)?;
    let scheme = BatchScheme {
        k_hat: cfg.positive("grad_k_hat")?,
        o1: 1,
        o2: 1,
        pairs_per_anchor: cfg.positive("grad_pairs_per_anchor")?,
        positive_fraction: tcfg.scheme.positive_fraction,
    };
    let pairs = trainer::generate_batch(&train, &scheme, tcfg.seed)?;
    let step: f64 = cfg.typed("grad_step")?;
    let tolerance: f64 = cfg.typed("grad_tolerance")?;
    let report = trainer::finite_diff_check_with(&state, &pairs, &train, &tcfg, step, |g| {
        if corrupt {
            g.phi.d[0] += 1e-3;
        }
    })?;
    writeln!(out, "step\t{step:?}").map_err(io_out)?;
    writeln!(out, "parameters\t{}", report.checked).map_err(io_out)?;
    writeln!(out, "pairs_used\t{}", report.pairs_used).map_err(io_out)?;
    writeln!(out, "pairs_excluded\t{}", report.pairs_excluded).map_err(io_out)?;
    writeln!(out, "argmax\t{}", report.argmax).map_err(io_out)?;
    writeln!(out, "max_rel_error\t{:?}", report.max_rel_error).map_err(io_out)?;
    let ok = report.pairs_used > 0 && report.max_rel_error <= tolerance;
    writeln!(out, "status\t{}", if ok { "ok" } else { "FAIL" }).map_err(io_out)?;
    Ok(if ok { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_and_overrides() {
        let cfg = RunConfig::parse("# comment\nlearning_rate = 0.1  # trailing\n\nk_hat=3\n", "t").unwrap();
        assert_eq!(cfg.get("learning_rate"), "0.1");
        assert_eq!(cfg.get("k_hat"), "3");
        assert_eq!(cfg.get("iterations"), "2000");
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.learning_rate, 0.1);
        assert_eq!(tc.scheme.k_hat, 3);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = RunConfig::parse("k_hat = 3\nbogus = 1\n", "cfg.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("bogus"));
        assert!(RunConfig::parse("no equals sign\n", "t").is_err());
    }

    #[test]
    fn invalid_values_name_the_key() {
        let mut cfg = RunConfig::default();
        cfg.set("input_dim_x", "0").unwrap();
        let err = cfg.synth_spec().unwrap_err();
        assert!(err.to_string().contains("input_dim_x"));
        let mut cfg = RunConfig::default();
        cfg.set("variant", "fancy").unwrap();
        assert!(cfg.train_config().unwrap_err().to_string().contains("variant"));
    }

    #[test]
    fn defaults_match_library_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.synth_spec().unwrap(), SynthSpec::default());
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
        assert_eq!(cfg.net_shape(32, 32).unwrap(), NetShape::desk(32, 32, 24, 16, 16));
    }

    #[test]
    fn verification_pairs_are_balanced() {
        let ds = dataio::generate_synthetic(&SynthSpec::default()).unwrap();
        let (_, held) = ds.split_holdout(10).unwrap();
        let pairs = verification_pairs(&held, 3).unwrap();
        assert_eq!(pairs.len(), 120);
        assert_eq!(pairs.iter().filter(|p| p.ell == -1).count(), 60);
        for p in &pairs {
            p.validate(&held).unwrap();
        }
    }
}
