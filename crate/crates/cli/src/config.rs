//! Experiment configs: a documented key set per subcommand, `key=value` files
//! and the `# config:` header line written at the top of every CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{CliError, Result};

pub const HEADER_PREFIX: &str = "# config: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default, help }
}

const SPECTRUM: &[KeySpec] = &[
    key("L", "8", "lattice length"),
    key("h", "1", "stencil scale"),
    key("boundary", "neumann-reflect", "neumann-reflect or replicate-clamp"),
    key("tol", "1e-10", "largest allowed |closed form - dense| eigenvalue gap"),
];

const STABILITY: &[KeySpec] = &[
    key("L", "32", "lattice length"),
    key("d", "4", "channels"),
    key("alpha", "0.49", "diffusion coefficient"),
    key("h", "1", "stencil scale"),
    key("fields", "100", "random fields to step"),
    key("steps", "1000", "steps per field"),
    key("mode_steps", "10", "steps applied to the highest cosine mode"),
    key("tol", "1e-10", "relative energy increase counted as a violation"),
    key("seed", "0", "RNG seed"),
];

const HEATKERNEL: &[KeySpec] = &[
    key("L", "64", "lattice length"),
    key("times", "1,4,16", "diffusion times t"),
    key("s", "2", "second time for the semigroup check"),
    key("envelope_L", "256", "lattice length for the Gaussian envelope fit"),
    key("envelope_t", "32", "time for the Gaussian envelope fit"),
];

const FITSCALES: &[KeySpec] = &[
    key("scale_sets", "1;1,2;1,2,4;1,2,4,8", "semicolon-separated scale sets"),
    key("omega_max", "1.5707963267948966", "upper end of the fitted band"),
    key("grid", "512", "grid points on [0, omega_max]"),
];

const FLOW: &[KeySpec] = &[
    key("L", "32", "lattice length"),
    key("d", "2", "channels"),
    key(
        "potential",
        "quadratic",
        "quadratic, anchored-quadratic or double-well-anchored",
    ),
    key("mu", "1", "reaction strength"),
    key("lambda", "0", "anchor strength"),
    key("alpha_diff", "0.5", "diffusion weight"),
    key("beta", "0", "nonlocal coupling strength (random symmetric kernel)"),
    key("dt", "0.05", "time step"),
    key("steps", "400", "explicit Euler steps"),
    key("seed", "0", "RNG seed"),
];

const SYNC: &[KeySpec] = &[
    key("heads", "4", "number of coupled heads"),
    key("topology", "ring", "ring, pairs or complete"),
    key("coupling", "0.2", "edge weight"),
    key("L", "16", "lattice length"),
    key("d", "2", "channels"),
    key("alpha", "0.2", "per-head diffusion coefficient"),
    key("mu", "0", "per-head quadratic reaction strength; 0 disables it"),
    key("dt", "1", "time step"),
    key("steps", "200", "steps"),
    key("seed", "0", "RNG seed"),
];

const GRADCHECK: &[KeySpec] = &[
    key("L", "16", "lattice length"),
    key("d", "8", "channels"),
    key("trials", "20", "random cases"),
    key("post_norm", "false", "apply the parameter-free LayerNorm"),
    key("scales", "1,2,4", "stencil scales"),
    key("mix_weights", "1,0.6,0.3", "per-scale mix weights"),
    key("alpha", "0.1", "initial coefficient"),
    key("tol", "1e-5", "largest allowed relative error"),
    key("seed", "0", "RNG seed"),
];

const DATA: &[KeySpec] = &[
    key("task", "listops-mini", "listops-mini or denoise-1d"),
    key("train_size", "10000", "training examples"),
    key("val_size", "1000", "validation examples"),
    key("data_seed", "0", "dataset seed"),
];

const MODEL: &[KeySpec] = &[
    key("dim", "64", "model width"),
    key("layers", "2", "transformer blocks"),
    key("heads", "4", "attention heads"),
    key("mlp_hidden", "256", "MLP hidden width"),
    key("dropout", "0.1", "residual dropout"),
    key("pde_scales", "1,2,4", "diffusion scales"),
    key("pde_mix", "1,0.6,0.3", "diffusion mix weights"),
    key("pde_alpha", "0.1", "initial diffusion coefficient"),
    key("post_norm", "false", "LayerNorm after the diffusion layer"),
    key("boundary", "neumann-reflect", "neumann-reflect or replicate-clamp"),
    key(
        "identity_limit",
        "false",
        "start diffusion at the identity limit and freeze it",
    ),
];

const OPTIM: &[KeySpec] = &[
    key("seed", "0", "model and training seed"),
    key("epochs", "20", "maximum epochs"),
    key("batch", "32", "mini-batch size"),
    key("lr", "0.05", "learning rate"),
    key("optimizer", "sgd-momentum", "sgd-momentum or adamw"),
    key("momentum", "0.9", "SGD momentum"),
    key("weight_decay", "0.01", "AdamW decoupled weight decay"),
    key("clip", "1", "global gradient-norm clip; none disables"),
    key(
        "warmup",
        "none",
        "warmup fraction for warmup+cosine; none keeps lr constant",
    ),
    key("freeze_pde", "false", "do not train diffusion parameters"),
    key("target_acc", "none", "stop once validation accuracy reaches this"),
];

const TRAIN_ONLY: &[KeySpec] = &[key("position", "none", "integration position")];

const RANK_ONLY: &[KeySpec] = &[
    key("seeds", "0,1,2", "seeds; at least three"),
    key("positions", "all", "comma-separated positions or all"),
    key("jobs", "1", "parallel training jobs; forced to 1 in deterministic mode"),
];

const RETENTION: &[KeySpec] = &[
    key("depth", "4", "chain depth N"),
    key("trials", "5000", "samples per depth"),
    key("bins", "16", "histogram bins"),
    key("flip_prob", "0.1", "per-step symbol flip probability"),
    key("len", "33", "sequence length (odd)"),
    key("seed", "0", "data seed of the first repetition"),
    key("projection_seed", "7", "seed of the fixed projection"),
    key("repetitions", "1", "independent repetitions"),
    key("scales", "1,2,4", "smoothing layer scales"),
    key("mix_weights", "1,0.6,0.3", "smoothing layer mix weights"),
    key("alpha", "0.1", "smoothing layer coefficient"),
];

const BENCH: &[KeySpec] = &[
    key("lengths", "256,512,1024,2048,4096,8192", "diffusion lattice lengths"),
    key(
        "attention_lengths",
        "256,512,1024,2048,4096",
        "reference attention lengths",
    ),
    key("d", "64", "channels"),
    key("K", "3", "number of scales (powers of two)"),
    key("k_length", "4096", "length for the K-doubling ratio"),
    key("reps", "7", "timed repetitions per point"),
    key(
        "min_sample_ms",
        "10",
        "inner iterations grow until one sample lasts this long",
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Command {
    Spectrum,
    Stability,
    Heatkernel,
    Fitscales,
    Flow,
    Sync,
    Gradcheck,
    Train,
    RankPositions,
    Retention,
    BenchComplexity,
}

impl Command {
    pub const ALL: [Command; 11] = [
        Command::Spectrum,
        Command::Stability,
        Command::Heatkernel,
        Command::Fitscales,
        Command::Flow,
        Command::Sync,
        Command::Gradcheck,
        Command::Train,
        Command::RankPositions,
        Command::Retention,
        Command::BenchComplexity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Stability => "stability",
            Command::Heatkernel => "heatkernel",
            Command::Fitscales => "fitscales",
            Command::Flow => "flow",
            Command::Sync => "sync",
            Command::Gradcheck => "gradcheck",
            Command::Train => "train",
            Command::RankPositions => "rank-positions",
            Command::Retention => "retention",
            Command::BenchComplexity => "bench-complexity",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::Spectrum => "Closed-form Laplacian eigenvalues against a dense eigensolver",
            Command::Stability => "Dirichlet energy under repeated diffusion steps",
            Command::Heatkernel => "Heat-kernel row sums, positivity, semigroup and Gaussian envelope",
            Command::Fitscales => "Least-squares multi-scale fit of the continuum symbol",
            Command::Flow => "Reaction-diffusion gradient flow energy trace",
            Command::Sync => "Coupled-head consensus disagreement trace",
            Command::Gradcheck => "Finite-difference check of the diffusion layer backward pass",
            Command::Train => "Train the toy transformer on a synthetic task",
            Command::RankPositions => "Rank all integration positions over several seeds",
            Command::Retention => "Label-information retention along a noisy chain",
            Command::BenchComplexity => "Scaling of diffusion against quadratic attention",
        }
    }

    pub fn keys(self) -> Vec<KeySpec> {
        let parts: &[&[KeySpec]] = match self {
            Command::Spectrum => &[SPECTRUM],
            Command::Stability => &[STABILITY],
            Command::Heatkernel => &[HEATKERNEL],
            Command::Fitscales => &[FITSCALES],
            Command::Flow => &[FLOW],
            Command::Sync => &[SYNC],
            Command::Gradcheck => &[GRADCHECK],
            Command::Train => &[DATA, MODEL, OPTIM, TRAIN_ONLY],
            Command::RankPositions => &[DATA, MODEL, OPTIM, RANK_ONLY],
            Command::Retention => &[RETENTION],
            Command::BenchComplexity => &[BENCH],
        };
        parts.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CliError::UnknownCommand(s.to_string()))
    }
}

/// A subcommand with a value for every one of its keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    command: Command,
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    /// All keys at their defaults.
    pub fn new(command: Command) -> Self {
        let values = command
            .keys()
            .into_iter()
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        Self { command, values }
    }

    pub fn command(&self) -> Command {
        self.command
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if value.is_empty() || value.contains(char::is_whitespace) {
            return Err(CliError::InvalidValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: "values must be non-empty and contain no whitespace".into(),
            });
        }
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(CliError::UnknownKey {
                command: self.command.as_str().to_string(),
                key: key.to_string(),
            }),
        }
    }

    /// Applies a `key = value` file; blank lines and `#` comments are skipped.
    /// An optional `command` key must name this subcommand.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        let mut seen = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Parse {
                line: i + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "command" {
                if v != self.command.as_str() {
                    return Err(CliError::Parse {
                        line: i + 1,
                        message: format!("config is for '{v}', not '{}'", self.command),
                    });
                }
            } else {
                self.set(k, v)?;
            }
            seen += 1;
        }
        if seen == 0 {
            return Err(CliError::EmptyConfig);
        }
        Ok(())
    }

    /// `# config: command=<name> key=value ...` with keys sorted.
    pub fn header(&self) -> String {
        let mut out = format!("{HEADER_PREFIX}command={}", self.command);
        for (k, v) in &self.values {
            out.push(' ');
            out.push_str(k);
            out.push('=');
            out.push_str(v);
        }
        out
    }

    /// Inverse of [`ExperimentConfig::header`]; every key must be present.
    pub fn from_header(line: &str) -> Result<Self> {
        let body = line
            .trim_end()
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| CliError::Parse {
                line: 1,
                message: "missing '# config:' prefix".into(),
            })?;
        let mut tokens = body.split(' ');
        let command = tokens
            .next()
            .and_then(|t| t.strip_prefix("command="))
            .ok_or_else(|| CliError::Parse {
                line: 1,
                message: "header must start with command=".into(),
            })?
            .parse::<Command>()?;
        let mut cfg = Self::new(command);
        let mut seen = 0;
        for t in tokens {
            let (k, v) = t.split_once('=').ok_or_else(|| CliError::Parse {
                line: 1,
                message: format!("bad header entry '{t}'"),
            })?;
            cfg.set(k, v)?;
            seen += 1;
        }
        if seen != cfg.values.len() {
            return Err(CliError::Parse {
                line: 1,
                message: format!("header lists {seen} of {} keys", cfg.values.len()),
            });
        }
        Ok(cfg)
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("'{key}' is not a key of {}", self.command))
    }

    fn invalid(&self, key: &str, reason: impl fmt::Display) -> CliError {
        CliError::InvalidValue {
            key: key.to_string(),
            value: self.raw(key).to_string(),
            reason: reason.to_string(),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.raw(key).parse().map_err(|e| self.invalid(key, e))
    }

    /// `none` maps to `None`.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(|t| t.parse().map_err(|e| self.invalid(key, e)))
            .collect()
    }

    /// Semicolon-separated groups of comma-separated values.
    pub fn get_groups<T: FromStr>(&self, key: &str) -> Result<Vec<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .split(';')
            .map(|g| {
                g.split(',')
                    .map(|t| t.parse().map_err(|e| self.invalid(key, e)))
                    .collect()
            })
            .collect()
    }
}
