//! Flat `section.key = value` run configuration.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use stuffml::circuits::{RandomCircuitConfig, Strategy};
use stuffml::codec::{DecoderKind, MemoryStrategy, NullEncoding};
use stuffml::lattice::{build_tesselation, gate_adjacency, GateLattice, Tesselation};
use stuffml::nets::OptimizerKind;
use stuffml::stuff::StuffPreset;
use stuffml::tomography::BoundednessConfig;
use stuffml::training::{mix, Baseline, ErrKind, GradientMode, StuffSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// Zero for cross-field validation failures.
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "config line {}: {}", self.line, self.msg)
        } else {
            write!(f, "config: {}", self.msg)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    Transparent,
    Permuted,
    Dressed,
    Noisy,
    HiddenSignalling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSource {
    /// Single-gate circuits on the spine rows in `train.rows`.
    SingleOctagon,
    /// Draws from the random-circuit generator.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TomographySource {
    Oracle,
    Exact,
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lattice: [usize; 5],
    pub preset: PresetName,
    pub stuff_seed: u64,
    pub noise_rate: f64,
    pub signal_delay: usize,
    pub stuff_sites: usize,
    pub stuff_alphabet: usize,
    pub net_alphabet: usize,
    pub hidden: Vec<usize>,
    pub d_m: usize,
    pub decoder: DecoderKind,
    pub decoder_hidden: Vec<usize>,
    pub null: NullEncoding,
    pub net_seed: u64,
    pub train: TrainConfig,
    pub train_source: TrainSource,
    pub train_rows: Vec<i64>,
    pub heldout_row: i64,
    pub checkpoint_every: usize,
    pub strategy: Strategy,
    pub mean_gate_count: f64,
    pub circuit_count: usize,
    pub circuit_seed: u64,
    pub max_retries: usize,
    pub tomography: BoundednessConfig,
    pub tomography_source: TomographySource,
    pub tomography_m: usize,
    pub tomography_seed: u64,
    pub tomography_tests: usize,
    pub tomography_long_rows: usize,
    pub ladder: Vec<usize>,
    pub circuits_per_size: usize,
    pub conjecture_m: usize,
    pub conjecture_epsilon: f64,
    pub conjecture_seed: u64,
    pub root_seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
}

#[derive(Default)]
struct Raw {
    seeds: [Option<u64>; 6],
    stuff_sites: Option<usize>,
}

const SEED_KEYS: [&str; 6] = [
    "stuff.seed",
    "net.seed",
    "train.seed",
    "circuits.seed",
    "tomography.seed",
    "conjecture1.seed",
];

impl Default for RunConfig {
    fn default() -> Self {
        parse_str("").expect("defaults are valid")
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| format!("bad list entry `{}`", p.trim()))
        })
        .collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad number `{v}`"))
}

impl RunConfig {
    fn blank() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            lattice: [8, 12, 4, 4, 1],
            preset: PresetName::Transparent,
            stuff_seed: 0,
            noise_rate: 0.01,
            signal_delay: 16,
            stuff_sites: 0,
            stuff_alphabet: 16,
            net_alphabet: 16,
            hidden: vec![32],
            d_m: 8,
            decoder: DecoderKind::Gated,
            decoder_hidden: Vec::new(),
            null: NullEncoding::Trainable,
            net_seed: 0,
            train: TrainConfig {
                eval_m: 128,
                ..train
            },
            train_source: TrainSource::SingleOctagon,
            train_rows: vec![1, 3],
            heldout_row: 3,
            checkpoint_every: 0,
            strategy: Strategy::GrowFromPrep,
            mean_gate_count: 6.0,
            circuit_count: 10,
            circuit_seed: 0,
            max_retries: 10_000,
            tomography: BoundednessConfig::default(),
            tomography_source: TomographySource::Oracle,
            tomography_m: 4096,
            tomography_seed: 0,
            tomography_tests: 8,
            tomography_long_rows: 0,
            ladder: vec![8, 10, 12],
            circuits_per_size: 10,
            conjecture_m: 256,
            conjecture_epsilon: 1e-2,
            conjecture_seed: 0,
            root_seed: 0,
            out_dir: PathBuf::from("out"),
            workers: 1,
        }
    }

    fn set(&mut self, raw: &mut Raw, key: &str, v: &str) -> Result<(), String> {
        if let Some(k) = SEED_KEYS.iter().position(|&s| s == key) {
            raw.seeds[k] = Some(num(v)?);
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "lattice.l" => self.lattice[0] = num(v)?,
            "lattice.t" => self.lattice[1] = num(v)?,
            "lattice.px" => self.lattice[2] = num(v)?,
            "lattice.pt" => self.lattice[3] = num(v)?,
            "lattice.c" => self.lattice[4] = num(v)?,
            "stuff.preset" => {
                self.preset = match v {
                    "transparent" => PresetName::Transparent,
                    "permuted" => PresetName::Permuted,
                    "dressed" => PresetName::Dressed,
                    "noisy" => PresetName::Noisy,
                    "hidden-signalling" => PresetName::HiddenSignalling,
                    _ => return Err(format!("unknown preset `{v}`")),
                }
            }
            "stuff.rate" => self.noise_rate = num(v)?,
            "stuff.delay" => self.signal_delay = num(v)?,
            "stuff.sites" => raw.stuff_sites = Some(num(v)?),
            "stuff.alphabet" => self.stuff_alphabet = num(v)?,
            "net.alphabet" => self.net_alphabet = num(v)?,
            "net.hidden" => self.hidden = list(v)?,
            "net.d_m" => self.d_m = num(v)?,
            "net.decoder" => {
                self.decoder = match v {
                    "gated" => DecoderKind::Gated,
                    "mlp" => DecoderKind::Mlp,
                    _ => return Err(format!("unknown decoder `{v}`")),
                }
            }
            "net.decoder_hidden" => self.decoder_hidden = list(v)?,
            "net.null" => {
                self.null = match v {
                    "trainable" => NullEncoding::Trainable,
                    "frozen" => NullEncoding::Frozen,
                    _ => return Err(format!("unknown null encoding `{v}`")),
                }
            }
            "train.m" => t.m = num(v)?,
            "train.eval_m" => t.eval_m = num(v)?,
            "train.iterations" => t.iterations = num(v)?,
            "train.epsilon" => t.epsilon = num(v)?,
            "train.eval_every" => t.eval_every = num(v)?,
            "train.lr_encoder" => t.lr_encoder = num(v)?,
            "train.lr_decoder" => t.lr_decoder = num(v)?,
            "train.optimizer" => {
                t.optimizer = match v {
                    "adam" => OptimizerKind::adam(),
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(format!("unknown optimizer `{v}`")),
                }
            }
            "train.err" => {
                t.err = match v {
                    "squared" => ErrKind::SquaredDifference,
                    "abs-squares" => ErrKind::AbsSquares,
                    _ => return Err(format!("unknown err `{v}`")),
                }
            }
            "train.baseline" => {
                t.baseline = match v {
                    "leave-one-out" => Baseline::LeaveOneOut,
                    "none" => Baseline::None,
                    _ => match v.strip_prefix("moving-average:") {
                        Some(d) => Baseline::MovingAverage { decay: num(d)? },
                        None => return Err(format!("unknown baseline `{v}`")),
                    },
                }
            }
            "train.gradient" => {
                t.gradient = match v {
                    "score" => GradientMode::ScoreFunction,
                    _ => match v.strip_prefix("spsa:") {
                        Some(c) => GradientMode::Spsa { c: num(c)? },
                        None => return Err(format!("unknown gradient mode `{v}`")),
                    },
                }
            }
            "train.clip" => t.clip = if v == "none" { None } else { Some(num(v)?) },
            "train.entropy" => t.entropy = num(v)?,
            "train.source" => {
                self.train_source = match v {
                    "single-octagon" => TrainSource::SingleOctagon,
                    "random" => TrainSource::Random,
                    _ => return Err(format!("unknown training source `{v}`")),
                }
            }
            "train.rows" => self.train_rows = list(v)?,
            "train.heldout_row" => self.heldout_row = num(v)?,
            "train.checkpoint_every" => self.checkpoint_every = num(v)?,
            "memory.strategy" => {
                t.strategy = match v {
                    "rasterized" => MemoryStrategy::Rasterized,
                    _ => match v.strip_prefix("causal:") {
                        Some(s) => MemoryStrategy::Causal { s: num(s)? },
                        None => return Err(format!("unknown memory strategy `{v}`")),
                    },
                }
            }
            "circuits.strategy" => {
                self.strategy = match v {
                    "grow" => Strategy::GrowFromPrep,
                    "outside-in" => Strategy::OutsideIn,
                    _ => return Err(format!("unknown circuit strategy `{v}`")),
                }
            }
            "circuits.mean" => self.mean_gate_count = num(v)?,
            "circuits.count" => self.circuit_count = num(v)?,
            "circuits.max_retries" => self.max_retries = num(v)?,
            "tomography.box_rows" => self.tomography.box_rows = num(v)?,
            "tomography.rank_tol" => self.tomography.rank_tol = num(v)?,
            "tomography.probe_budget" => self.tomography.probe_budget = num(v)?,
            "tomography.failure_threshold" => self.tomography.failure_threshold = num(v)?,
            "tomography.source" => {
                self.tomography_source = match v {
                    "oracle" => TomographySource::Oracle,
                    "exact" => TomographySource::Exact,
                    "empirical" => TomographySource::Empirical,
                    _ => return Err(format!("unknown tomography source `{v}`")),
                }
            }
            "tomography.m" => self.tomography_m = num(v)?,
            "tomography.tests" => self.tomography_tests = num(v)?,
            "tomography.long_rows" => self.tomography_long_rows = num(v)?,
            "conjecture1.ladder" => self.ladder = list(v)?,
            "conjecture1.circuits_per_size" => self.circuits_per_size = num(v)?,
            "conjecture1.m" => self.conjecture_m = num(v)?,
            "conjecture1.epsilon" => self.conjecture_epsilon = num(v)?,
            "run.seed" => self.root_seed = num(v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "run.workers" => self.workers = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn finish(&mut self, raw: Raw) {
        // Unset component seeds split from the root seed.
        let seeds: Vec<u64> = (0..SEED_KEYS.len())
            .map(|k| raw.seeds[k].unwrap_or_else(|| mix(self.root_seed, 100 + k as u64, 0)))
            .collect();
        self.stuff_seed = seeds[0];
        self.net_seed = seeds[1];
        self.train.seed = seeds[2];
        self.circuit_seed = seeds[3];
        self.tomography_seed = seeds[4];
        self.conjecture_seed = seeds[5];
        self.stuff_sites = raw.stuff_sites.unwrap_or(self.lattice[0]);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError { line: 0, msg });
        if self.net_alphabet != self.stuff_alphabet {
            return bad(format!(
                "net.alphabet ({}) does not match stuff.alphabet ({})",
                self.net_alphabet, self.stuff_alphabet
            ));
        }
        if self.stuff_sites < self.lattice[0] {
            return bad(format!(
                "stuff.sites ({}) is smaller than lattice.l ({})",
                self.stuff_sites, self.lattice[0]
            ));
        }
        let [l, t, px, pt, c] = self.lattice;
        if let Err(e) = build_tesselation(l, t, px, pt, c) {
            return bad(format!("lattice: {e}"));
        }
        let t = &self.train;
        if t.m == 0 || t.eval_m == 0 || t.eval_every == 0 {
            return bad("train.m, train.eval_m and train.eval_every must be positive".into());
        }
        if let MemoryStrategy::Causal { s: 0 } = t.strategy {
            return bad("memory.strategy causal width must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("run.workers must be at least 1".into());
        }
        if self.mean_gate_count < 1.0 {
            return bad("circuits.mean must be at least 1".into());
        }
        if self.train_rows.is_empty() {
            return bad("train.rows is empty".into());
        }
        if self.tomography.box_rows == 0 || self.tomography.probe_budget == 0 {
            return bad("tomography.box_rows and tomography.probe_budget must be positive".into());
        }
        if self.ladder.is_empty()
            || self.circuits_per_size == 0
            || self.conjecture_m == 0
            || self.tomography_m == 0
        {
            return bad("conjecture1 ladder, sizes and episode counts must be non-empty".into());
        }
        Ok(())
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let names = ["l", "t", "px", "pt", "c"];
        for (n, v) in names.iter().zip(self.lattice) {
            kv(&format!("lattice.{n}"), v.to_string());
        }
        kv(
            "stuff.preset",
            match self.preset {
                PresetName::Transparent => "transparent",
                PresetName::Permuted => "permuted",
                PresetName::Dressed => "dressed",
                PresetName::Noisy => "noisy",
                PresetName::HiddenSignalling => "hidden-signalling",
            }
            .into(),
        );
        kv("stuff.seed", self.stuff_seed.to_string());
        kv("stuff.rate", format!("{:?}", self.noise_rate));
        kv("stuff.delay", self.signal_delay.to_string());
        kv("stuff.sites", self.stuff_sites.to_string());
        kv("stuff.alphabet", self.stuff_alphabet.to_string());
        kv("net.alphabet", self.net_alphabet.to_string());
        kv("net.hidden", join(&self.hidden));
        kv("net.d_m", self.d_m.to_string());
        kv(
            "net.decoder",
            if self.decoder == DecoderKind::Gated {
                "gated"
            } else {
                "mlp"
            }
            .into(),
        );
        kv("net.decoder_hidden", join(&self.decoder_hidden));
        kv(
            "net.null",
            if self.null == NullEncoding::Trainable {
                "trainable"
            } else {
                "frozen"
            }
            .into(),
        );
        kv("net.seed", self.net_seed.to_string());
        kv("train.m", t.m.to_string());
        kv("train.eval_m", t.eval_m.to_string());
        kv("train.iterations", t.iterations.to_string());
        kv("train.epsilon", format!("{:?}", t.epsilon));
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.lr_encoder", format!("{:?}", t.lr_encoder));
        kv("train.lr_decoder", format!("{:?}", t.lr_decoder));
        kv(
            "train.optimizer",
            if t.optimizer == OptimizerKind::Sgd {
                "sgd"
            } else {
                "adam"
            }
            .into(),
        );
        kv("train.seed", t.seed.to_string());
        kv(
            "train.err",
            if t.err == ErrKind::SquaredDifference {
                "squared"
            } else {
                "abs-squares"
            }
            .into(),
        );
        kv(
            "train.baseline",
            match t.baseline {
                Baseline::LeaveOneOut => "leave-one-out".into(),
                Baseline::None => "none".into(),
                Baseline::MovingAverage { decay } => format!("moving-average:{decay:?}"),
            },
        );
        kv(
            "train.gradient",
            match t.gradient {
                GradientMode::ScoreFunction => "score".into(),
                GradientMode::Spsa { c } => format!("spsa:{c:?}"),
            },
        );
        kv(
            "train.clip",
            t.clip.map_or("none".into(), |c| format!("{c:?}")),
        );
        kv("train.entropy", format!("{:?}", t.entropy));
        kv(
            "train.source",
            if self.train_source == TrainSource::SingleOctagon {
                "single-octagon"
            } else {
                "random"
            }
            .into(),
        );
        kv("train.rows", join(&self.train_rows));
        kv("train.heldout_row", self.heldout_row.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv(
            "memory.strategy",
            match t.strategy {
                MemoryStrategy::Rasterized => "rasterized".into(),
                MemoryStrategy::Causal { s } => format!("causal:{s}"),
            },
        );
        kv(
            "circuits.strategy",
            if self.strategy == Strategy::GrowFromPrep {
                "grow"
            } else {
                "outside-in"
            }
            .into(),
        );
        kv("circuits.mean", format!("{:?}", self.mean_gate_count));
        kv("circuits.count", self.circuit_count.to_string());
        kv("circuits.seed", self.circuit_seed.to_string());
        kv("circuits.max_retries", self.max_retries.to_string());
        kv("tomography.box_rows", self.tomography.box_rows.to_string());
        kv(
            "tomography.rank_tol",
            format!("{:?}", self.tomography.rank_tol),
        );
        kv(
            "tomography.probe_budget",
            self.tomography.probe_budget.to_string(),
        );
        kv(
            "tomography.failure_threshold",
            format!("{:?}", self.tomography.failure_threshold),
        );
        kv(
            "tomography.source",
            match self.tomography_source {
                TomographySource::Oracle => "oracle",
                TomographySource::Exact => "exact",
                TomographySource::Empirical => "empirical",
            }
            .into(),
        );
        kv("tomography.m", self.tomography_m.to_string());
        kv("tomography.seed", self.tomography_seed.to_string());
        kv("tomography.tests", self.tomography_tests.to_string());
        kv(
            "tomography.long_rows",
            self.tomography_long_rows.to_string(),
        );
        kv("conjecture1.ladder", join(&self.ladder));
        kv(
            "conjecture1.circuits_per_size",
            self.circuits_per_size.to_string(),
        );
        kv("conjecture1.m", self.conjecture_m.to_string());
        kv(
            "conjecture1.epsilon",
            format!("{:?}", self.conjecture_epsilon),
        );
        kv("conjecture1.seed", self.conjecture_seed.to_string());
        kv("run.seed", self.root_seed.to_string());
        kv("run.out_dir", self.out_dir.display().to_string());
        kv("run.workers", self.workers.to_string());
        s
    }

    pub fn lattice(&self) -> stuffml::Result<(Tesselation, GateLattice)> {
        let [l, t, px, pt, c] = self.lattice;
        let tess = build_tesselation(l, t, px, pt, c)?;
        let gl = gate_adjacency(&tess);
        Ok((tess, gl))
    }

    pub fn stuff(&self) -> StuffSpec {
        let seed = self.stuff_seed;
        let preset = match self.preset {
            PresetName::Transparent => StuffPreset::Transparent,
            PresetName::Permuted => StuffPreset::Permuted { seed },
            PresetName::Dressed => StuffPreset::Dressed { seed },
            PresetName::Noisy => StuffPreset::Noisy {
                rate: self.noise_rate,
                seed,
            },
            PresetName::HiddenSignalling => StuffPreset::HiddenSignalling {
                delay: self.signal_delay,
            },
        };
        StuffSpec {
            preset,
            n_sites: self.stuff_sites,
            alphabet: self.stuff_alphabet,
        }
    }

    pub fn sampler(&self, tess: &Tesselation) -> RandomCircuitConfig {
        RandomCircuitConfig {
            max_retries: self.max_retries,
            ..RandomCircuitConfig::whole(
                tess,
                self.strategy,
                self.mean_gate_count,
                self.circuit_seed,
            )
        }
    }

    /// Applies `STUFFML_OUT_DIR` and `STUFFML_WORKERS`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(d) = get("STUFFML_OUT_DIR") {
            self.out_dir = PathBuf::from(d);
        }
        if let Some(w) = get("STUFFML_WORKERS") {
            self.workers = w.parse().map_err(|_| ConfigError {
                line: 0,
                msg: format!("STUFFML_WORKERS `{w}` is not a count"),
            })?;
        }
        self.validate()
    }
}

pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::blank();
    let mut raw = Raw::default();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ConfigError { line: i + 1, msg };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`".into()))?;
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(err(format!("duplicate key `{k}`")));
        }
        cfg.set(&mut raw, k, v).map_err(err)?;
    }
    cfg.finish(raw);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: 0,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_str(&text)
}
