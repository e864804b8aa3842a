//! The simulated substrate: a chain of qubits driven through one setting wire
//! per site and read through one outcome wire per site.
//!
//! The internal state is simulated as a pure-state trajectory: measurements
//! and depolarizing noise are sampled, so averaging over runs reproduces the
//! density-matrix statistics. Nothing about the state leaves this module.

use crate::error::{Error, Result};
use crate::gates::{cnot, hadamard, phase, swap, C64};
use nalgebra::{Matrix2, Matrix4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fmt::Write as _;

pub const DEFAULT_SITE_CAP: usize = 8;
pub const DEFAULT_ALPHABET: usize = 16;

pub type Setting = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RawOutcome {
    Null,
    Zero,
    One,
}

impl RawOutcome {
    pub fn symbol(self) -> char {
        match self {
            RawOutcome::Null => '.',
            RawOutcome::Zero => '0',
            RawOutcome::One => '1',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StuffPreset {
    Transparent,
    Permuted {
        seed: u64,
    },
    Dressed {
        seed: u64,
    },
    Noisy {
        rate: f64,
        seed: u64,
    },
    /// Every reset schedules a hidden bit flip on the same site `delay`
    /// steps later: a long-range memory that bounded probes cannot see.
    HiddenSignalling {
        delay: usize,
    },
}

#[derive(Debug, Clone)]
enum Action {
    NoOp,
    Single(Matrix2<C64>),
    Measure,
    Reset,
    /// Acts on `(site, site + 1)`, `site` most significant.
    Pair(Matrix4<C64>),
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn pauli_x() -> Matrix2<C64> {
    Matrix2::new(c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0))
}

fn pauli_y() -> Matrix2<C64> {
    Matrix2::new(c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0))
}

fn pauli_z() -> Matrix2<C64> {
    phase(PI)
}

fn ry(theta: f64) -> Matrix2<C64> {
    let (s, co) = (theta / 2.0).sin_cos();
    Matrix2::new(c(co, 0.0), c(-s, 0.0), c(s, 0.0), c(co, 0.0))
}

fn base_dictionary(alphabet: usize) -> Vec<Action> {
    let sqrt_x = Matrix2::new(c(0.5, 0.5), c(0.5, -0.5), c(0.5, -0.5), c(0.5, 0.5));
    let cnot_rev = {
        let mut m = Matrix4::zeros();
        for (i, j) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
            m[(i, j)] = c(1.0, 0.0);
        }
        m
    };
    let mut cz = Matrix4::identity();
    cz[(3, 3)] = c(-1.0, 0.0);
    let table = vec![
        Action::NoOp,
        Action::Single(hadamard()),
        Action::Single(phase(PI / 2.0)),
        Action::Single(phase(PI / 8.0)),
        Action::Single(pauli_x()),
        Action::Single(phase(-PI / 2.0)),
        Action::Measure,
        Action::Reset,
        Action::Pair(swap()),
        Action::Pair(cnot()),
        Action::Pair(cnot_rev),
        Action::Pair(cz),
        Action::Single(pauli_z()),
        Action::Single(pauli_y()),
        Action::Single(sqrt_x),
        Action::Single(phase(-PI / 8.0)),
    ];
    (0..alphabet)
        .map(|k| match table.get(k) {
            Some(a) => a.clone(),
            None => Action::Single(ry(PI * (k - table.len() + 1) as f64 / 8.0)),
        })
        .collect()
}

/// Names of the transparent dictionary, for traces and documentation.
pub const TRANSPARENT_NAMES: [&str; 16] = [
    "noop", "h", "p", "r", "x", "pdag", "measure", "reset", "swap", "cnot", "cnot-rev", "cz", "z",
    "y", "sqrt-x", "rdag",
];

/// Symbols of the transparent dictionary by role.
pub mod symbols {
    pub const NOOP: usize = 0;
    pub const H: usize = 1;
    pub const P: usize = 2;
    pub const R: usize = 3;
    pub const X: usize = 4;
    pub const MEASURE: usize = 6;
    pub const RESET: usize = 7;
    pub const SWAP: usize = 8;
    pub const CNOT: usize = 9;
}

fn haar_unitary(rng: &mut ChaCha8Rng) -> Matrix2<C64> {
    // Random Euler angles.
    let (a, b, g) = (
        rng.gen::<f64>() * 2.0 * PI,
        rng.gen::<f64>().acos() * 2.0,
        rng.gen::<f64>() * 2.0 * PI,
    );
    phase(a) * ry(b) * phase(g)
}

#[derive(Debug, Clone)]
pub struct StuffModel {
    n_sites: usize,
    alphabet: usize,
    dictionary: Vec<Action>,
    permutation: Vec<usize>,
    dressing: Option<Vec<Matrix2<C64>>>,
    noise_rate: f64,
    signal_delay: Option<usize>,
}

impl StuffModel {
    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    /// External symbol that triggers the k-th transparent action. Only the
    /// test harness uses this, to undo a permutation.
    pub fn symbol_for(&self, transparent: usize) -> usize {
        self.permutation
            .iter()
            .position(|&p| p == transparent)
            .unwrap_or(transparent)
    }
}

pub struct StuffInstance {
    model: StuffModel,
    psi: Vec<C64>,
    clock: usize,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    pending: Vec<(usize, usize)>,
    trace: Option<String>,
    branch: Option<Branch>,
}

/// Measurement control for exact branch enumeration.
#[derive(Debug, Clone)]
struct Branch {
    prefix: Vec<u8>,
    taken: Vec<f64>,
}

pub fn make_stuff(
    preset: StuffPreset,
    n_sites: usize,
    alphabet: usize,
    seed: u64,
) -> Result<StuffInstance> {
    make_stuff_with_cap(preset, n_sites, alphabet, seed, DEFAULT_SITE_CAP)
}

pub fn make_stuff_with_cap(
    preset: StuffPreset,
    n_sites: usize,
    alphabet: usize,
    seed: u64,
    cap: usize,
) -> Result<StuffInstance> {
    if n_sites == 0 || n_sites > cap {
        return Err(Error::Config(format!(
            "{n_sites} sites outside the simulation cap {cap}"
        )));
    }
    if alphabet == 0 {
        return Err(Error::Config("empty setting alphabet".into()));
    }
    let mut model = StuffModel {
        n_sites,
        alphabet,
        dictionary: base_dictionary(alphabet),
        permutation: (0..alphabet).collect(),
        dressing: None,
        noise_rate: 0.0,
        signal_delay: None,
    };
    let mut noise_seed = 0;
    match preset {
        StuffPreset::Transparent => {}
        StuffPreset::Permuted { seed: s } => {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            model.permutation.shuffle(&mut r);
        }
        StuffPreset::Dressed { seed: s } => {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            model.dressing = Some((0..n_sites).map(|_| haar_unitary(&mut r)).collect());
        }
        StuffPreset::Noisy { rate, seed: s } => {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("noise rate {rate} outside [0, 1]")));
            }
            model.noise_rate = rate;
            noise_seed = s ^ seed.rotate_left(17);
        }
        StuffPreset::HiddenSignalling { delay } => {
            model.signal_delay = Some(delay.max(1));
        }
    }
    let mut psi = vec![c(0.0, 0.0); 1 << n_sites];
    psi[0] = c(1.0, 0.0);
    Ok(StuffInstance {
        model,
        psi,
        clock: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        noise_rng: ChaCha8Rng::seed_from_u64(noise_seed),
        pending: Vec::new(),
        trace: None,
        branch: None,
    })
}

impl StuffInstance {
    pub fn model(&self) -> &StuffModel {
        &self.model
    }

    pub fn n_sites(&self) -> usize {
        self.model.n_sites
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    /// Deviation of the trajectory norm from one (diagnostics only).
    pub fn norm_error(&self) -> f64 {
        (self.psi.iter().map(|a| a.norm_sqr()).sum::<f64>() - 1.0).abs()
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(String::new());
    }

    pub fn take_trace(&mut self) -> Option<String> {
        self.trace.take()
    }

    pub fn reset(&mut self) {
        self.psi.iter_mut().for_each(|a| *a = c(0.0, 0.0));
        self.psi[0] = c(1.0, 0.0);
        self.clock = 0;
        self.pending.clear();
        self.branch = None;
    }

    /// Until the next reset, measurements return the bits of `prefix` and
    /// then 0, and record the probability of each returned bit instead of
    /// sampling. Noise is not enumerated, so noisy presets are refused.
    pub fn follow_branch(&mut self, prefix: Vec<u8>) -> Result<()> {
        if self.model.noise_rate > 0.0 {
            return Err(Error::Config(
                "branch enumeration needs a noiseless preset".into(),
            ));
        }
        self.branch = Some(Branch {
            prefix,
            taken: Vec::new(),
        });
        Ok(())
    }

    /// Probability of each measurement result along the followed branch.
    pub fn branch_probabilities(&self) -> Option<&[f64]> {
        self.branch.as_ref().map(|b| b.taken.as_slice())
    }

    pub fn step(&mut self, settings: &[Setting]) -> Result<Vec<RawOutcome>> {
        let n = self.model.n_sites;
        if settings.len() != n {
            return Err(Error::LengthMismatch {
                got: settings.len(),
                expected: n,
            });
        }
        for (site, &s) in settings.iter().enumerate() {
            if s >= self.model.alphabet {
                return Err(Error::InvalidSetting {
                    site,
                    setting: s,
                    alphabet: self.model.alphabet,
                });
            }
        }
        let mut out = vec![RawOutcome::Null; n];
        let actions: Vec<Action> = settings
            .iter()
            .map(|&s| self.model.dictionary[self.model.permutation[s]].clone())
            .collect();
        let wants_pair = |k: usize| matches!(actions[k], Action::Pair(_));
        for site in 0..n {
            let action = actions[site].clone();
            // A pair request loses to a pair request on its left neighbour.
            if wants_pair(site) && site > 0 && wants_pair(site - 1) {
                continue;
            }
            let acted: &[usize] = match action {
                Action::NoOp => &[],
                Action::Single(u) => {
                    let u = self.dress(site, &u);
                    self.apply_single(site, &u);
                    &[0]
                }
                Action::Measure => {
                    self.undress(site);
                    let bit = self.measure(site);
                    self.redress(site);
                    out[site] = if bit == 0 {
                        RawOutcome::Zero
                    } else {
                        RawOutcome::One
                    };
                    &[0]
                }
                Action::Reset => {
                    self.undress(site);
                    if self.measure(site) == 1 {
                        self.apply_single(site, &pauli_x());
                    }
                    self.redress(site);
                    if let Some(d) = self.model.signal_delay {
                        self.pending.push((self.clock + d, site));
                    }
                    &[0]
                }
                Action::Pair(v) => {
                    if site + 1 >= n {
                        &[]
                    } else {
                        self.undress(site);
                        self.undress(site + 1);
                        self.apply_pair(site, &v);
                        self.redress(site);
                        self.redress(site + 1);
                        &[0, 1]
                    }
                }
            };
            if self.model.noise_rate > 0.0 {
                for &k in acted {
                    if self.noise_rng.gen::<f64>() < self.model.noise_rate {
                        let p = match self.noise_rng.gen_range(0..3) {
                            0 => pauli_x(),
                            1 => pauli_y(),
                            _ => pauli_z(),
                        };
                        self.apply_single(site + k, &p);
                    }
                }
            }
        }
        let now = self.clock;
        let due: Vec<usize> = self
            .pending
            .iter()
            .filter(|p| p.0 == now)
            .map(|p| p.1)
            .collect();
        self.pending.retain(|p| p.0 != now);
        for site in due {
            self.apply_single(site, &pauli_x());
        }
        debug_assert!(self.norm_error() < 1e-9);
        if let Some(tr) = self.trace.as_mut() {
            let s: Vec<String> = settings.iter().map(|s| s.to_string()).collect();
            let o: String = out.iter().map(|o| o.symbol()).collect();
            let _ = writeln!(tr, "{now} {} {o}", s.join(","));
        }
        self.clock += 1;
        Ok(out)
    }

    fn dress(&self, site: usize, u: &Matrix2<C64>) -> Matrix2<C64> {
        match &self.model.dressing {
            Some(d) => d[site] * u * d[site].adjoint(),
            None => *u,
        }
    }

    fn undress(&mut self, site: usize) {
        if let Some(d) = &self.model.dressing {
            let m = d[site].adjoint();
            self.apply_single(site, &m);
        }
    }

    fn redress(&mut self, site: usize) {
        if let Some(d) = &self.model.dressing {
            let m = d[site];
            self.apply_single(site, &m);
        }
    }

    fn apply_single(&mut self, site: usize, u: &Matrix2<C64>) {
        let b = 1usize << site;
        for i in 0..self.psi.len() {
            if i & b == 0 {
                let (a0, a1) = (self.psi[i], self.psi[i | b]);
                self.psi[i] = u[(0, 0)] * a0 + u[(0, 1)] * a1;
                self.psi[i | b] = u[(1, 0)] * a0 + u[(1, 1)] * a1;
            }
        }
    }

    fn apply_pair(&mut self, site: usize, v: &Matrix4<C64>) {
        let (bl, br) = (1usize << site, 1usize << (site + 1));
        for i in 0..self.psi.len() {
            if i & (bl | br) == 0 {
                let idx = [i, i | br, i | bl, i | bl | br];
                let a: [C64; 4] = std::array::from_fn(|k| self.psi[idx[k]]);
                for m in 0..4 {
                    let mut s = c(0.0, 0.0);
                    for k in 0..4 {
                        s += v[(m, k)] * a[k];
                    }
                    self.psi[idx[m]] = s;
                }
            }
        }
    }

    fn measure(&mut self, site: usize) -> u8 {
        let b = 1usize << site;
        let p1: f64 = self
            .psi
            .iter()
            .enumerate()
            .filter(|(i, _)| i & b != 0)
            .map(|(_, a)| a.norm_sqr())
            .sum();
        let mut bit = u8::from(self.rng.gen::<f64>() < p1);
        if let Some(br) = self.branch.as_mut() {
            bit = br.prefix.get(br.taken.len()).copied().unwrap_or(0);
            let p = if bit == 1 { p1 } else { 1.0 - p1 };
            br.taken.push(p);
            // A null branch carries zero weight; keep the state normalized.
            if p < 1e-12 {
                bit ^= 1;
            }
        }
        let keep = if bit == 1 { p1 } else { 1.0 - p1 };
        let scale = 1.0 / keep.max(1e-300).sqrt();
        for (i, a) in self.psi.iter_mut().enumerate() {
            if ((i & b != 0) as u8) == bit {
                *a *= scale;
            } else {
                *a = c(0.0, 0.0);
            }
        }
        bit
    }
}
