//! Losses between observed and ideal circuit probabilities and the training
//! loop. Encoder gradients cross the stuff with the score-function estimator;
//! the decoder is trained by exact backprop through its assigned
//! probabilities.

use crate::circuits::{validate_circuit, Circuit, CircuitSampler, Fragment};
use crate::codec::{
    accumulate_decoder_gradient, accumulate_encoder_gradient, encoding_label, simulate, Codec,
    Episode, MemoryStrategy, NeuralScheme, SimOptions,
};
use crate::error::{Error, Result};
use crate::gates::{GateLabel, Outcome, UGS};
use crate::lattice::{GateLattice, TesselId, Tesselation};
use crate::nets::{update, OptimizerKind, OptimizerState};
use crate::oracle::{ideal_distribution, ideal_probability};
use crate::stuff::{make_stuff, StuffInstance, StuffPreset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrKind {
    #[default]
    SquaredDifference,
    AbsSquares,
}

impl ErrKind {
    pub fn value(self, x: f64, y: f64) -> f64 {
        match self {
            ErrKind::SquaredDifference => (x - y) * (x - y),
            ErrKind::AbsSquares => (x * x - y * y).abs(),
        }
    }

    /// Derivative with respect to the observed probability `x`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            ErrKind::SquaredDifference => 2.0 * (x - y),
            ErrKind::AbsSquares => 2.0 * x * (x * x - y * y).signum(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrKind::SquaredDifference => "squared",
            ErrKind::AbsSquares => "abs-squares",
        }
    }
}

pub fn loss_single(p_hat: f64, p_c: f64, err: ErrKind) -> f64 {
    err.value(p_hat, p_c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StuffSpec {
    pub preset: StuffPreset,
    pub n_sites: usize,
    pub alphabet: usize,
}

impl StuffSpec {
    pub fn make(&self, seed: u64) -> Result<StuffInstance> {
        make_stuff(self.preset, self.n_sites, self.alphabet, seed)
    }
}

/// A circuit with its ideal probability.
#[derive(Debug, Clone)]
pub struct LabelledCircuit {
    pub circuit: Circuit,
    pub target: f64,
}

impl LabelledCircuit {
    pub fn new(circuit: Circuit, tess: &Tesselation, gl: &GateLattice) -> Result<Self> {
        let target = ideal_probability(&circuit, tess, gl)?;
        Ok(LabelledCircuit { circuit, target })
    }
}

pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `m` episodes and returns them with their target probabilities.
fn run_batch(
    scheme: &dyn Codec,
    stuff: &StuffSpec,
    c: &Circuit,
    tess: &Tesselation,
    strategy: MemoryStrategy,
    m: usize,
    seed: u64,
) -> Result<(Vec<Episode>, Vec<f64>)> {
    if m == 0 {
        return Err(Error::Config("at least one episode per estimate".into()));
    }
    let mut st = stuff.make(mix(seed, 0, 0))?;
    let opts = SimOptions::default();
    let mut eps = Vec::with_capacity(m);
    let mut qs = Vec::with_capacity(m);
    for e in 0..m {
        st.reset();
        let ep = simulate(
            scheme,
            &mut st,
            c,
            tess,
            strategy,
            &opts,
            mix(seed, 1, e as u64),
        )?;
        qs.push(ep.target_probability(c));
        eps.push(ep);
    }
    Ok((eps, qs))
}

/// Mean over `m` episodes of the decoded probability of the circuit's
/// designated outcomes.
pub fn empirical_probability(
    scheme: &dyn Codec,
    stuff: &StuffSpec,
    c: &Circuit,
    tess: &Tesselation,
    strategy: MemoryStrategy,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let (_, qs) = run_batch(scheme, stuff, c, tess, strategy, m, seed)?;
    Ok(qs.iter().sum::<f64>() / m as f64)
}

/// Sum over the set of single-circuit losses.
#[allow(clippy::too_many_arguments)]
pub fn loss_set(
    scheme: &dyn Codec,
    stuff: &StuffSpec,
    set: &[LabelledCircuit],
    tess: &Tesselation,
    strategy: MemoryStrategy,
    err: ErrKind,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Config("empty circuit set".into()));
    }
    let mut total = 0.0;
    for (k, lc) in set.iter().enumerate() {
        let p = empirical_probability(
            scheme,
            stuff,
            &lc.circuit,
            tess,
            strategy,
            m,
            mix(seed, 2, k as u64),
        )?;
        total += loss_single(p, lc.target, err);
    }
    Ok(total)
}

/// A circuit skeleton with the ideal probability of every outcome
/// assignment. One batch of episodes scores all assignments at once, since
/// the designated outcomes only select which decoded probabilities to read.
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub circuit: Circuit,
    pub variants: Vec<(BTreeMap<TesselId, Outcome>, f64)>,
}

impl Skeleton {
    pub fn new(circuit: Circuit, tess: &Tesselation, gl: &GateLattice) -> Result<Self> {
        let variants = ideal_distribution(&circuit.fragment, tess, gl)?.entries;
        Ok(Skeleton { circuit, variants })
    }

    /// Every variant as a circuit of its own.
    pub fn circuits(&self) -> Vec<LabelledCircuit> {
        self.variants
            .iter()
            .map(|(a, p)| {
                let mut f = self.circuit.fragment.clone();
                for (&id, &o) in a {
                    f.insert(id, GateLabel::from_outcome(o));
                }
                LabelledCircuit {
                    circuit: Circuit {
                        fragment: f,
                        outcome_assignment: a.clone(),
                    },
                    target: *p,
                }
            })
            .collect()
    }
}

/// Observed probability of every variant of a skeleton from one batch.
pub fn skeleton_probabilities(
    scheme: &dyn Codec,
    stuff: &StuffSpec,
    sk: &Skeleton,
    tess: &Tesselation,
    strategy: MemoryStrategy,
    m: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (eps, _) = run_batch(scheme, stuff, &sk.circuit, tess, strategy, m, seed)?;
    Ok(sk
        .variants
        .iter()
        .map(|(a, _)| eps.iter().map(|e| e.assignment_probability(a)).sum::<f64>() / m as f64)
        .collect())
}

/// Mean single-circuit loss over every variant of every skeleton.
#[allow(clippy::too_many_arguments)]
pub fn heldout_loss(
    scheme: &dyn Codec,
    stuff: &StuffSpec,
    suite: &[Skeleton],
    tess: &Tesselation,
    strategy: MemoryStrategy,
    err: ErrKind,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (k, sk) in suite.iter().enumerate() {
        let p =
            skeleton_probabilities(scheme, stuff, sk, tess, strategy, m, mix(seed, 2, k as u64))?;
        for (ph, (_, target)) in p.iter().zip(&sk.variants) {
            total += err.value(*ph, *target);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("empty circuit suite".into()));
    }
    Ok(total / n as f64)
}

/// Source of training skeletons.
pub trait CircuitSource {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> Result<Skeleton>;
}

/// Random circuits from the sampler, labelled by the oracle.
pub struct RandomSource<'a> {
    pub sampler: CircuitSampler,
    pub tess: &'a Tesselation,
    pub gl: &'a GateLattice,
    /// Redraw circuits without outcomes, which carry no signal.
    pub require_outcome: bool,
}

impl CircuitSource for RandomSource<'_> {
    fn draw(&mut self, _rng: &mut ChaCha8Rng) -> Result<Skeleton> {
        for _ in 0..1000 {
            let c = self.sampler.sample(self.gl)?;
            if !self.require_outcome || !c.outcome_assignment.is_empty() {
                return Skeleton::new(c, self.tess, self.gl);
            }
        }
        Err(Error::RetryExhausted(1000))
    }
}

/// Sum of `loss_set` over `n_batches` random subsets of `batch` circuits.
#[allow(clippy::too_many_arguments)]
pub fn loss_random(
    scheme: &dyn Codec,
    stuff: &StuffSpec,
    source: &mut dyn CircuitSource,
    tess: &Tesselation,
    strategy: MemoryStrategy,
    n_batches: usize,
    batch: usize,
    err: ErrKind,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for b in 0..n_batches {
        let mut set = Vec::with_capacity(batch);
        while set.len() < batch {
            let sk = source.draw(&mut rng)?;
            let k = rng.gen_range(0..sk.variants.len());
            set.push(sk.circuits().swap_remove(k));
        }
        total += loss_set(
            scheme,
            stuff,
            &set,
            tess,
            strategy,
            err,
            m,
            mix(seed, 3, b as u64),
        )?;
    }
    Ok(total)
}

/// Placement of single-gate test circuits on a strip: a spine octagon at
/// `spine_x` on odd rows, flanked by octagons at `spine_x ± P_x/2` on the
/// rows below and above.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpineLayout {
    pub spine_x: i64,
    pub half_x: i64,
    pub half_t: i64,
    pub base_t: i64,
}

impl SpineLayout {
    pub fn new(tess: &Tesselation) -> Self {
        let half_x = tess.period_x as i64 / 2;
        SpineLayout {
            spine_x: 2 * half_x,
            half_x,
            half_t: tess.period_t as i64 / 2,
            base_t: tess.period_t as i64 / 2,
        }
    }

    pub fn spine(&self, row: i64) -> (i64, i64) {
        (self.spine_x, self.base_t + row * self.half_t)
    }

    pub fn left(&self, row: i64) -> (i64, i64) {
        (self.spine_x - self.half_x, self.base_t + row * self.half_t)
    }

    pub fn right(&self, row: i64) -> (i64, i64) {
        (self.spine_x + self.half_x, self.base_t + row * self.half_t)
    }
}

/// Gate `g` on the spine at odd `row`, fed by `PrepZZ` on both flanks and
/// read by `I⊗M` (left flank) and `M⊗I` (right flank) with the given bits.
pub fn single_gate_circuit(
    tess: &Tesselation,
    gl: &GateLattice,
    row: i64,
    g: GateLabel,
    bits: (u8, u8),
) -> Result<LabelledCircuit> {
    let lay = SpineLayout::new(tess);
    let at = |p: (i64, i64)| {
        tess.octagon_at(p.0, p.1)
            .filter(|&id| tess.tessel(id).is_gate_site())
            .ok_or_else(|| Error::InvalidGeometry(format!("no gate site at {p:?}")))
    };
    let read_l = if bits.0 == 0 {
        GateLabel::IM0
    } else {
        GateLabel::IM1
    };
    let read_r = if bits.1 == 0 {
        GateLabel::M0I
    } else {
        GateLabel::M1I
    };
    let f = Fragment::from_pairs([
        (at(lay.left(row - 1))?, GateLabel::PrepZZ),
        (at(lay.right(row - 1))?, GateLabel::PrepZZ),
        (at(lay.spine(row))?, g),
        (at(lay.left(row + 1))?, read_l),
        (at(lay.right(row + 1))?, read_r),
    ]);
    LabelledCircuit::new(validate_circuit(&f, gl)?, tess, gl)
}

/// Every UGS gate with every pair of read-out bits at one spine row.
pub fn single_octagon_suite(
    tess: &Tesselation,
    gl: &GateLattice,
    row: i64,
) -> Result<Vec<LabelledCircuit>> {
    let mut v = Vec::new();
    for g in UGS {
        for bits in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            v.push(single_gate_circuit(tess, gl, row, g, bits)?);
        }
    }
    Ok(v)
}

/// Spine gates up to the choice of designated outcome.
pub fn distinct_spine_gates() -> Vec<GateLabel> {
    let mut v: Vec<GateLabel> = UGS.iter().map(|&g| encoding_label(g)).collect();
    v.dedup();
    v
}

/// The single-octagon suite grouped into skeletons: its variants are exactly
/// the circuits of `single_octagon_suite`.
pub fn single_octagon_skeletons(
    tess: &Tesselation,
    gl: &GateLattice,
    row: i64,
) -> Result<Vec<Skeleton>> {
    distinct_spine_gates()
        .into_iter()
        .map(|g| {
            Skeleton::new(
                single_gate_circuit(tess, gl, row, g, (0, 0))?.circuit,
                tess,
                gl,
            )
        })
        .collect()
}

/// Uniform draws of single-gate skeletons over the given spine rows.
pub struct SingleGateSource<'a> {
    pub tess: &'a Tesselation,
    pub gl: &'a GateLattice,
    pub rows: Vec<i64>,
}

impl CircuitSource for SingleGateSource<'_> {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> Result<Skeleton> {
        let gates = distinct_spine_gates();
        let row = self.rows[rng.gen_range(0..self.rows.len())];
        let g = gates[rng.gen_range(0..gates.len())];
        Skeleton::new(
            single_gate_circuit(self.tess, self.gl, row, g, (0, 0))?.circuit,
            self.tess,
            self.gl,
        )
    }
}

/// Uniform draws from a fixed list.
pub struct ListSource {
    pub skeletons: Vec<Skeleton>,
}

impl CircuitSource for ListSource {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> Result<Skeleton> {
        if self.skeletons.is_empty() {
            return Err(Error::Config("empty circuit list".into()));
        }
        Ok(self.skeletons[rng.gen_range(0..self.skeletons.len())].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// Mean of the other episodes in the batch.
    LeaveOneOut,
    /// Exponential moving average of past batch means.
    MovingAverage {
        decay: f64,
    },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientMode {
    ScoreFunction,
    /// Simultaneous perturbation of all weights by `±c`, with common random
    /// numbers for the two evaluations.
    Spsa {
        c: f64,
    },
}

/// Per-episode weights `q_e − b_e` of the score-function estimator.
pub fn score_coefficients(q: &[f64], baseline: Baseline, average: &mut Option<f64>) -> Vec<f64> {
    let m = q.len();
    let sum: f64 = q.iter().sum();
    let coeffs = match baseline {
        Baseline::LeaveOneOut if m > 1 => q
            .iter()
            .map(|&qe| qe - (sum - qe) / (m - 1) as f64)
            .collect(),
        Baseline::LeaveOneOut | Baseline::None => q.to_vec(),
        Baseline::MovingAverage { .. } => {
            let b = average.unwrap_or(0.0);
            q.iter().map(|&qe| qe - b).collect()
        }
    };
    if let Baseline::MovingAverage { decay } = baseline {
        let mean = sum / m as f64;
        *average = Some(match *average {
            Some(a) => decay * a + (1.0 - decay) * mean,
            None => mean,
        });
    }
    coeffs
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub m: usize,
    pub eval_m: usize,
    pub iterations: usize,
    pub epsilon: f64,
    pub eval_every: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub strategy: MemoryStrategy,
    pub err: ErrKind,
    pub baseline: Baseline,
    pub gradient: GradientMode,
    /// Rescale the joint gradient to at most this norm.
    pub clip: Option<f64>,
    /// Weight of the per-point setting-entropy bonus.
    pub entropy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 64,
            eval_m: 256,
            iterations: 200_000,
            epsilon: 1e-2,
            eval_every: 250,
            lr_encoder: 0.01,
            lr_decoder: 0.01,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            strategy: MemoryStrategy::Rasterized,
            err: ErrKind::SquaredDifference,
            baseline: Baseline::LeaveOneOut,
            gradient: GradientMode::ScoreFunction,
            clip: Some(10.0),
            entropy: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn echo(&self) -> String {
        format!(
            "m={} eval_m={} iterations={} epsilon={} eval_every={} lr_encoder={} lr_decoder={} optimizer={:?} seed={} strategy={:?} err={} baseline={:?} gradient={:?} clip={:?} entropy={}",
            self.m,
            self.eval_m,
            self.iterations,
            self.epsilon,
            self.eval_every,
            self.lr_encoder,
            self.lr_decoder,
            self.optimizer,
            self.seed,
            self.strategy,
            self.err.name(),
            self.baseline,
            self.gradient,
            self.clip,
            self.entropy
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Training loss of each iteration's circuit, starting at `first_iteration`.
    pub losses: Vec<f64>,
    pub first_iteration: usize,
    /// `(iteration, held-out loss)` at each evaluation.
    pub heldout: Vec<(usize, f64)>,
    pub final_heldout: f64,
    pub iterations_run: usize,
    pub converged: bool,
    pub aborted: Option<String>,
    pub seconds: f64,
    pub seed: u64,
    pub config: String,
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# config {}", self.config);
        let _ = writeln!(s, "# seed {}", self.seed);
        let mut h = self.heldout.iter().peekable();
        for (i, l) in self.losses.iter().enumerate() {
            let i = i + self.first_iteration;
            match h.peek() {
                Some(&&(k, v)) if k == i => {
                    let _ = writeln!(s, "{i} {l:.6e} {v:.6e}");
                    h.next();
                }
                _ => {
                    let _ = writeln!(s, "{i} {l:.6e}");
                }
            }
        }
        for (k, v) in h {
            let _ = writeln!(s, "{k} - {v:.6e}");
        }
        let _ = writeln!(
            s,
            "# final_heldout {:.6e} iterations {} converged {} seconds {:.1}",
            self.final_heldout, self.iterations_run, self.converged, self.seconds
        );
        if let Some(a) = &self.aborted {
            let _ = writeln!(s, "# aborted {a}");
        }
        s
    }
}

/// Everything besides the weights that a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub enc: Vec<OptimizerState>,
    pub dec: OptimizerState,
    /// Next iteration to run.
    pub iteration: usize,
    /// Moving-average baselines, one per outcome variant slot.
    pub average: Vec<Option<f64>>,
}

impl TrainState {
    pub fn new(scheme: &NeuralScheme, cfg: &TrainConfig) -> Self {
        TrainState {
            enc: scheme
                .fleet
                .weights
                .iter()
                .map(|w| OptimizerState::new(cfg.optimizer, cfg.lr_encoder, w.len()))
                .collect(),
            dec: OptimizerState::new(cfg.optimizer, cfg.lr_decoder, scheme.decoder.weights.len()),
            iteration: 0,
            average: vec![None; 64],
        }
    }
}

fn apply_gradients(
    scheme: &mut NeuralScheme,
    opt: &mut TrainState,
    enc: &mut [Vec<f64>],
    dec: &mut [f64],
    clip: Option<f64>,
) -> Result<()> {
    let norm2: f64 = enc.iter().flatten().chain(dec.iter()).map(|g| g * g).sum();
    if !norm2.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if let Some(c) = clip {
        let n = norm2.sqrt();
        if n > c {
            let s = c / n;
            enc.iter_mut()
                .flatten()
                .chain(dec.iter_mut())
                .for_each(|g| *g *= s);
        }
    }
    for (x, g) in enc.iter().enumerate() {
        update(&mut scheme.fleet.weights[x], g, &mut opt.enc[x])?;
    }
    update(&mut scheme.decoder.weights, dec, &mut opt.dec)
}

/// Score-function estimate of the loss gradient for one skeleton; returns
/// the mean loss over its variants.
#[allow(clippy::too_many_arguments)]
fn score_function_step(
    scheme: &NeuralScheme,
    stuff: &StuffSpec,
    sk: &Skeleton,
    tess: &Tesselation,
    cfg: &TrainConfig,
    seed: u64,
    average: &mut [Option<f64>],
    enc: &mut [Vec<f64>],
    dec: &mut [f64],
) -> Result<f64> {
    let (eps, _) = run_batch(scheme, stuff, &sk.circuit, tess, cfg.strategy, cfg.m, seed)?;
    let m = eps.len() as f64;
    let nv = sk.variants.len() as f64;
    let mut loss = 0.0;
    let mut enc_coeff = vec![0.0; eps.len()];
    for (v, (assignment, target)) in sk.variants.iter().enumerate() {
        let q: Vec<f64> = eps
            .iter()
            .map(|e| e.assignment_probability(assignment))
            .collect();
        let p_hat = q.iter().sum::<f64>() / m;
        loss += cfg.err.value(p_hat, *target) / nv;
        let d = cfg.err.derivative(p_hat, *target) / nv;
        if d == 0.0 {
            continue;
        }
        let slot = average.get_mut(v.min(average.len().saturating_sub(1)));
        let mut dummy = None;
        let coeffs = score_coefficients(&q, cfg.baseline, slot.unwrap_or(&mut dummy));
        for (e, ep) in eps.iter().enumerate() {
            enc_coeff[e] += d * coeffs[e] / m;
            if q[e] != 0.0 {
                accumulate_decoder_gradient(&scheme.decoder, ep, assignment, d * q[e] / m, dec)?;
            }
        }
    }
    for (ep, &c) in eps.iter().zip(&enc_coeff) {
        if c != 0.0 || cfg.entropy != 0.0 {
            accumulate_encoder_gradient(&scheme.fleet, ep, c, cfg.entropy / m, enc)?;
        }
    }
    Ok(loss)
}

#[allow(clippy::too_many_arguments)]
fn spsa_step(
    scheme: &NeuralScheme,
    stuff: &StuffSpec,
    sk: &Skeleton,
    tess: &Tesselation,
    cfg: &TrainConfig,
    c: f64,
    seed: u64,
    enc: &mut [Vec<f64>],
    dec: &mut [f64],
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 4, 0));
    let delta_enc: Vec<Vec<f64>> = enc
        .iter()
        .map(|g| {
            (0..g.len())
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let delta_dec: Vec<f64> = (0..dec.len())
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let pinned = scheme.decoder.pinned();
    let shifted = |sign: f64| -> NeuralScheme {
        let mut s = scheme.clone();
        for (w, d) in s.fleet.weights.iter_mut().zip(&delta_enc) {
            w.values_mut()
                .iter_mut()
                .zip(d)
                .for_each(|(v, di)| *v += sign * c * di);
        }
        for (i, (v, di)) in s
            .decoder
            .weights
            .values_mut()
            .iter_mut()
            .zip(&delta_dec)
            .enumerate()
        {
            if !pinned.contains(&i) {
                *v += sign * c * di;
            }
        }
        s
    };
    let loss_of = |s: &NeuralScheme| -> Result<f64> {
        let p = skeleton_probabilities(s, stuff, sk, tess, cfg.strategy, cfg.m, seed)?;
        Ok(p.iter()
            .zip(&sk.variants)
            .map(|(ph, (_, t))| cfg.err.value(*ph, *t))
            .sum::<f64>()
            / p.len() as f64)
    };
    let diff = (loss_of(&shifted(1.0))? - loss_of(&shifted(-1.0))?) / (2.0 * c);
    for (g, d) in enc.iter_mut().zip(&delta_enc) {
        g.iter_mut().zip(d).for_each(|(gi, di)| *gi += diff * di);
    }
    for (i, (gi, di)) in dec.iter_mut().zip(&delta_dec).enumerate() {
        if !pinned.contains(&i) {
            *gi += diff * di;
        }
    }
    loss_of(scheme)
}

/// The optimization loop: one circuit per iteration, `m` episodes, one
/// update. Stops at the budget or when the held-out loss drops below
/// `epsilon`. A non-finite gradient aborts with a partial report.
pub fn train(
    scheme: &mut NeuralScheme,
    stuff: &StuffSpec,
    tess: &Tesselation,
    source: &mut dyn CircuitSource,
    heldout: &[Skeleton],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut state = TrainState::new(scheme, cfg);
    train_from(scheme, stuff, tess, source, heldout, cfg, &mut state)
}

/// Continues a run from `state` up to `cfg.iterations`. Each iteration's
/// randomness depends only on the seed and the iteration index, so a split
/// run replays an unbroken one.
pub fn train_from(
    scheme: &mut NeuralScheme,
    stuff: &StuffSpec,
    tess: &Tesselation,
    source: &mut dyn CircuitSource,
    heldout: &[Skeleton],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<TrainReport> {
    if cfg.m == 0 || cfg.eval_m == 0 || cfg.eval_every == 0 {
        return Err(Error::Config(
            "m, eval_m and eval_every must be positive".into(),
        ));
    }
    if state.enc.len() != scheme.fleet.weights.len() {
        return Err(Error::Shape(
            "optimizer state does not match the encoder fleet".into(),
        ));
    }
    let start = Instant::now();
    let mut report = TrainReport {
        losses: Vec::new(),
        first_iteration: state.iteration,
        heldout: Vec::new(),
        final_heldout: f64::NAN,
        iterations_run: state.iteration,
        converged: false,
        aborted: None,
        seconds: 0.0,
        seed: cfg.seed,
        config: cfg.echo(),
    };
    let eval = |s: &NeuralScheme, k: usize| {
        heldout_loss(
            s,
            stuff,
            heldout,
            tess,
            cfg.strategy,
            cfg.err,
            cfg.eval_m,
            mix(cfg.seed, 6, k as u64),
        )
    };
    let first = state.iteration;
    for it in first..cfg.iterations {
        if !heldout.is_empty() && it % cfg.eval_every == 0 {
            let h = eval(scheme, it)?;
            report.heldout.push((it, h));
            if h < cfg.epsilon {
                report.converged = true;
                break;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 5, it as u64));
        let sk = source.draw(&mut rng)?;
        let mut enc: Vec<Vec<f64>> = scheme
            .fleet
            .weights
            .iter()
            .map(|w| vec![0.0; w.len()])
            .collect();
        let mut dec = vec![0.0; scheme.decoder.weights.len()];
        let seed = mix(cfg.seed, 7, it as u64);
        let loss = match cfg.gradient {
            GradientMode::ScoreFunction => score_function_step(
                scheme,
                stuff,
                &sk,
                tess,
                cfg,
                seed,
                &mut state.average,
                &mut enc,
                &mut dec,
            )?,
            GradientMode::Spsa { c } => {
                spsa_step(scheme, stuff, &sk, tess, cfg, c, seed, &mut enc, &mut dec)?
            }
        };
        report.losses.push(loss);
        report.iterations_run = it + 1;
        state.iteration = it + 1;
        if let Err(e) = apply_gradients(scheme, state, &mut enc, &mut dec, cfg.clip) {
            report.aborted = Some(e.to_string());
            break;
        }
    }
    if !heldout.is_empty() && report.aborted.is_none() {
        let last = report.heldout.last().copied();
        let h = match last {
            Some((k, v)) if k == report.iterations_run => v,
            _ => {
                let v = eval(scheme, report.iterations_run)?;
                report.heldout.push((report.iterations_run, v));
                v
            }
        };
        report.final_heldout = h;
        report.converged = h < cfg.epsilon;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
