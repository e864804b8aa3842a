//! Encoder fleet and decoder. One recurrent encoder per site turns gate labels
//! into stuff settings; memory is shared only inside a tessel. The decoder
//! maps a tessel's raw outcomes to a distribution over its logical outcomes.

use crate::circuits::Circuit;
use crate::error::{Error, Result};
use crate::gates::{outcome_family, GateLabel, Outcome, Side, ALL_LABELS};
use crate::lattice::{SpacetimePoint, TesselId, TesselKind, Tesselation};
use crate::nets::{self, Cache, Manifest, Weights};
use crate::stuff::{symbols, RawOutcome, Setting, StuffInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const N_LABELS: usize = ALL_LABELS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryStrategy {
    Rasterized,
    Causal { s: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NullEncoding {
    #[default]
    Trainable,
    /// NULL points always send setting 0 and carry memory through unchanged.
    Frozen,
}

/// Label seen by the encoder: the two designated outcomes of a measurement
/// are the same physical operation, so they share one code.
pub fn encoding_label(g: GateLabel) -> GateLabel {
    match g {
        GateLabel::M1I => GateLabel::M0I,
        GateLabel::IM1 => GateLabel::IM0,
        other => other,
    }
}

pub fn encoder_features(g: GateLabel, pos: Option<usize>, mask_size: usize) -> Vec<f64> {
    let mut f = vec![0.0; N_LABELS + mask_size + 1];
    f[encoding_label(g).index()] = 1.0;
    f[N_LABELS + pos.unwrap_or(mask_size)] = 1.0;
    f
}

pub fn decoder_features(
    raw: &[RawOutcome],
    g: GateLabel,
    midpoint: (i64, i64),
    tess: &Tesselation,
) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 * raw.len() + N_LABELS + 2);
    for r in raw {
        match r {
            RawOutcome::Null => f.extend([0.0, 0.0]),
            RawOutcome::Zero => f.extend([1.0, 0.0]),
            RawOutcome::One => f.extend([1.0, 1.0]),
        }
    }
    let mut label = [0.0; N_LABELS];
    label[encoding_label(g).index()] = 1.0;
    f.extend(label);
    f.push(midpoint.0 as f64 / tess.l_sites as f64);
    f.push(midpoint.1 as f64 / tess.t_steps as f64);
    f
}

#[derive(Debug, Clone)]
pub struct EncodeStep {
    /// Distribution over Σ; empty for deterministic encoders.
    pub probs: Vec<f64>,
    pub setting: Setting,
    pub memory: Vec<f64>,
    pub cache: Option<Cache>,
}

#[derive(Debug, Clone)]
pub struct DecodeStep {
    /// Over `outcome_family(g)`, or `[1.0]` for outcome-free gates.
    pub dist: Vec<f64>,
    pub cache: Option<Cache>,
}

/// An encoding scheme: encoder and decoder together.
pub trait Codec {
    fn d_m(&self) -> usize;
    fn encode(
        &self,
        site: usize,
        g: GateLabel,
        pos: Option<usize>,
        memory: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<EncodeStep>;
    fn decode(
        &self,
        raw: &[RawOutcome],
        g: GateLabel,
        midpoint: (i64, i64),
        tess: &Tesselation,
    ) -> Result<DecodeStep>;
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFleet {
    pub weights: Vec<Weights>,
    pub d_m: usize,
    pub alphabet: usize,
    pub mask_size: usize,
}

impl EncoderFleet {
    pub fn manifest(alphabet: usize, mask_size: usize, hidden: &[usize], d_m: usize) -> Manifest {
        Manifest::recurrent(N_LABELS + mask_size + 1, d_m, hidden.to_vec(), alphabet)
    }

    pub fn random(
        n_sites: usize,
        alphabet: usize,
        mask_size: usize,
        hidden: &[usize],
        d_m: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let m = Self::manifest(alphabet, mask_size, hidden, d_m);
        EncoderFleet {
            weights: (0..n_sites)
                .map(|_| Weights::random(m.clone(), rng))
                .collect(),
            d_m,
            alphabet,
            mask_size,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.weights.len()
    }

    pub fn encode_step(
        &self,
        site: usize,
        g: GateLabel,
        pos: Option<usize>,
        memory: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<EncodeStep> {
        let w = self.weights.get(site).ok_or(Error::OutOfRange {
            site: site as i64,
            step: -1,
        })?;
        if memory.len() != self.d_m {
            return Err(Error::Shape(format!(
                "memory of length {} where d_M = {}",
                memory.len(),
                self.d_m
            )));
        }
        let (logits, memory, cache) =
            nets::cell_forward(w, &encoder_features(g, pos, self.mask_size), memory)?;
        let probs = nets::softmax(&logits);
        let setting = sample(&probs, rng);
        Ok(EncodeStep {
            probs,
            setting,
            memory,
            cache: Some(cache),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderKind {
    /// Bias-free linear readout of the raw outcomes, gated by the outcome
    /// family and scaled by the midpoint coordinates. With nothing measured
    /// it returns the uniform distribution.
    #[default]
    Gated,
    /// Tanh network over raw features, label one-hot and midpoint.
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub weights: Weights,
    pub mask_size: usize,
    pub kind: DecoderKind,
}

fn family_index(g: GateLabel) -> Option<usize> {
    outcome_family(g).map(|f| if f[0].side == Side::Left { 0 } else { 1 })
}

/// Gated decoder input: raw features times `[1, x/L, t/T]`, placed in the
/// block of the gate's outcome family.
pub fn gated_features(
    raw: &[RawOutcome],
    g: GateLabel,
    midpoint: (i64, i64),
    tess: &Tesselation,
) -> Vec<f64> {
    let block = 6 * raw.len();
    let mut f = vec![0.0; 2 * block];
    let Some(fam) = family_index(g) else { return f };
    let scales = [
        1.0,
        midpoint.0 as f64 / tess.l_sites as f64,
        midpoint.1 as f64 / tess.t_steps as f64,
    ];
    for (k, r) in raw.iter().enumerate() {
        let (m, v) = match r {
            RawOutcome::Null => (0.0, 0.0),
            RawOutcome::Zero => (1.0, 0.0),
            RawOutcome::One => (1.0, 1.0),
        };
        for (z, sc) in scales.iter().enumerate() {
            let o = fam * block + z * 2 * raw.len() + 2 * k;
            f[o] = m * sc;
            f[o + 1] = v * sc;
        }
    }
    f
}

impl Decoder {
    pub fn manifest(kind: DecoderKind, mask_size: usize, hidden: &[usize]) -> Manifest {
        let head = vec![nets::Head {
            size: 2,
            activation: nets::Activation::Identity,
        }];
        match kind {
            DecoderKind::Gated => Manifest::new(12 * mask_size, vec![], head),
            DecoderKind::Mlp => Manifest::new(2 * mask_size + N_LABELS + 2, hidden.to_vec(), head),
        }
    }

    pub fn random(
        kind: DecoderKind,
        mask_size: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut weights = Weights::random(Self::manifest(kind, mask_size, hidden), rng);
        if kind == DecoderKind::Gated {
            weights.values_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
        Decoder {
            weights,
            mask_size,
            kind,
        }
    }

    /// Parameters held at zero (the gated decoder's output bias).
    pub fn pinned(&self) -> std::ops::Range<usize> {
        match self.kind {
            DecoderKind::Gated => self.weights.len() - 2..self.weights.len(),
            DecoderKind::Mlp => 0..0,
        }
    }

    pub fn decode(
        &self,
        raw: &[RawOutcome],
        g: GateLabel,
        midpoint: (i64, i64),
        tess: &Tesselation,
    ) -> Result<DecodeStep> {
        if outcome_family(g).is_none() {
            return Ok(DecodeStep {
                dist: vec![1.0],
                cache: None,
            });
        }
        if raw.len() != self.mask_size {
            return Err(Error::Shape(format!(
                "raw vector of length {} for an octagon of {}",
                raw.len(),
                self.mask_size
            )));
        }
        let x = match self.kind {
            DecoderKind::Gated => gated_features(raw, g, midpoint, tess),
            DecoderKind::Mlp => decoder_features(raw, g, midpoint, tess),
        };
        let cache = nets::forward(&self.weights, &x)?;
        Ok(DecodeStep {
            dist: nets::softmax(cache.output()),
            cache: Some(cache),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralScheme {
    pub fleet: EncoderFleet,
    pub decoder: Decoder,
    pub null: NullEncoding,
}

impl Codec for NeuralScheme {
    fn d_m(&self) -> usize {
        self.fleet.d_m
    }

    fn encode(
        &self,
        site: usize,
        g: GateLabel,
        pos: Option<usize>,
        memory: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<EncodeStep> {
        if g == GateLabel::Null && self.null == NullEncoding::Frozen {
            let _: f64 = rng.gen();
            return Ok(EncodeStep {
                probs: Vec::new(),
                setting: 0,
                memory: memory.to_vec(),
                cache: None,
            });
        }
        self.fleet.encode_step(site, g, pos, memory, rng)
    }

    fn decode(
        &self,
        raw: &[RawOutcome],
        g: GateLabel,
        midpoint: (i64, i64),
        tess: &Tesselation,
    ) -> Result<DecodeStep> {
        self.decoder.decode(raw, g, midpoint, tess)
    }
}

/// Hand-built scheme for transparent stuff on the P = 4, c = 1 lattice. The
/// octagon's left qubit lives one site left of the centre, the right qubit
/// one site right.
#[derive(Debug, Clone)]
pub struct HandScheme {
    mask: Vec<(i64, i64)>,
}

impl HandScheme {
    pub fn new(tess: &Tesselation) -> Result<Self> {
        let mask = tess.octagon_mask().to_vec();
        for need in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            if !mask.contains(&need) {
                return Err(Error::InvalidGeometry(
                    "hand scheme needs the P = 4, c = 1 octagon".into(),
                ));
            }
        }
        Ok(HandScheme { mask })
    }

    fn setting(&self, g: GateLabel, offset: (i64, i64)) -> Setting {
        use GateLabel::*;
        let left = offset == (-1, 0);
        let right = offset == (1, 0);
        let swap_row = offset == (0, -1) || offset == (0, 1);
        let single = |s| if left { s } else { symbols::NOOP };
        let single_r = |s| if right { s } else { symbols::NOOP };
        match g {
            HI => single(symbols::H),
            PI => single(symbols::P),
            RI => single(symbols::R),
            IH => single_r(symbols::H),
            IP => single_r(symbols::P),
            IR => single_r(symbols::R),
            M0I | M1I => single(symbols::MEASURE),
            IM0 | IM1 => single_r(symbols::MEASURE),
            PrepZZ => {
                if left || right {
                    symbols::RESET
                } else {
                    symbols::NOOP
                }
            }
            Cnot => {
                if swap_row {
                    symbols::SWAP
                } else if left {
                    symbols::CNOT
                } else {
                    symbols::NOOP
                }
            }
            Swap => {
                if swap_row || left {
                    symbols::SWAP
                } else {
                    symbols::NOOP
                }
            }
            II | Null => symbols::NOOP,
        }
    }
}

impl Codec for HandScheme {
    fn d_m(&self) -> usize {
        0
    }

    fn encode(
        &self,
        _site: usize,
        g: GateLabel,
        pos: Option<usize>,
        _memory: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<EncodeStep> {
        let _: f64 = rng.gen();
        let setting = match pos {
            Some(k) => self.setting(g, self.mask[k]),
            None => symbols::NOOP,
        };
        Ok(EncodeStep {
            probs: Vec::new(),
            setting,
            memory: Vec::new(),
            cache: None,
        })
    }

    fn decode(
        &self,
        raw: &[RawOutcome],
        g: GateLabel,
        _midpoint: (i64, i64),
        _tess: &Tesselation,
    ) -> Result<DecodeStep> {
        let Some(o) = g.measurement() else {
            return Ok(DecodeStep {
                dist: vec![1.0],
                cache: None,
            });
        };
        let offset = if o.side == Side::Left {
            (-1, 0)
        } else {
            (1, 0)
        };
        let k = self.mask.iter().position(|&m| m == offset).unwrap();
        let dist = match raw.get(k) {
            Some(RawOutcome::Zero) => vec![1.0, 0.0],
            Some(RawOutcome::One) => vec![0.0, 1.0],
            _ => vec![0.5, 0.5],
        };
        Ok(DecodeStep { dist, cache: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    /// Fixed zero memory at the start of a rasterized tessel.
    Zero,
    /// Multiplicative identity for an empty causal window.
    Ones,
    /// Pointwise product of the source memories (a single source is a copy).
    Product,
}

#[derive(Debug, Clone)]
pub struct PointRecord {
    pub point: SpacetimePoint,
    pub tessel: TesselId,
    pub label: GateLabel,
    pub setting: Setting,
    pub probs: Vec<f64>,
    pub cache: Option<Cache>,
    /// Earlier point records whose output memories fed this point.
    pub sources: Vec<usize>,
    pub merge: Merge,
    pub memory_out: Vec<f64>,
    pub raw: RawOutcome,
}

#[derive(Debug, Clone)]
pub struct TesselOutput {
    pub label: GateLabel,
    /// Raw outcomes indexed by octagon mask position (squares: by point).
    pub raw: Vec<RawOutcome>,
    pub dist: Vec<f64>,
    pub cache: Option<Cache>,
    /// Sampled logical outcome for measurement gates.
    pub outcome: Option<Outcome>,
    pub decode_count: usize,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub points: Vec<PointRecord>,
    pub outputs: BTreeMap<TesselId, TesselOutput>,
    pub steps: usize,
    pub trace: Option<String>,
}

impl Episode {
    /// Product over measurement tessels of the decoded probability of the
    /// circuit's designated outcome.
    pub fn target_probability(&self, circuit: &Circuit) -> f64 {
        self.assignment_probability(&circuit.outcome_assignment)
    }

    pub fn assignment_probability(&self, assignment: &BTreeMap<TesselId, Outcome>) -> f64 {
        let mut q = 1.0;
        for (id, o) in assignment {
            match self.outputs.get(id) {
                Some(out) => q *= out.dist[o.bit as usize],
                None => return 0.0,
            }
        }
        q
    }

    pub fn sampled_outcomes(&self) -> BTreeMap<TesselId, Outcome> {
        self.outputs
            .iter()
            .filter_map(|(id, o)| o.outcome.map(|x| (*id, x)))
            .collect()
    }

    /// Settings chosen inside a tessel, in raster order.
    pub fn settings_in(&self, id: TesselId) -> Vec<Setting> {
        self.points
            .iter()
            .filter(|p| p.tessel == id)
            .map(|p| p.setting)
            .collect()
    }
}

pub type MemoryHook<'a> = &'a dyn Fn(TesselId, &mut [f64]);

#[derive(Clone, Copy, Default)]
pub struct SimOptions<'a> {
    /// Number of steps to run; defaults to the circuit's last step.
    pub horizon: Option<usize>,
    pub trace: bool,
    /// Run every decoder after the whole episode instead of at the tessel's
    /// last point.
    pub decode_late: bool,
    /// Applied to each freshly computed output memory.
    pub memory_hook: Option<MemoryHook<'a>>,
}

pub fn circuit_horizon(circuit: &Circuit, tess: &Tesselation) -> usize {
    circuit
        .gates()
        .keys()
        .map(|&id| tess.tessel(id).last_point().step + 1)
        .max()
        .unwrap_or(0)
}

fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn decode_tessel(
    codec: &dyn Codec,
    tess: &Tesselation,
    id: TesselId,
    out: &mut TesselOutput,
    seed: u64,
) -> Result<()> {
    let t = tess.tessel(id);
    let step = if t.kind == TesselKind::Octagon && t.interior {
        codec.decode(&out.raw, out.label, t.midpoint, tess)?
    } else {
        DecodeStep {
            dist: vec![1.0],
            cache: None,
        }
    };
    // Seeded per tessel so the decode time does not change the draw.
    out.outcome = outcome_family(out.label).map(|fam| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id.0 as u64 + 1));
        fam[sample(&step.dist, &mut rng)]
    });
    out.dist = step.dist;
    out.cache = step.cache;
    out.decode_count += 1;
    Ok(())
}

pub fn simulate(
    codec: &dyn Codec,
    stuff: &mut StuffInstance,
    circuit: &Circuit,
    tess: &Tesselation,
    strategy: MemoryStrategy,
    opts: &SimOptions,
    seed: u64,
) -> Result<Episode> {
    let l = tess.l_sites;
    if stuff.n_sites() < l {
        return Err(Error::Config(format!(
            "stuff has {} sites, tesselation needs {l}",
            stuff.n_sites()
        )));
    }
    if let MemoryStrategy::Causal { s } = strategy {
        if s == 0 {
            return Err(Error::Config(
                "causal light-cone width must be at least 1".into(),
            ));
        }
    }
    let horizon = opts
        .horizon
        .unwrap_or_else(|| circuit_horizon(circuit, tess))
        .min(tess.t_steps);
    let d_m = codec.d_m();
    let mask_size = tess.octagon_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label_of = |id: TesselId| circuit.gates().get(&id).copied().unwrap_or(GateLabel::Null);

    let mut points: Vec<PointRecord> = Vec::with_capacity(l * horizon);
    let mut outputs: BTreeMap<TesselId, TesselOutput> = BTreeMap::new();
    let mut last_in_tessel: BTreeMap<TesselId, usize> = BTreeMap::new();
    let mut trace = opts.trace.then(String::new);

    for t in 0..horizon {
        let mut settings = vec![0; stuff.n_sites()];
        let first = points.len();
        for (x, slot) in settings.iter_mut().enumerate().take(l) {
            let p = SpacetimePoint::new(x, t);
            let id = tess.tessel_of(p)?;
            let pos = tess.position_of(p);
            let g = label_of(id);
            let (sources, merge) = match strategy {
                MemoryStrategy::Rasterized => match last_in_tessel.get(&id) {
                    Some(&k) => (vec![k], Merge::Product),
                    None => (vec![], Merge::Zero),
                },
                MemoryStrategy::Causal { s } => {
                    let mut src = Vec::new();
                    if t >= s {
                        let base = (t - s) * l;
                        let lo = x.saturating_sub(s);
                        let hi = (x + s).min(l - 1);
                        for xs in lo..=hi {
                            let k = base + xs;
                            if points[k].tessel == id {
                                src.push(k);
                            }
                        }
                    }
                    let merge = if src.is_empty() {
                        Merge::Ones
                    } else {
                        Merge::Product
                    };
                    (src, merge)
                }
            };
            let mem_in: Vec<f64> = match merge {
                Merge::Zero => vec![0.0; d_m],
                Merge::Ones => vec![1.0; d_m],
                Merge::Product => {
                    let mut m = vec![1.0; d_m];
                    for &k in &sources {
                        for (a, b) in m.iter_mut().zip(&points[k].memory_out) {
                            *a *= b;
                        }
                    }
                    m
                }
            };
            let mut step = codec.encode(x, g, pos, &mem_in, &mut rng)?;
            if let Some(hook) = opts.memory_hook {
                hook(id, &mut step.memory);
            }
            *slot = step.setting;
            last_in_tessel.insert(id, points.len());
            points.push(PointRecord {
                point: p,
                tessel: id,
                label: g,
                setting: step.setting,
                probs: step.probs,
                cache: step.cache,
                sources,
                merge,
                memory_out: step.memory,
                raw: RawOutcome::Null,
            });
        }
        let raw = stuff.step(&settings)?;
        for x in 0..l {
            let rec = &mut points[first + x];
            rec.raw = raw[x];
            let tessel = tess.tessel(rec.tessel);
            let out = outputs.entry(rec.tessel).or_insert_with(|| TesselOutput {
                label: rec.label,
                raw: if tessel.kind == TesselKind::Octagon {
                    vec![RawOutcome::Null; mask_size]
                } else {
                    Vec::new()
                },
                dist: Vec::new(),
                cache: None,
                outcome: None,
                decode_count: 0,
            });
            match tess.position_of(rec.point) {
                Some(k) => out.raw[k] = raw[x],
                None => out.raw.push(raw[x]),
            }
            if let Some(tr) = trace.as_mut() {
                let _ = writeln!(
                    tr,
                    "{} {} {} {} {} {}",
                    t,
                    x,
                    rec.tessel.0,
                    rec.label.mnemonic(),
                    rec.setting,
                    raw[x].symbol()
                );
            }
        }
        if !opts.decode_late {
            for x in 0..l {
                let rec = &points[first + x];
                if tess.tessel(rec.tessel).last_point() == rec.point {
                    let id = rec.tessel;
                    decode_tessel(codec, tess, id, outputs.get_mut(&id).unwrap(), seed)?;
                }
            }
        }
    }
    if opts.decode_late {
        for (&id, out) in outputs.iter_mut() {
            if tess.tessel(id).last_point().step < horizon {
                decode_tessel(codec, tess, id, out, seed)?;
            }
        }
    }
    // Tessels cut off by the horizon were never decoded.
    outputs.retain(|_, o| o.decode_count > 0);
    Ok(Episode {
        points,
        outputs,
        steps: horizon,
        trace,
    })
}

pub fn simulate_circuit_rasterized(
    codec: &dyn Codec,
    stuff: &mut StuffInstance,
    circuit: &Circuit,
    tess: &Tesselation,
    seed: u64,
) -> Result<Episode> {
    simulate(
        codec,
        stuff,
        circuit,
        tess,
        MemoryStrategy::Rasterized,
        &SimOptions::default(),
        seed,
    )
}

pub fn simulate_circuit_causal(
    codec: &dyn Codec,
    stuff: &mut StuffInstance,
    circuit: &Circuit,
    tess: &Tesselation,
    s: usize,
    seed: u64,
) -> Result<Episode> {
    simulate(
        codec,
        stuff,
        circuit,
        tess,
        MemoryStrategy::Causal { s },
        &SimOptions::default(),
        seed,
    )
}

/// Adds `coeff · ∇ Σ_p log π_p(a_p) − entropy · ∇ Σ_p H(π_p)` to the per-site
/// gradients, backpropagating through the memory graph. Frozen NULL points
/// contribute nothing.
pub fn accumulate_encoder_gradient(
    fleet: &EncoderFleet,
    ep: &Episode,
    coeff: f64,
    entropy: f64,
    grads: &mut [Vec<f64>],
) -> Result<()> {
    if grads.len() != fleet.n_sites() {
        return Err(Error::Shape("one gradient buffer per site expected".into()));
    }
    let d_m = fleet.d_m;
    let mut d_out: Vec<Option<Vec<f64>>> = vec![None; ep.points.len()];
    for k in (0..ep.points.len()).rev() {
        let rec = &ep.points[k];
        let dm = d_out[k].take().unwrap_or_else(|| vec![0.0; d_m]);
        let d_in = match &rec.cache {
            Some(cache) => {
                let site = rec.point.site;
                let h: f64 = -rec
                    .probs
                    .iter()
                    .filter(|p| **p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>();
                let d_logits: Vec<f64> = rec
                    .probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let score = coeff * (if i == rec.setting { 1.0 } else { 0.0 } - p);
                        let ent = if p > 0.0 {
                            entropy * p * (p.ln() + h)
                        } else {
                            0.0
                        };
                        score + ent
                    })
                    .collect();
                nets::cell_backward(
                    &fleet.weights[site],
                    cache,
                    &d_logits,
                    &dm,
                    &mut grads[site],
                )?
            }
            None => dm,
        };
        if rec.merge != Merge::Product || d_in.iter().all(|v| *v == 0.0) {
            continue;
        }
        for (j, &src) in rec.sources.iter().enumerate() {
            let mut g = d_in.clone();
            for (i, &other) in rec.sources.iter().enumerate() {
                if i != j {
                    for (a, b) in g.iter_mut().zip(&ep.points[other].memory_out) {
                        *a *= b;
                    }
                }
            }
            match &mut d_out[src] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }
    Ok(())
}

/// Adds `coeff · ∇ Σ_T log d_T(target_T)` over the measurement tessels of
/// an outcome assignment to the decoder gradient.
pub fn accumulate_decoder_gradient(
    decoder: &Decoder,
    ep: &Episode,
    assignment: &BTreeMap<TesselId, Outcome>,
    coeff: f64,
    grad: &mut [f64],
) -> Result<()> {
    for (id, o) in assignment {
        let Some(out) = ep.outputs.get(id) else {
            continue;
        };
        let Some(cache) = &out.cache else { continue };
        let t = o.bit as usize;
        let d: Vec<f64> = out
            .dist
            .iter()
            .enumerate()
            .map(|(i, p)| coeff * (if i == t { 1.0 } else { 0.0 } - p))
            .collect();
        nets::backward(&decoder.weights, cache, &d, grad)?;
    }
    grad[decoder.pinned()].iter_mut().for_each(|g| *g = 0.0);
    Ok(())
}
