//! Fragment tomography, composition tomographs and bounded-data
//! reconstruction of circuit probabilities.
//!
//! On a strip of width `2·P_x` the gate lattice is a chain: one spine octagon
//! on odd rows, two flank octagons on even rows, and the two spine qubits as
//! the only wires between consecutive rows. Probes around a row are products
//! of single-qubit preparations below it and read-outs above it.

use crate::circuits::{validate_circuit, Circuit, CircuitSampler, Fragment, RandomCircuitConfig};
use crate::codec::{simulate, Codec, MemoryStrategy, SimOptions};
use crate::error::{Error, Result};
use crate::gates::{GateLabel, UGS};
use crate::lattice::{GateLattice, TesselId, Tesselation};
use crate::oracle::ideal_probability;
use crate::training::{empirical_probability, mix, ErrKind, SpineLayout, StuffSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

/// Where circuit probabilities come from.
#[derive(Clone, Copy)]
pub enum Source<'a> {
    Oracle,
    /// Branch enumeration over the stuff's measurement results. Needs a
    /// codec with deterministic settings and a noiseless preset.
    Exact {
        codec: &'a dyn Codec,
        stuff: StuffSpec,
        strategy: MemoryStrategy,
    },
    /// Mean decoded probability over `m` episodes.
    Empirical {
        codec: &'a dyn Codec,
        stuff: StuffSpec,
        strategy: MemoryStrategy,
        m: usize,
        seed: u64,
    },
}

impl Source<'_> {
    /// Rank tolerance: 1e-8 for exact sources, 5/√m for sampled ones.
    pub fn default_tolerance(&self) -> f64 {
        match self {
            Source::Empirical { m, .. } => 5.0 / (*m as f64).sqrt(),
            _ => 1e-8,
        }
    }

    /// Ridge regularizer for the least-squares solves.
    pub fn ridge(&self) -> f64 {
        match self {
            Source::Empirical { .. } => 1e-6,
            _ => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Source::Oracle => "oracle",
            Source::Exact { .. } => "exact-stuff",
            Source::Empirical { .. } => "empirical-stuff",
        }
    }
}

/// Exact probability of the circuit's designated outcomes for a codec whose
/// settings are deterministic, summing over every branch of the stuff's
/// measurement results.
pub fn exact_probability(
    codec: &dyn Codec,
    stuff: &StuffSpec,
    c: &Circuit,
    tess: &Tesselation,
    strategy: MemoryStrategy,
) -> Result<f64> {
    let mut st = stuff.make(0)?;
    let opts = SimOptions::default();
    let mut total = 0.0;
    let mut stack: Vec<Vec<u8>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        st.reset();
        st.follow_branch(prefix.clone())?;
        let ep = simulate(codec, &mut st, c, tess, strategy, &opts, 0)?;
        if ep
            .points
            .iter()
            .any(|p| !p.probs.is_empty() && p.probs.iter().all(|&q| q < 1.0 - 1e-12))
        {
            return Err(Error::Config(
                "exact enumeration needs deterministic settings".into(),
            ));
        }
        let taken = st.branch_probabilities().unwrap_or(&[]).to_vec();
        total += taken.iter().product::<f64>() * ep.target_probability(c);
        let mut run: f64 = taken[..prefix.len().min(taken.len())].iter().product();
        for (j, &p0) in taken.iter().enumerate().skip(prefix.len()) {
            if run * (1.0 - p0) > 1e-14 {
                let mut s = prefix.clone();
                s.resize(j, 0);
                s.push(1);
                stack.push(s);
            }
            run *= p0;
            if run < 1e-14 {
                break;
            }
        }
    }
    Ok(total)
}

/// Memoized probability evaluation against one source.
pub struct Prober<'a> {
    pub source: Source<'a>,
    pub tess: &'a Tesselation,
    pub gl: &'a GateLattice,
    cache: RefCell<HashMap<Fragment, f64>>,
}

impl<'a> Prober<'a> {
    pub fn new(source: Source<'a>, tess: &'a Tesselation, gl: &'a GateLattice) -> Self {
        Prober {
            source,
            tess,
            gl,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn probability(&self, f: &Fragment) -> Result<f64> {
        if let Some(&p) = self.cache.borrow().get(f) {
            return Ok(p);
        }
        let c = validate_circuit(f, self.gl)?;
        let p = match &self.source {
            Source::Oracle => ideal_probability(&c, self.tess, self.gl)?,
            Source::Exact {
                codec,
                stuff,
                strategy,
            } => exact_probability(*codec, stuff, &c, self.tess, *strategy)?,
            Source::Empirical {
                codec,
                stuff,
                strategy,
                m,
                seed,
            } => {
                let mut h = DefaultHasher::new();
                f.hash(&mut h);
                empirical_probability(
                    *codec,
                    stuff,
                    &c,
                    self.tess,
                    *strategy,
                    *m,
                    mix(*seed, 5, h.finish()),
                )?
            }
        };
        self.cache.borrow_mut().insert(f.clone(), p);
        Ok(p)
    }

    /// Distinct circuits evaluated so far.
    pub fn evaluated(&self) -> Vec<Fragment> {
        self.cache.borrow().keys().cloned().collect()
    }
}

/// `M[i, j] = p(fragments[i] ∪ probes[j])`.
pub fn probability_matrix(
    prober: &Prober,
    fragments: &[Fragment],
    probes: &[Fragment],
) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(fragments.len(), probes.len());
    let mut bad = Vec::new();
    for (i, f) in fragments.iter().enumerate() {
        for (j, g) in probes.iter().enumerate() {
            let u = match f.union(g) {
                Ok(u) => u,
                Err(_) => {
                    bad.push((i, j));
                    continue;
                }
            };
            match prober.probability(&u) {
                Ok(p) => m[(i, j)] = p,
                Err(Error::InvalidCircuit(_)) => bad.push((i, j)),
                Err(e) => return Err(e),
            }
        }
    }
    if !bad.is_empty() {
        let list: Vec<String> = bad
            .iter()
            .take(12)
            .map(|(i, j)| format!("({i},{j})"))
            .collect();
        return Err(Error::InvalidCircuit(format!(
            "{} fragment/probe pairs do not close: {}{}",
            bad.len(),
            list.join(" "),
            if bad.len() > 12 { " ..." } else { "" }
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct TomographicSet {
    pub region: Vec<TesselId>,
    /// Selected rows of the probability matrix, in pivot order.
    pub omega: Vec<usize>,
    /// The basis fragments `F^k`, when the matrix rows were fragments.
    pub fragments: Vec<Fragment>,
    pub probes: Vec<Fragment>,
    /// The probability matrix restricted to the rows in `omega`.
    pub basis: DMatrix<f64>,
    /// Magnitudes of the pivoted triangular factor's diagonal.
    pub pivots: Vec<f64>,
    pub tol: f64,
    pub ridge: f64,
    /// Some pivot lies within a factor of 10 of the tolerance.
    pub degenerate: bool,
}

impl TomographicSet {
    pub fn size(&self) -> usize {
        self.omega.len()
    }

    /// Attach the region, fragment rows and probe columns the matrix came from.
    pub fn labelled(
        mut self,
        region: Vec<TesselId>,
        fragments: &[Fragment],
        probes: &[Fragment],
    ) -> Self {
        self.region = region;
        self.fragments = self.omega.iter().map(|&k| fragments[k].clone()).collect();
        self.probes = probes.to_vec();
        self
    }
}

/// Maximal independent row set of `m` by QR with column pivoting on `mᵀ`.
pub fn tomographic_set(m: &DMatrix<f64>, tol: f64) -> Result<TomographicSet> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probability matrix".into()));
    }
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::Tomography("empty probability matrix".into()));
    }
    let qr = m.transpose().col_piv_qr();
    let r = qr.r();
    let mut order = DMatrix::from_fn(1, m.nrows(), |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    let k = m.nrows().min(m.ncols());
    let pivots: Vec<f64> = (0..k).map(|i| r[(i, i)].abs()).collect();
    let rank = pivots.iter().take_while(|&&d| d > tol).count();
    let degenerate = pivots.iter().any(|&d| d > tol / 10.0 && d < tol * 10.0);
    let omega: Vec<usize> = (0..rank).map(|i| order[(0, i)] as usize).collect();
    let basis = DMatrix::from_fn(rank, m.ncols(), |i, j| m[(omega[i], j)]);
    Ok(TomographicSet {
        region: Vec::new(),
        omega,
        fragments: Vec::new(),
        probes: Vec::new(),
        basis,
        pivots,
        tol,
        ridge: 0.0,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RVector {
    pub region: Vec<TesselId>,
    pub coefficients: Vec<f64>,
    /// Largest reconstruction error over the probes.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedState {
    pub region: Vec<TesselId>,
    pub values: Vec<f64>,
}

impl RVector {
    pub fn probability(&self, state: &GeneralizedState) -> f64 {
        self.coefficients
            .iter()
            .zip(&state.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Least-squares `r` with `row ≈ rᵀ · basis`, refused when the residual
/// exceeds ten times the rank tolerance.
pub fn r_vector(row: &[f64], ts: &TomographicSet) -> Result<RVector> {
    let (k, n) = (ts.basis.nrows(), ts.basis.ncols());
    if row.len() != n {
        return Err(Error::Shape(format!(
            "row of {} probes, tomographic set has {n}",
            row.len()
        )));
    }
    let extra = if ts.ridge > 0.0 { k } else { 0 };
    let mut a = DMatrix::zeros(n + extra, k);
    let mut b = DMatrix::zeros(n + extra, 1);
    for j in 0..n {
        for i in 0..k {
            a[(j, i)] = ts.basis[(i, j)];
        }
        b[(j, 0)] = row[j];
    }
    for i in 0..extra {
        a[(n + i, i)] = ts.ridge.sqrt();
    }
    let r = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Tomography(e.to_string()))?;
    let coefficients: Vec<f64> = r.iter().copied().collect();
    let residual = (0..n)
        .map(|j| {
            ((0..k)
                .map(|i| coefficients[i] * ts.basis[(i, j)])
                .sum::<f64>()
                - row[j])
                .abs()
        })
        .fold(0.0, f64::max);
    if residual > 10.0 * ts.tol {
        return Err(Error::Tomography(format!(
            "residual {residual:.3e} exceeds {:.3e}: probes are not tomographically complete",
            10.0 * ts.tol
        )));
    }
    Ok(RVector {
        region: ts.region.clone(),
        coefficients,
        residual,
    })
}

/// The r-vector of a fragment on the set's region, measured against its probes.
pub fn r_vector_of(prober: &Prober, ts: &TomographicSet, f: &Fragment) -> Result<RVector> {
    let m = probability_matrix(prober, std::slice::from_ref(f), &ts.probes)?;
    let row: Vec<f64> = m.row(0).iter().copied().collect();
    r_vector(&row, ts)
}

/// `p(F^k ∪ probe)` over the basis fragments.
pub fn generalized_state(
    prober: &Prober,
    ts: &TomographicSet,
    probe: &Fragment,
) -> Result<GeneralizedState> {
    let m = probability_matrix(prober, &ts.fragments, std::slice::from_ref(probe))?;
    Ok(GeneralizedState {
        region: ts.region.clone(),
        values: m.column(0).iter().copied().collect(),
    })
}

/// Fragment tomography of one region: the matrix over `fragments × probes`
/// and its tomographic set.
pub fn region_tomography(
    prober: &Prober,
    region: Vec<TesselId>,
    fragments: &[Fragment],
    probes: &[Fragment],
    tol: f64,
) -> Result<(DMatrix<f64>, TomographicSet)> {
    let m = probability_matrix(prober, fragments, probes)?;
    let mut ts = tomographic_set(&m, tol)?.labelled(region, fragments, probes);
    ts.ridge = prober.source.ridge();
    Ok((m, ts))
}

#[derive(Debug, Clone)]
pub struct CompositionTomograph {
    pub region1: Vec<TesselId>,
    pub region2: Vec<TesselId>,
    /// `|Ω₁₂| × (|Ω₁|·|Ω₂|)`, columns ordered with the second index fastest.
    pub lambda: DMatrix<f64>,
    pub omega: (usize, usize, usize),
    /// Largest misfit of `Λ (r₁ ⊗ r₂)` over the spanning family.
    pub fit_residual: f64,
}

impl CompositionTomograph {
    pub fn bound_holds(&self) -> bool {
        self.omega.2 <= self.omega.0 * self.omega.1
    }

    pub fn compose(&self, r1: &RVector, r2: &RVector) -> Vec<f64> {
        let k = kron(&r1.coefficients, &r2.coefficients);
        (0..self.lambda.nrows())
            .map(|i| (0..k.len()).map(|j| self.lambda[(i, j)] * k[j]).sum())
            .collect()
    }
}

fn kron(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| x * y))
        .collect()
}

/// Least-squares `Λ` with `r₁₂[F₁ ∪ F₂] = Λ (r₁[F₁] ⊗ r₂[F₂])` over a family
/// of composite fragments.
pub fn composition_tomograph(
    prober: &Prober,
    ts1: &TomographicSet,
    ts2: &TomographicSet,
    ts12: &TomographicSet,
    family: &[(Fragment, Fragment)],
) -> Result<CompositionTomograph> {
    let (d1, d2, d12) = (ts1.size(), ts2.size(), ts12.size());
    let n = family.len();
    let mut k = DMatrix::zeros(d1 * d2, n);
    let mut r = DMatrix::zeros(d12, n);
    for (c, (f1, f2)) in family.iter().enumerate() {
        let v = kron(
            &r_vector_of(prober, ts1, f1)?.coefficients,
            &r_vector_of(prober, ts2, f2)?.coefficients,
        );
        let w = r_vector_of(prober, ts12, &f1.union(f2)?)?;
        for (i, x) in v.iter().enumerate() {
            k[(i, c)] = *x;
        }
        for (i, x) in w.coefficients.iter().enumerate() {
            r[(i, c)] = *x;
        }
    }
    let sv = k.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > 1e-10 * smax.max(1.0)).count();
    if rank < d1 * d2 {
        return Err(Error::Tomography(format!(
            "spanning family has rank {rank}, composition needs {}: underdetermined",
            d1 * d2
        )));
    }
    let lt = k
        .transpose()
        .svd(true, true)
        .solve(&r.transpose(), 1e-14)
        .map_err(|e| Error::Tomography(e.to_string()))?;
    let lambda = lt.transpose();
    let fit_residual = (&lambda * &k - &r).abs().max();
    Ok(CompositionTomograph {
        region1: ts1.region.clone(),
        region2: ts2.region.clone(),
        lambda,
        omega: (d1, d2, d12),
        fit_residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proportionality {
    /// `p_{F|T}`: the factor with `r[F] ≈ c · Σ_l r[F_l]`.
    pub constant: f64,
    /// Largest entry of `r[F] − c · Σ_l r[F_l]`.
    pub residual: f64,
}

/// Tests whether `r[F]` is proportional to the summed r-vectors of a
/// mutually exclusive, exhaustive set containing `F`.
pub fn circuit_probability_from_r(
    prober: &Prober,
    ts: &TomographicSet,
    f: &Fragment,
    choice: &[Fragment],
) -> Result<Proportionality> {
    if !choice.contains(f) {
        return Err(Error::Tomography(
            "the exclusive set must contain the fragment".into(),
        ));
    }
    let rows = probability_matrix(prober, choice, &ts.probes)?;
    for (j, probe) in ts.probes.iter().enumerate() {
        if let Ok(p) = prober.probability(probe) {
            let s: f64 = rows.column(j).sum();
            if (s - p).abs() > 10.0 * ts.tol.max(1e-9) {
                return Err(Error::Tomography(format!(
                    "outcome set is not exhaustive: probe {j} sums to {s:.6} against {p:.6}"
                )));
            }
        }
    }
    let rf = r_vector_of(prober, ts, f)?.coefficients;
    let mut sum = vec![0.0; rf.len()];
    for g in choice {
        for (s, x) in sum.iter_mut().zip(r_vector_of(prober, ts, g)?.coefficients) {
            *s += x;
        }
    }
    let ss: f64 = sum.iter().map(|x| x * x).sum();
    if ss == 0.0 {
        return Err(Error::Tomography("summed r-vector vanishes".into()));
    }
    let constant = rf.iter().zip(&sum).map(|(a, b)| a * b).sum::<f64>() / ss;
    let residual = rf
        .iter()
        .zip(&sum)
        .map(|(a, b)| (a - constant * b).abs())
        .fold(0.0, f64::max);
    Ok(Proportionality { constant, residual })
}

/// Single-qubit step of a preparation or read-out program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QubitOp {
    H,
    P,
    R,
    Measure(u8),
}

use QubitOp::*;

/// Preparations `|0⟩, H|0⟩, PH|0⟩, RH|0⟩` per qubit.
pub const PREP_PROGRAMS: [&[QubitOp]; 4] = [&[], &[H], &[H, P], &[H, R]];
/// Read-outs: discard, and the zero result of Z, X and Y measurements.
pub const READ_PROGRAMS: [&[QubitOp]; 4] =
    [&[], &[Measure(0)], &[H, Measure(0)], &[P, H, Measure(0)]];

/// Left and right flank labels usable on the chain: identity on the edge side.
pub const LEFT_FLANK: [GateLabel; 7] = [
    GateLabel::II,
    GateLabel::IH,
    GateLabel::IP,
    GateLabel::IR,
    GateLabel::IM0,
    GateLabel::IM1,
    GateLabel::PrepZZ,
];
pub const RIGHT_FLANK: [GateLabel; 7] = [
    GateLabel::II,
    GateLabel::HI,
    GateLabel::PI,
    GateLabel::RI,
    GateLabel::M0I,
    GateLabel::M1I,
    GateLabel::PrepZZ,
];

fn on_left(op: QubitOp) -> GateLabel {
    match op {
        H => GateLabel::HI,
        P => GateLabel::PI,
        R => GateLabel::RI,
        Measure(0) => GateLabel::M0I,
        Measure(_) => GateLabel::M1I,
    }
}

fn on_right(op: QubitOp) -> GateLabel {
    match op {
        H => GateLabel::IH,
        P => GateLabel::IP,
        R => GateLabel::IR,
        Measure(0) => GateLabel::IM0,
        Measure(_) => GateLabel::IM1,
    }
}

/// Row geometry of a chain strip. Qubit 0 runs through the left flanks'
/// right side and the spine's left side, qubit 1 mirrors it.
pub struct Chain<'a> {
    pub tess: &'a Tesselation,
    pub gl: &'a GateLattice,
    lay: SpineLayout,
    rows: usize,
    row_of: HashMap<TesselId, i64>,
}

impl<'a> Chain<'a> {
    pub fn new(tess: &'a Tesselation, gl: &'a GateLattice) -> Result<Self> {
        if tess.l_sites != 2 * tess.period_x {
            return Err(Error::InvalidGeometry(format!(
                "chain tomography needs L = 2·P_x, got L = {} and P_x = {}",
                tess.l_sites, tess.period_x
            )));
        }
        let lay = SpineLayout::new(tess);
        let mut row_of = HashMap::new();
        let mut rows = 0;
        let site = |p: (i64, i64)| tess.octagon_at(p.0, p.1).filter(|&id| gl.is_gate_site(id));
        loop {
            let r = rows as i64;
            let ids: Vec<Option<TesselId>> = if r % 2 == 1 {
                vec![site(lay.spine(r))]
            } else {
                vec![site(lay.left(r)), site(lay.right(r))]
            };
            if ids.iter().any(|i| i.is_none()) {
                break;
            }
            for id in ids.into_iter().flatten() {
                row_of.insert(id, r);
            }
            rows += 1;
        }
        Ok(Chain {
            tess,
            gl,
            lay,
            rows,
            row_of,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn is_spine(row: i64) -> bool {
        row % 2 == 1
    }

    fn check(&self, row: i64) -> Result<()> {
        if row < 0 || row >= self.rows as i64 {
            return Err(Error::InvalidGeometry(format!(
                "row {row} outside the chain's {} rows",
                self.rows
            )));
        }
        Ok(())
    }

    fn at(&self, p: (i64, i64)) -> TesselId {
        self.tess.octagon_at(p.0, p.1).expect("row checked")
    }

    /// Octagon carrying qubit `q` at a flank row.
    pub fn flank(&self, row: i64, q: usize) -> Result<TesselId> {
        self.check(row)?;
        Ok(self.at(if q == 0 {
            self.lay.left(row)
        } else {
            self.lay.right(row)
        }))
    }

    pub fn spine(&self, row: i64) -> Result<TesselId> {
        self.check(row)?;
        Ok(self.at(self.lay.spine(row)))
    }

    pub fn row_sites(&self, row: i64) -> Result<Vec<TesselId>> {
        if Self::is_spine(row) {
            Ok(vec![self.spine(row)?])
        } else {
            Ok(vec![self.flank(row, 0)?, self.flank(row, 1)?])
        }
    }

    pub fn row_of(&self, id: TesselId) -> Option<i64> {
        self.row_of.get(&id).copied()
    }

    /// Every fragment filling one row: the UGS on the spine, or each pair of
    /// flank labels.
    pub fn box_fragments(&self, row: i64) -> Result<Vec<Fragment>> {
        if Self::is_spine(row) {
            let id = self.spine(row)?;
            Ok(UGS
                .iter()
                .map(|&g| Fragment::from_pairs([(id, g)]))
                .collect())
        } else {
            let (l, r) = (self.flank(row, 0)?, self.flank(row, 1)?);
            Ok(LEFT_FLANK
                .iter()
                .flat_map(|&a| {
                    RIGHT_FLANK
                        .iter()
                        .map(move |&b| Fragment::from_pairs([(l, a), (r, b)]))
                })
                .collect())
        }
    }

    /// Preparation ending on row `cut − 1`: `PrepZZ`, then each qubit's
    /// program, with the last step nearest the cut.
    pub fn preparation(&self, cut: i64, programs: [&[QubitOp]; 2]) -> Result<Fragment> {
        let mut pend = [programs[0].to_vec(), programs[1].to_vec()];
        let mut f = Fragment::new();
        let mut row = cut - 1;
        loop {
            self.check(row)?;
            let done = pend.iter().all(|p| p.is_empty());
            if Self::is_spine(row) {
                let id = self.spine(row)?;
                if done {
                    f.insert(id, GateLabel::PrepZZ);
                    break;
                }
                let q = usize::from(pend[1].len() > pend[0].len());
                let op = pend[q].pop().expect("pending");
                f.insert(id, if q == 0 { on_left(op) } else { on_right(op) });
            } else {
                for (q, p) in pend.iter_mut().enumerate() {
                    let g = if done {
                        GateLabel::PrepZZ
                    } else {
                        p.pop().map_or(GateLabel::II, |op| {
                            if q == 0 {
                                on_right(op)
                            } else {
                                on_left(op)
                            }
                        })
                    };
                    f.insert(self.flank(row, q)?, g);
                }
                if done {
                    break;
                }
            }
            row -= 1;
        }
        Ok(f)
    }

    /// Read-out starting on row `cut`, running each qubit's program in order.
    pub fn readout(&self, cut: i64, programs: [&[QubitOp]; 2]) -> Result<Fragment> {
        let mut pend: [VecDeque<QubitOp>; 2] = [
            programs[0].iter().copied().collect(),
            programs[1].iter().copied().collect(),
        ];
        let mut f = Fragment::new();
        let mut row = cut;
        while pend.iter().any(|p| !p.is_empty()) {
            self.check(row)?;
            if Self::is_spine(row) {
                let q = usize::from(pend[1].len() > pend[0].len());
                let op = pend[q].pop_front().expect("pending");
                f.insert(
                    self.spine(row)?,
                    if q == 0 { on_left(op) } else { on_right(op) },
                );
            } else {
                for (q, p) in pend.iter_mut().enumerate() {
                    if let Some(op) = p.pop_front() {
                        f.insert(
                            self.flank(row, q)?,
                            if q == 0 { on_right(op) } else { on_left(op) },
                        );
                    }
                }
            }
            row += 1;
        }
        Ok(f)
    }

    pub fn preparations(&self, cut: i64, budget: usize) -> Result<Vec<Fragment>> {
        let mut v = Vec::new();
        for a in PREP_PROGRAMS {
            for b in PREP_PROGRAMS {
                v.push(self.preparation(cut, [a, b])?);
            }
        }
        v.truncate(budget);
        Ok(v)
    }

    pub fn readouts(&self, cut: i64, budget: usize) -> Result<Vec<Fragment>> {
        let mut v = Vec::new();
        for a in READ_PROGRAMS {
            for b in READ_PROGRAMS {
                v.push(self.readout(cut, [a, b])?);
            }
        }
        v.truncate(budget);
        Ok(v)
    }

    /// Probes around rows `lo..=hi`: every preparation below with every
    /// read-out above.
    pub fn probes(&self, lo: i64, hi: i64) -> Result<Vec<Fragment>> {
        let preps = self.preparations(lo, usize::MAX)?;
        let reads = self.readouts(hi + 1, usize::MAX)?;
        let mut v = Vec::with_capacity(preps.len() * reads.len());
        for p in &preps {
            for r in &reads {
                v.push(p.union(r)?);
            }
        }
        Ok(v)
    }

    pub fn region(&self, lo: i64, hi: i64) -> Result<Vec<TesselId>> {
        let mut v = Vec::new();
        for r in lo..=hi {
            v.extend(self.row_sites(r)?);
        }
        Ok(v)
    }

    /// A circuit split into consecutive rows, from its lowest row up.
    pub fn layers(&self, f: &Fragment) -> Result<(i64, Vec<Fragment>)> {
        let mut rows: Vec<(i64, TesselId, GateLabel)> = Vec::new();
        for (&id, &g) in &f.assignments {
            let r = self.row_of(id).ok_or_else(|| {
                Error::InvalidGeometry(format!("tessel {} is not on the chain", id.0))
            })?;
            rows.push((r, id, g));
        }
        let lo = rows
            .iter()
            .map(|r| r.0)
            .min()
            .ok_or_else(|| Error::InvalidCircuit("empty circuit".into()))?;
        let hi = rows.iter().map(|r| r.0).max().unwrap_or(lo);
        let mut layers = vec![Fragment::new(); (hi - lo + 1) as usize];
        for (r, id, g) in rows {
            layers[(r - lo) as usize].insert(id, g);
        }
        if layers.iter().any(|l| l.is_empty()) {
            return Err(Error::InvalidCircuit(
                "circuit skips a row of the chain".into(),
            ));
        }
        Ok((lo, layers))
    }
}

/// Random chain circuit over `n_rows` rows starting at `base`: `PrepZZ` on
/// the bottom row, unitaries in between and measurements on the top row.
pub fn chain_circuit(
    chain: &Chain,
    base: i64,
    n_rows: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Circuit> {
    use GateLabel::*;
    const SPINE: [GateLabel; 9] = [Cnot, HI, IH, PI, IP, RI, IR, II, Swap];
    const LEFT: [GateLabel; 4] = [II, IH, IP, IR];
    const RIGHT: [GateLabel; 4] = [II, HI, PI, RI];
    if n_rows < 2 {
        return Err(Error::Config(
            "chain circuits need at least two rows".into(),
        ));
    }
    let mut f = Fragment::new();
    let top = n_rows as i64 - 1;
    for k in 0..n_rows as i64 {
        let row = base + k;
        let bit = |rng: &mut ChaCha8Rng| rng.gen_range(0..2) == 0;
        if Chain::is_spine(row) {
            let g = match k {
                0 => PrepZZ,
                _ if k == top => [M0I, M1I, IM0, IM1][rng.gen_range(0..4)],
                _ => SPINE[rng.gen_range(0..SPINE.len())],
            };
            f.insert(chain.spine(row)?, g);
        } else {
            let (a, b) = match k {
                0 => (PrepZZ, PrepZZ),
                _ if k == top => (
                    if bit(rng) { IM0 } else { IM1 },
                    if bit(rng) { M0I } else { M1I },
                ),
                _ => (LEFT[rng.gen_range(0..4)], RIGHT[rng.gen_range(0..4)]),
            };
            f.insert(chain.flank(row, 0)?, a);
            f.insert(chain.flank(row, 1)?, b);
        }
    }
    validate_circuit(&f, chain.gl)
}

/// Random chain circuits with exactly `octagons` octagons, bases drawn from
/// `bases`.
pub fn chain_test_family(
    chain: &Chain,
    bases: &[i64],
    octagons: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Circuit>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > 100 * count.max(1) {
            return Err(Error::RetryExhausted(tries));
        }
        let base = bases[rng.gen_range(0..bases.len())];
        // Rows alternate 1 and 2 octagons; find the row count that fits.
        let mut n = 0;
        let mut size = 0;
        while size < octagons {
            size += if Chain::is_spine(base + n as i64) {
                1
            } else {
                2
            };
            n += 1;
        }
        if size != octagons {
            continue;
        }
        out.push(chain_circuit(chain, base, n, &mut rng)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundednessConfig {
    /// Rows of the chain per bounded box.
    pub box_rows: usize,
    pub rank_tol: f64,
    /// Candidate fiducials per side of a cut.
    pub probe_budget: usize,
    /// Deviation above which the report flags a boundedness failure.
    pub failure_threshold: f64,
}

impl Default for BoundednessConfig {
    fn default() -> Self {
        BoundednessConfig {
            box_rows: 1,
            rank_tol: 1e-8,
            probe_budget: 16,
            failure_threshold: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
struct Cut {
    preps: Vec<Fragment>,
    reads: Vec<Fragment>,
    inverse: DMatrix<f64>,
    rank: usize,
    degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub octagons: usize,
    pub rows: usize,
    pub direct: f64,
    pub reconstructed: f64,
}

impl Reconstruction {
    pub fn deviation(&self) -> f64 {
        (self.direct - self.reconstructed).abs()
    }
}

#[derive(Debug, Clone)]
pub struct Theorem1Report {
    pub source: &'static str,
    pub config: BoundednessConfig,
    /// `(cut row, |Ω|)` for every cut used.
    pub cuts: Vec<(i64, usize)>,
    pub degenerate_cuts: usize,
    /// Distinct bounded circuits evaluated.
    pub data_circuits: usize,
    /// Largest bounded circuit, in octagons.
    pub largest_data_circuit: usize,
    pub largest_box: usize,
    pub circuits: Vec<Reconstruction>,
    pub max_deviation: f64,
    pub flagged: bool,
}

impl Theorem1Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(s, "# source {}", self.source);
        let _ = writeln!(
            s,
            "# box_rows {} rank_tol {:e} probe_budget {} failure_threshold {:e}",
            c.box_rows, c.rank_tol, c.probe_budget, c.failure_threshold
        );
        for (row, k) in &self.cuts {
            let _ = writeln!(s, "cut {row} omega {k}");
        }
        let _ = writeln!(
            s,
            "data_circuits {} largest_data_circuit {} largest_box {} degenerate_cuts {}",
            self.data_circuits, self.largest_data_circuit, self.largest_box, self.degenerate_cuts
        );
        for (i, r) in self.circuits.iter().enumerate() {
            let _ = writeln!(
                s,
                "circuit {i} octagons {} rows {} direct {:.12} reconstructed {:.12} deviation {:.3e}",
                r.octagons,
                r.rows,
                r.direct,
                r.reconstructed,
                r.deviation()
            );
        }
        let _ = writeln!(s, "max_deviation {:.3e}", self.max_deviation);
        let _ = writeln!(s, "boundedness_failure {}", self.flagged);
        s
    }
}

/// Inverse of the pivot-row, pivot-column submatrix, the row and column
/// pivots, and whether either pivot set was degenerate.
type Support = (DMatrix<f64>, Vec<usize>, Vec<usize>, bool);

fn invert_on_support(g: &DMatrix<f64>, tol: f64) -> Result<Support> {
    let rows = tomographic_set(g, tol)?;
    let sub = DMatrix::from_fn(rows.size(), g.ncols(), |i, j| g[(rows.omega[i], j)]);
    let cols = tomographic_set(&sub.transpose(), tol)?;
    let k = cols.size();
    let sq = DMatrix::from_fn(k, k, |i, j| sub[(i, cols.omega[j])]);
    let inv = sq
        .try_inverse()
        .ok_or_else(|| Error::Tomography("singular cut matrix".into()))?;
    Ok((
        inv,
        rows.omega,
        cols.omega,
        rows.degenerate || cols.degenerate,
    ))
}

/// Reconstructs each test circuit's probability from bounded data only.
///
/// The circuit is cut into boxes of `box_rows` rows. At each cut, the matrix
/// of preparation-below × read-out above probabilities is inverted on a
/// tomographic subset; each box contributes its matrix between the adjacent
/// cuts' fiducials, and the bottom and top rows contribute vectors. The
/// product contracts the r-vectors of neighbouring boxes through the cut,
/// which is the composition tomograph of the pair. Every evaluated data
/// circuit holds one box plus fiducials; the test circuits themselves are
/// only evaluated directly, for comparison.
pub fn verify_theorem1(
    chain: &Chain,
    cfg: &BoundednessConfig,
    prober: &Prober,
    tests: &[Circuit],
) -> Result<Theorem1Report> {
    if cfg.box_rows == 0 {
        return Err(Error::Config("boxes need at least one row".into()));
    }
    let mut cuts: HashMap<i64, Cut> = HashMap::new();
    let mut used: Vec<Fragment> = Vec::new();
    let mut cut_at = |row: i64, used: &mut Vec<Fragment>| -> Result<Cut> {
        if let Some(c) = cuts.get(&row) {
            return Ok(c.clone());
        }
        let preps = chain.preparations(row, cfg.probe_budget)?;
        let reads = chain.readouts(row, cfg.probe_budget)?;
        let g = probability_matrix(prober, &preps, &reads)?;
        for p in &preps {
            for r in &reads {
                used.push(p.union(r)?);
            }
        }
        let (inverse, pr, rd, degenerate) = invert_on_support(&g, cfg.rank_tol)?;
        let c = Cut {
            preps: pr.iter().map(|&i| preps[i].clone()).collect(),
            reads: rd.iter().map(|&i| reads[i].clone()).collect(),
            rank: inverse.nrows(),
            inverse,
            degenerate,
        };
        cuts.insert(row, c.clone());
        Ok(c)
    };
    let mut out = Vec::with_capacity(tests.len());
    let mut largest_box = 0;
    for c in tests {
        let (base, layers) = chain.layers(&c.fragment)?;
        let n = layers.len();
        let direct = prober.probability(&c.fragment)?;
        if n == 1 {
            return Err(Error::Tomography("a one-row circuit has no cut".into()));
        }
        // Group rows: bottom row, interior boxes, top row.
        let mut groups: Vec<(i64, Fragment)> = vec![(base, layers[0].clone())];
        let mut k = 1;
        while k < n - 1 {
            let end = (k + cfg.box_rows).min(n - 1);
            let mut f = Fragment::new();
            for l in &layers[k..end] {
                f = f.union(l)?;
            }
            groups.push((base + k as i64, f));
            k = end;
        }
        groups.push((base + n as i64 - 1, layers[n - 1].clone()));
        largest_box = groups
            .iter()
            .map(|g| g.1.len())
            .fold(largest_box, usize::max);
        let first = cut_at(groups[1].0, &mut used)?;
        let mut v: Vec<f64> = Vec::with_capacity(first.rank);
        for r in &first.reads {
            let f = groups[0].1.union(r)?;
            v.push(prober.probability(&f)?);
            used.push(f);
        }
        let mut below = first;
        for w in 1..groups.len() {
            let x: Vec<f64> = (0..below.rank)
                .map(|j| (0..below.rank).map(|i| v[i] * below.inverse[(i, j)]).sum())
                .collect();
            let (row, frag) = &groups[w];
            if w == groups.len() - 1 {
                let mut p = 0.0;
                for (j, prep) in below.preps.iter().enumerate() {
                    let f = prep.union(frag)?;
                    p += x[j] * prober.probability(&f)?;
                    used.push(f);
                }
                out.push(Reconstruction {
                    octagons: c.fragment.len(),
                    rows: n,
                    direct,
                    reconstructed: p,
                });
                break;
            }
            let above = cut_at(groups[w + 1].0, &mut used)?;
            let _ = row;
            let mut nv = vec![0.0; above.rank];
            for (i, prep) in below.preps.iter().enumerate() {
                let pf = prep.union(frag)?;
                for (j, r) in above.reads.iter().enumerate() {
                    let f = pf.union(r)?;
                    nv[j] += x[i] * prober.probability(&f)?;
                    used.push(f);
                }
            }
            v = nv;
            below = above;
        }
    }
    let used: HashSet<Fragment> = used.into_iter().collect();
    let mut cut_list: Vec<(i64, usize)> = cuts.iter().map(|(&r, c)| (r, c.rank)).collect();
    cut_list.sort();
    let max_deviation = out.iter().map(|r| r.deviation()).fold(0.0, f64::max);
    Ok(Theorem1Report {
        source: prober.source.name(),
        config: *cfg,
        degenerate_cuts: cuts.values().filter(|c| c.degenerate).count(),
        cuts: cut_list,
        data_circuits: used.len(),
        largest_data_circuit: used.iter().map(|f| f.len()).max().unwrap_or(0),
        largest_box,
        circuits: out,
        max_deviation,
        flagged: max_deviation > cfg.failure_threshold,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conjecture1Config {
    pub ladder: Vec<usize>,
    pub circuits_per_size: usize,
    pub m: usize,
    /// Held-out loss the scheme was trained to.
    pub epsilon: f64,
    pub err: ErrKind,
    pub strategy: MemoryStrategy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conjecture1Row {
    pub gates: usize,
    pub circuits: usize,
    pub mean_err: f64,
    pub max_err: f64,
    /// Mean `|p̂ − p|`.
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conjecture1Report {
    pub epsilon: f64,
    pub err: ErrKind,
    pub m: usize,
    pub rows: Vec<Conjecture1Row>,
    /// Least-squares `B` in `err ≈ B·ε·N`, through the origin.
    pub slope: f64,
    pub slope_stderr: f64,
    /// `mean_err − B·ε·N` per size.
    pub residuals: Vec<f64>,
    /// Log-log slope of `mean_err` against `N`.
    pub exponent: f64,
    pub exponent_stderr: f64,
    pub monotone: bool,
    /// Exponent no larger than 1 within two standard errors.
    pub linear_consistent: bool,
}

impl Conjecture1Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# epsilon {:.6e} err {} m {}",
            self.epsilon,
            self.err.name(),
            self.m
        );
        for (r, res) in self.rows.iter().zip(&self.residuals) {
            let _ = writeln!(
                s,
                "gates {} circuits {} mean_err {:.6e} max_err {:.6e} mean_abs {:.6e} residual {:.6e}",
                r.gates, r.circuits, r.mean_err, r.max_err, r.mean_abs, res
            );
        }
        let _ = writeln!(
            s,
            "slope {:.6e} stderr {:.3e}",
            self.slope, self.slope_stderr
        );
        let _ = writeln!(
            s,
            "exponent {:.4} stderr {:.4}",
            self.exponent, self.exponent_stderr
        );
        let _ = writeln!(
            s,
            "monotone {} linear_consistent {}",
            self.monotone, self.linear_consistent
        );
        s
    }
}

/// Measures `err(p̂_C, p_C)` on random circuits of each size in the ladder
/// and fits it against `ε·N_C`.
pub fn conjecture1_experiment(
    codec: &dyn Codec,
    stuff: &StuffSpec,
    tess: &Tesselation,
    gl: &GateLattice,
    sampler: RandomCircuitConfig,
    cfg: &Conjecture1Config,
) -> Result<Conjecture1Report> {
    if cfg.ladder.is_empty() || cfg.circuits_per_size == 0 {
        return Err(Error::Config("empty circuit-size ladder".into()));
    }
    let mut rows = Vec::with_capacity(cfg.ladder.len());
    for (li, &n) in cfg.ladder.iter().enumerate() {
        let mut sc = sampler.clone();
        sc.seed = mix(cfg.seed, 6, li as u64);
        let mut s = CircuitSampler::new(sc, tess)?;
        let (mut errs, mut abs) = (Vec::new(), Vec::new());
        let mut tries = 0;
        while errs.len() < cfg.circuits_per_size {
            tries += 1;
            if tries > 1000 {
                return Err(Error::RetryExhausted(tries));
            }
            let c = s.sample_with_count(n, gl)?;
            if c.outcome_assignment.is_empty() {
                continue;
            }
            let p = ideal_probability(&c, tess, gl)?;
            let k = errs.len() as u64;
            let ph = empirical_probability(
                codec,
                stuff,
                &c,
                tess,
                cfg.strategy,
                cfg.m,
                mix(cfg.seed, 7 + li as u64, k),
            )?;
            errs.push(cfg.err.value(ph, p));
            abs.push((ph - p).abs());
        }
        let k = errs.len() as f64;
        rows.push(Conjecture1Row {
            gates: n,
            circuits: errs.len(),
            mean_err: errs.iter().sum::<f64>() / k,
            max_err: errs.iter().cloned().fold(0.0, f64::max),
            mean_abs: abs.iter().sum::<f64>() / k,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| cfg.epsilon * r.gates as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_err).collect();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let slope = if sxx > 0.0 {
        xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / sxx
    } else {
        f64::NAN
    };
    let residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - slope * x).collect();
    let dof = (rows.len() as f64 - 1.0).max(1.0);
    let slope_stderr = (residuals.iter().map(|r| r * r).sum::<f64>() / dof / sxx).sqrt();
    let (exponent, exponent_stderr) = loglog_fit(&rows);
    let monotone = ys.windows(2).all(|w| w[1] >= w[0]);
    let linear_consistent = exponent.is_finite() && exponent <= 1.0 + 2.0 * exponent_stderr;
    Ok(Conjecture1Report {
        epsilon: cfg.epsilon,
        err: cfg.err,
        m: cfg.m,
        rows,
        slope,
        slope_stderr,
        residuals,
        exponent,
        exponent_stderr,
        monotone,
        linear_consistent,
    })
}

fn loglog_fit(rows: &[Conjecture1Row]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_err > 0.0)
        .map(|r| ((r.gates as f64).ln(), r.mean_err.ln()))
        .collect();
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let b = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    let a = my - b * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - a - b * p.0).powi(2)).sum();
    let se = if pts.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (b, se)
}

/// Largest non-proportionality of `r[F]` across the outcome variants of a
/// skeleton; zero for ideal circuits.
pub fn proportionality_residual(
    prober: &Prober,
    ts: &TomographicSet,
    variants: &[Fragment],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for f in variants {
        worst = worst.max(circuit_probability_from_r(prober, ts, f, variants)?.residual);
    }
    Ok(worst)
}
