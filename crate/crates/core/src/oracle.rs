//! Ideal circuit probabilities and fragment superoperators by layer-by-layer
//! density-matrix contraction over the live wires.

use crate::circuits::{
    consumer, open_inputs, open_outputs, validate_circuit, Circuit, Edge, Fragment,
};
use crate::error::{Error, Result};
use crate::gates::{channel, outcome_family, GateLabel, Outcome, Side, C64};
use crate::lattice::{GateLattice, TesselId, Tesselation};
use nalgebra::{DMatrix, Matrix2, Matrix4};
use std::collections::BTreeMap;

pub const DEFAULT_EDGE_CAP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    /// Waiting to enter this octagon on the given side.
    Bound(TesselId, Side),
    /// Left the fragment through an open upper edge.
    Out(TesselId, Side),
}

/// Operator on the live qubits; qubit k is bit k of the index.
struct Register {
    slots: Vec<Slot>,
    rho: Vec<C64>,
}

impl Register {
    fn dim(&self) -> usize {
        1 << self.slots.len()
    }

    fn find(&self, s: Slot) -> Option<usize> {
        self.slots.iter().position(|&x| x == s)
    }

    fn push(&mut self, slot: Slot, sigma: &Matrix2<C64>) {
        let d = self.dim();
        let nd = 2 * d;
        let mut out = vec![C64::new(0.0, 0.0); nd * nd];
        for b in 0..2 {
            for c in 0..2 {
                let s = sigma[(b, c)];
                if s == C64::new(0.0, 0.0) {
                    continue;
                }
                for i in 0..d {
                    for j in 0..d {
                        out[(b * d + i) * nd + c * d + j] = s * self.rho[i * d + j];
                    }
                }
            }
        }
        self.rho = out;
        self.slots.push(slot);
    }

    fn trace_out(&mut self, q: usize) {
        let d = self.dim();
        let nd = d / 2;
        let ins = |i: usize, b: usize| {
            let low = i & ((1 << q) - 1);
            ((i >> q) << (q + 1)) | (b << q) | low
        };
        let mut out = vec![C64::new(0.0, 0.0); nd * nd];
        for i in 0..nd {
            for j in 0..nd {
                out[i * nd + j] =
                    self.rho[ins(i, 0) * d + ins(j, 0)] + self.rho[ins(i, 1) * d + ins(j, 1)];
            }
        }
        self.rho = out;
        self.slots.remove(q);
    }

    /// rho -> sum_k K_k rho K_k^dagger with `ql` the most significant qubit.
    fn apply(&mut self, kraus: &[Matrix4<C64>], ql: usize, qr: usize) {
        let d = self.dim();
        let (bl, br) = (1usize << ql, 1usize << qr);
        let idx = |base: usize, m: usize| {
            base | if m & 2 != 0 { bl } else { 0 } | if m & 1 != 0 { br } else { 0 }
        };
        let bases: Vec<usize> = (0..d).filter(|i| i & (bl | br) == 0).collect();
        let mut total = vec![C64::new(0.0, 0.0); d * d];
        for k in kraus {
            let mut tmp = self.rho.clone();
            for j in 0..d {
                for &b in &bases {
                    let v: [C64; 4] = std::array::from_fn(|m| tmp[idx(b, m) * d + j]);
                    for m in 0..4 {
                        let mut s = C64::new(0.0, 0.0);
                        for n in 0..4 {
                            s += k[(m, n)] * v[n];
                        }
                        tmp[idx(b, m) * d + j] = s;
                    }
                }
            }
            for i in 0..d {
                for &b in &bases {
                    let v: [C64; 4] = std::array::from_fn(|m| tmp[i * d + idx(b, m)]);
                    for m in 0..4 {
                        let mut s = C64::new(0.0, 0.0);
                        for n in 0..4 {
                            s += v[n] * k[(m, n)].conj();
                        }
                        total[i * d + idx(b, m)] += s;
                    }
                }
            }
        }
        self.rho = total;
    }
}

fn ground() -> Matrix2<C64> {
    let mut m = Matrix2::zeros();
    m[(0, 0)] = C64::new(1.0, 0.0);
    m
}

/// Contract `f`. Open inputs not present in `reg` are filled by `inject`.
/// Open outputs are traced out unless `keep_outputs`.
fn contract(
    f: &Fragment,
    tess: &Tesselation,
    gl: &GateLattice,
    mut reg: Register,
    inject: &dyn Fn(Edge) -> Matrix2<C64>,
    keep_outputs: bool,
) -> Result<Register> {
    for (id, g) in f.layer_order(tess) {
        let ch = channel(g)?;
        let mut q = [0usize; 2];
        for (k, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            q[k] = match reg.find(Slot::Bound(id, side)) {
                Some(i) => i,
                None => {
                    reg.push(Slot::Bound(id, side), &inject((id, side)));
                    reg.slots.len() - 1
                }
            };
        }
        reg.apply(&ch.kraus_ops, q[0], q[1]);
        for (k, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            reg.slots[q[k]] = match consumer(f, gl, id, side) {
                // The left output enters the upper-left child from its right.
                Some(c) => Slot::Bound(
                    c,
                    if side == Side::Left {
                        Side::Right
                    } else {
                        Side::Left
                    },
                ),
                None => Slot::Out(id, side),
            };
        }
        if !keep_outputs {
            for side in [Side::Left, Side::Right] {
                if let Some(i) = reg.find(Slot::Out(id, side)) {
                    reg.trace_out(i);
                }
            }
        }
    }
    Ok(reg)
}

fn check_sites(f: &Fragment, gl: &GateLattice) -> Result<()> {
    for (&id, &g) in &f.assignments {
        if !gl.is_gate_site(id) || g == GateLabel::Null {
            return Err(Error::InvalidCircuit(format!(
                "tessel {} cannot carry {g}",
                id.0
            )));
        }
    }
    Ok(())
}

pub fn ideal_probability(c: &Circuit, tess: &Tesselation, gl: &GateLattice) -> Result<f64> {
    probability_with_injection(&c.fragment, tess, gl, &|_| ground())
}

/// Probability of a closed fragment with `inject` supplying the state on each
/// open (shunted) input.
pub fn probability_with_injection(
    f: &Fragment,
    tess: &Tesselation,
    gl: &GateLattice,
    inject: &dyn Fn(Edge) -> Matrix2<C64>,
) -> Result<f64> {
    check_sites(f, gl)?;
    let reg = Register {
        slots: Vec::new(),
        rho: vec![C64::new(1.0, 0.0)],
    };
    let reg = contract(f, tess, gl, reg, inject, false)?;
    debug_assert!(reg.slots.is_empty());
    Ok(reg.rho[0].re.clamp(0.0, 1.0))
}

/// Probability of a fragment given as a validated-or-not fragment.
pub fn fragment_probability(f: &Fragment, tess: &Tesselation, gl: &GateLattice) -> Result<f64> {
    let c = validate_circuit(f, gl)?;
    ideal_probability(&c, tess, gl)
}

#[derive(Debug, Clone)]
pub struct OutcomeDistribution {
    pub entries: Vec<(BTreeMap<TesselId, Outcome>, f64)>,
}

impl OutcomeDistribution {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn get(&self, assignment: &BTreeMap<TesselId, Outcome>) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| &e.0 == assignment)
            .map(|e| e.1)
    }
}

/// All outcome variants of a skeleton: each measurement octagon ranges over
/// its family.
pub fn outcome_variants(skeleton: &Fragment) -> Vec<Fragment> {
    let meas: Vec<TesselId> = skeleton
        .assignments
        .iter()
        .filter(|(_, g)| g.is_measurement())
        .map(|(&id, _)| id)
        .collect();
    let mut out = Vec::with_capacity(1 << meas.len());
    for bits in 0..(1usize << meas.len()) {
        let mut f = skeleton.clone();
        for (k, id) in meas.iter().enumerate() {
            let fam = outcome_family(skeleton.assignments[id]).unwrap();
            f.insert(*id, GateLabel::from_outcome(fam[(bits >> k) & 1]));
        }
        out.push(f);
    }
    out
}

pub fn ideal_distribution(
    skeleton: &Fragment,
    tess: &Tesselation,
    gl: &GateLattice,
) -> Result<OutcomeDistribution> {
    let mut entries = Vec::new();
    for f in outcome_variants(skeleton) {
        let c = validate_circuit(&f, gl)?;
        let p = ideal_probability(&c, tess, gl)?;
        entries.push((c.outcome_assignment.clone(), p));
    }
    Ok(OutcomeDistribution { entries })
}

#[derive(Debug, Clone)]
pub struct Superoperator {
    /// Open input edges, first is the most significant qubit.
    pub inputs: Vec<Edge>,
    /// Open output edges `(octagon, side of the upper edge)`.
    pub outputs: Vec<Edge>,
    /// Column-stacking Liouville matrix, `d_out^2 x d_in^2`.
    pub matrix: DMatrix<C64>,
}

impl Superoperator {
    pub fn d_in(&self) -> usize {
        1 << self.inputs.len()
    }

    pub fn d_out(&self) -> usize {
        1 << self.outputs.len()
    }

    pub fn choi(&self) -> DMatrix<C64> {
        let (di, dout) = (self.d_in(), self.d_out());
        let mut j = DMatrix::zeros(di * dout, di * dout);
        for a in 0..di {
            for b in 0..di {
                for r in 0..dout {
                    for c in 0..dout {
                        j[(a * dout + r, b * dout + c)] = self.matrix[(c * dout + r, b * di + a)];
                    }
                }
            }
        }
        j
    }

    pub fn choi_min_eigenvalue(&self) -> f64 {
        let j = self.choi();
        let h = (&j + j.adjoint()) * C64::new(0.5, 0.0);
        h.symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Apply to an input operator given in `inputs` order.
    pub fn apply(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        let (di, dout) = (self.d_in(), self.d_out());
        let v = DMatrix::from_fn(di * di, 1, |k, _| x[(k % di, k / di)]);
        let w = &self.matrix * v;
        DMatrix::from_fn(dout, dout, |r, c| w[(c * dout + r, 0)])
    }
}

pub fn fragment_superoperator(
    f: &Fragment,
    tess: &Tesselation,
    gl: &GateLattice,
    cap: usize,
) -> Result<Superoperator> {
    check_sites(f, gl)?;
    let inputs = open_inputs(f, gl);
    let outputs = open_outputs(f, gl);
    if inputs.len() > cap {
        return Err(Error::FragmentTooLarge {
            side: "input",
            got: inputs.len(),
            cap,
        });
    }
    if outputs.len() > cap {
        return Err(Error::FragmentTooLarge {
            side: "output",
            got: outputs.len(),
            cap,
        });
    }
    let (ni, no) = (inputs.len(), outputs.len());
    let (di, dout) = (1usize << ni, 1usize << no);
    let mut m = DMatrix::zeros(dout * dout, di * di);
    // Register qubit k holds canonical input position ni-1-k.
    let in_slots: Vec<Slot> = (0..ni)
        .map(|k| {
            let (id, s) = inputs[ni - 1 - k];
            Slot::Bound(id, s)
        })
        .collect();
    let no_inject =
        |_e: Edge| -> Matrix2<C64> { unreachable!("all open inputs are pre-allocated") };
    for a in 0..di {
        for b in 0..di {
            let mut rho = vec![C64::new(0.0, 0.0); di * di];
            rho[a * di + b] = C64::new(1.0, 0.0);
            let reg = Register {
                slots: in_slots.clone(),
                rho,
            };
            let reg = contract(f, tess, gl, reg, &no_inject, true)?;
            let d = reg.dim();
            // Map canonical output index to register index.
            let pos: Vec<usize> = outputs
                .iter()
                .map(|&(id, s)| reg.find(Slot::Out(id, s)).expect("open output present"))
                .collect();
            let to_reg = |i: usize| {
                let mut r = 0;
                for (k, &q) in pos.iter().enumerate() {
                    if (i >> (no - 1 - k)) & 1 == 1 {
                        r |= 1 << q;
                    }
                }
                r
            };
            for r in 0..dout {
                for c in 0..dout {
                    m[(c * dout + r, b * di + a)] = reg.rho[to_reg(r) * d + to_reg(c)];
                }
            }
        }
    }
    Ok(Superoperator {
        inputs,
        outputs,
        matrix: m,
    })
}

/// Liouville matrix of a single gate's channel.
pub fn gate_superoperator(g: GateLabel) -> Result<DMatrix<C64>> {
    let ch = channel(g)?;
    let mut s = DMatrix::zeros(16, 16);
    for k in &ch.kraus_ops {
        for i in 0..4 {
            for j in 0..4 {
                for a in 0..4 {
                    for b in 0..4 {
                        // vec(K X K^dagger) = (conj(K) kron K) vec(X)
                        s[(j * 4 + i, b * 4 + a)] += k[(i, a)] * k[(j, b)].conj();
                    }
                }
            }
        }
    }
    Ok(s)
}
