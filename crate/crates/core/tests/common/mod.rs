//! Test-only reference oracle: pure statevectors with explicit enumeration of
//! Kraus branches. Shares no simulation code with the library.
#![allow(dead_code)]

use num_complex::Complex64 as C;
use std::collections::HashMap;
use stuffml::circuits::Fragment;
use stuffml::gates::GateLabel;
use stuffml::lattice::{TesselId, Tesselation};

type Op = [[C; 4]; 4];

fn z() -> C {
    C::new(0.0, 0.0)
}

fn r(x: f64) -> C {
    C::new(x, 0.0)
}

fn kron(a: [[C; 2]; 2], b: [[C; 2]; 2]) -> Op {
    let mut m = [[z(); 4]; 4];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    m[2 * i + k][2 * j + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    m
}

fn kraus(g: GateLabel) -> Vec<Op> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let i2 = [[r(1.0), z()], [z(), r(1.0)]];
    let h = [[r(s), r(s)], [r(s), r(-s)]];
    let p = [[r(1.0), z()], [z(), C::new(0.0, 1.0)]];
    let rr = [
        [r(1.0), z()],
        [z(), C::from_polar(1.0, std::f64::consts::PI / 8.0)],
    ];
    let p0 = [[r(1.0), z()], [z(), z()]];
    let p1 = [[z(), z()], [z(), r(1.0)]];
    let perm = |pairs: [(usize, usize); 4]| {
        let mut m = [[z(); 4]; 4];
        for (a, b) in pairs {
            m[a][b] = r(1.0);
        }
        m
    };
    use GateLabel::*;
    match g {
        Cnot => vec![perm([(0, 0), (1, 1), (2, 3), (3, 2)])],
        Swap => vec![perm([(0, 0), (1, 2), (2, 1), (3, 3)])],
        HI => vec![kron(h, i2)],
        IH => vec![kron(i2, h)],
        PI => vec![kron(p, i2)],
        IP => vec![kron(i2, p)],
        RI => vec![kron(rr, i2)],
        IR => vec![kron(i2, rr)],
        II => vec![kron(i2, i2)],
        M0I => vec![kron(p0, i2)],
        M1I => vec![kron(p1, i2)],
        IM0 => vec![kron(i2, p0)],
        IM1 => vec![kron(i2, p1)],
        PrepZZ => (0..4)
            .map(|k| {
                let mut m = [[z(); 4]; 4];
                m[0][k] = r(1.0);
                m
            })
            .collect(),
        Null => panic!("NULL in circuit"),
    }
}

fn apply(psi: &[C], op: &Op, ql: usize, qr: usize) -> Vec<C> {
    let mut out = vec![z(); psi.len()];
    for (i, a) in psi.iter().enumerate() {
        if *a == z() {
            continue;
        }
        let n = ((i >> ql) & 1) * 2 + ((i >> qr) & 1);
        let base = i & !(1 << ql) & !(1 << qr);
        for (m, row) in op.iter().enumerate() {
            let k = row[n];
            if k != z() {
                let j = base | ((m >> 1) << ql) | ((m & 1) << qr);
                out[j] += k * a;
            }
        }
    }
    out
}

/// Probability of a closed fragment. Wiring follows the geometric rule: the
/// left input of the octagon centred at (x, t) leaves the octagon centred at
/// (x - Px/2, t - Pt/2) through its right upper edge, and symmetrically.
pub fn statevector_probability(f: &Fragment, tess: &Tesselation) -> f64 {
    let hx = (tess.period_x / 2) as i64;
    let ht = (tess.period_t / 2) as i64;
    let mut gates: Vec<(i64, i64, TesselId, GateLabel)> = f
        .assignments
        .iter()
        .map(|(&id, &g)| {
            let (x, t) = tess.tessel(id).midpoint;
            (t, x, id, g)
        })
        .collect();
    gates.sort();
    // Qubit index per (consumer midpoint, side) wire; side 0 = left.
    let mut n_qubits = 0usize;
    let mut wire: HashMap<((i64, i64), u8), usize> = HashMap::new();
    let mut plan = Vec::new();
    for &(t, x, _, g) in &gates {
        let mut q = [0usize; 2];
        for side in 0..2u8 {
            q[side as usize] = match wire.remove(&((x, t), side)) {
                Some(i) => i,
                None => {
                    n_qubits += 1;
                    n_qubits - 1
                }
            };
        }
        // Left output goes up-left and enters that octagon from its right.
        wire.insert(((x - hx, t + ht), 1), q[0]);
        wire.insert(((x + hx, t + ht), 0), q[1]);
        plan.push((g, q));
    }
    let mut psi = vec![z(); 1 << n_qubits];
    psi[0] = r(1.0);
    branch(&psi, &plan, 0)
}

fn branch(psi: &[C], plan: &[(GateLabel, [usize; 2])], k: usize) -> f64 {
    if k == plan.len() {
        return psi.iter().map(|a| a.norm_sqr()).sum();
    }
    let (g, q) = plan[k];
    let mut total = 0.0;
    for op in kraus(g) {
        let next = apply(psi, &op, q[0], q[1]);
        if next.iter().any(|a| a.norm_sqr() > 1e-30) {
            total += branch(&next, plan, k + 1);
        }
    }
    total
}

/// The eight-octagon closed circuit of the two-preparation drawing, on an
/// 18x15 strip with 6x6 periods. Outcomes as drawn: H left=0, F right=0,
/// G left=1.
pub fn two_preparation_drawing(tess: &Tesselation) -> Fragment {
    use GateLabel::*;
    let id = |x, s| tess.octagon_at(x, s).unwrap();
    Fragment::from_pairs([
        (id(9, 3), PrepZZ),
        (id(15, 3), PrepZZ),
        (id(6, 6), IH),
        (id(12, 6), Cnot),
        (id(9, 9), Cnot),
        (id(15, 9), M0I),
        (id(6, 12), IM0),
        (id(12, 12), M1I),
    ])
}
