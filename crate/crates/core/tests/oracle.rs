mod common;

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64 as C;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stuffml::circuits::Strategy;
use stuffml::circuits::*;
use stuffml::gates::GateLabel::{self, *};
use stuffml::lattice::*;
use stuffml::oracle::*;

fn strip() -> (Tesselation, GateLattice) {
    let t = build_tesselation(16, 24, 4, 4, 1).unwrap();
    let gl = gate_adjacency(&t);
    (t, gl)
}

fn circ(t: &Tesselation, gl: &GateLattice, gates: &[(i64, i64, GateLabel)]) -> Circuit {
    let f = Fragment::from_pairs(
        gates
            .iter()
            .map(|&(x, s, g)| (t.octagon_at(x, s).unwrap(), g)),
    );
    validate_circuit(&f, gl).unwrap()
}

#[test]
fn prepared_pair_measures_zero() {
    let (t, gl) = strip();
    let c = circ(&t, &gl, &[(6, 6, PrepZZ), (4, 8, IM0), (8, 8, M0I)]);
    assert!((ideal_probability(&c, &t, &gl).unwrap() - 1.0).abs() < 1e-14);
}

#[test]
fn hadamard_then_measure_is_half() {
    let (t, gl) = strip();
    let c = circ(&t, &gl, &[(6, 6, PrepZZ), (8, 8, HI), (6, 10, IM0)]);
    assert!((ideal_probability(&c, &t, &gl).unwrap() - 0.5).abs() < 1e-14);
}

#[test]
fn two_preparation_drawing_matches_reference() {
    let t = build_tesselation(18, 15, 6, 6, 1).unwrap();
    let gl = gate_adjacency(&t);
    let f = common::two_preparation_drawing(&t);
    // Reference values from the statevector oracle: the outcomes drawn
    // contradict the Bell correlation between F and G.
    let drawn = fragment_probability(&f, &t, &gl).unwrap();
    assert!(drawn.abs() < 1e-12);
    assert!((common::statevector_probability(&f, &t) - drawn).abs() < 1e-12);
    let dist = ideal_distribution(&f, &t, &gl).unwrap();
    assert_eq!(dist.entries.len(), 8);
    assert!((dist.total() - 1.0).abs() < 1e-9);
    for (asg, p) in &dist.entries {
        let mut v = f.clone();
        for (id, o) in asg {
            v.insert(*id, GateLabel::from_outcome(*o));
        }
        assert!((common::statevector_probability(&v, &t) - p).abs() < 1e-12);
    }
    let mut probs: Vec<f64> = dist.entries.iter().map(|e| e.1).collect();
    probs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert!((probs[0] - 0.5).abs() < 1e-12 && (probs[1] - 0.5).abs() < 1e-12);
    assert!(probs[2..].iter().all(|p| p.abs() < 1e-12));
}

#[test]
fn distribution_of_single_measurement() {
    let (t, gl) = strip();
    let f = circ(&t, &gl, &[(6, 6, PrepZZ), (8, 8, M0I)]).fragment;
    let d = ideal_distribution(&f, &t, &gl).unwrap();
    let ps: Vec<f64> = d.entries.iter().map(|e| e.1).collect();
    assert!((ps[0] - 1.0).abs() < 1e-14 && ps[1].abs() < 1e-14);
    let f = circ(&t, &gl, &[(6, 6, PrepZZ), (8, 8, HI), (6, 10, IM1)]).fragment;
    let d = ideal_distribution(&f, &t, &gl).unwrap();
    assert!(d.entries.iter().all(|e| (e.1 - 0.5).abs() < 1e-14));
}

fn random_state(rng: &mut ChaCha8Rng) -> Matrix2<C> {
    let a = DMatrix::from_fn(2, 2, |_, _| {
        C::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    });
    let rho = &a * a.adjoint();
    let tr = rho.trace();
    Matrix2::from_fn(|i, j| rho[(i, j)] / tr)
}

#[test]
fn shunted_inputs_do_not_matter() {
    let (t, gl) = strip();
    let cfg = RandomCircuitConfig::whole(&t, Strategy::GrowFromPrep, 6.0, 11);
    let mut s = CircuitSampler::new(cfg, &t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let c = s.sample(&gl).unwrap();
        let base = ideal_probability(&c, &t, &gl).unwrap();
        let states: Vec<Matrix2<C>> = (0..64).map(|_| random_state(&mut rng)).collect();
        let inject = |e: Edge| states[(e.0 .0 * 2 + e.1 as usize) % 64];
        let p = probability_with_injection(&c.fragment, &t, &gl, &inject).unwrap();
        assert!((p - base).abs() < 1e-10);
    }
}

#[test]
fn disjoint_circuits_multiply() {
    let (t, gl) = strip();
    let mut lo = RandomCircuitConfig::whole(&t, Strategy::GrowFromPrep, 4.0, 1);
    lo.extent = (16, 11);
    let mut hi = RandomCircuitConfig::whole(&t, Strategy::OutsideIn, 4.0, 2);
    hi.origin = (0, 13);
    hi.extent = (16, 11);
    let mut a = CircuitSampler::new(lo, &t).unwrap();
    let mut b = CircuitSampler::new(hi, &t).unwrap();
    for _ in 0..200 {
        let c1 = a.sample(&gl).unwrap();
        let c2 = b.sample(&gl).unwrap();
        let u = c1.fragment.union(&c2.fragment).unwrap();
        let Ok(cu) = validate_circuit(&u, &gl) else {
            continue;
        };
        let p = ideal_probability(&cu, &t, &gl).unwrap();
        let q = ideal_probability(&c1, &t, &gl).unwrap() * ideal_probability(&c2, &t, &gl).unwrap();
        assert!((p - q).abs() < 1e-10);
    }
}

#[test]
fn identity_and_involution_superoperators() {
    let (t, gl) = strip();
    let o = t.octagon_at(6, 6).unwrap();
    let s = fragment_superoperator(&Fragment::from_pairs([(o, II)]), &t, &gl, 4).unwrap();
    assert!((&s.matrix - DMatrix::<C>::identity(16, 16)).norm() < 1e-14);
    let s = fragment_superoperator(&Fragment::from_pairs([(o, Swap)]), &t, &gl, 4).unwrap();
    assert!((&s.matrix * &s.matrix - DMatrix::<C>::identity(16, 16)).norm() < 1e-14);
    assert!((&s.matrix - gate_superoperator(Swap).unwrap()).norm() < 1e-14);
}

#[test]
fn superoperators_match_gate_channels() {
    let (t, gl) = strip();
    let o = t.octagon_at(6, 6).unwrap();
    for g in stuffml::gates::UGS {
        let s = fragment_superoperator(&Fragment::from_pairs([(o, g)]), &t, &gl, 4).unwrap();
        assert!(
            (&s.matrix - gate_superoperator(g).unwrap()).norm() < 1e-13,
            "{g}"
        );
        assert!(s.choi_min_eigenvalue() > -1e-10, "{g}");
    }
}

#[test]
fn double_cnot_is_identity() {
    // Identities at the two middle octagons route both wires of the lower
    // CNOT straight into the upper one.
    let (t, gl) = strip();
    let ids = [(6, 6), (4, 8), (8, 8), (6, 10)].map(|(x, s)| t.octagon_at(x, s).unwrap());
    let twice = Fragment::from_pairs(ids.into_iter().zip([Cnot, II, II, Cnot]));
    let plain = Fragment::from_pairs(ids.into_iter().zip([II, II, II, II]));
    let a = fragment_superoperator(&twice, &t, &gl, 4).unwrap();
    let b = fragment_superoperator(&plain, &t, &gl, 4).unwrap();
    assert_eq!(a.inputs.len(), 4);
    assert_eq!(a.outputs, b.outputs);
    assert!((&a.matrix - &b.matrix).norm() < 1e-13);
    let once = Fragment::from_pairs(ids.into_iter().zip([Cnot, II, II, II]));
    let c = fragment_superoperator(&once, &t, &gl, 4).unwrap();
    assert!((&c.matrix - &b.matrix).norm() > 1.0);
}

#[test]
fn edge_cap_is_enforced() {
    let (t, gl) = strip();
    let f = Fragment::from_pairs([
        (t.octagon_at(2, 6).unwrap(), II),
        (t.octagon_at(6, 6).unwrap(), II),
        (t.octagon_at(10, 6).unwrap(), II),
    ]);
    assert!(matches!(
        fragment_superoperator(&f, &t, &gl, 4),
        Err(stuffml::Error::FragmentTooLarge { .. })
    ));
}

#[test]
fn outcome_branches_sum_to_channel() {
    let (t, gl) = strip();
    let o = t.octagon_at(6, 6).unwrap();
    let s0 = fragment_superoperator(&Fragment::from_pairs([(o, M0I)]), &t, &gl, 4).unwrap();
    let s1 = fragment_superoperator(&Fragment::from_pairs([(o, M1I)]), &t, &gl, 4).unwrap();
    let x = DMatrix::from_fn(4, 4, |i, j| {
        if i == j {
            C::new(0.25, 0.0)
        } else {
            C::new(0.0, 0.0)
        }
    });
    let tr = (s0.apply(&x) + s1.apply(&x)).trace();
    assert!((tr.re - 1.0).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn agrees_with_statevector(seed in any::<u64>(), mean in 1.0f64..5.0, grow in any::<bool>()) {
        let (t, gl) = strip();
        let strategy = if grow { Strategy::GrowFromPrep } else { Strategy::OutsideIn };
        let cfg = RandomCircuitConfig::whole(&t, strategy, mean, seed);
        let c = random_circuit(&cfg, &t, &gl).unwrap();
        prop_assume!(c.len() <= 8);
        let p = ideal_probability(&c, &t, &gl).unwrap();
        prop_assert!((p - common::statevector_probability(&c.fragment, &t)).abs() < 1e-10);
    }
}

#[test]
fn regression_corpus() {
    let text = include_str!("data/corpus.txt");
    let mut n = 0;
    let mut drawings = 0;
    for block in text.split("end\n").filter(|b| b.contains("circuit v1")) {
        let expect: f64 = block
            .lines()
            .find_map(|l| l.strip_prefix("expect "))
            .unwrap()
            .parse()
            .unwrap();
        let body: String = block
            .lines()
            .filter(|l| !l.starts_with("expect"))
            .map(|l| format!("{l}\n"))
            .collect();
        let [l, tt, px, pt, c] = read_header(&body).unwrap();
        let t = build_tesselation(l, tt, px, pt, c).unwrap();
        let gl = gate_adjacency(&t);
        let circ = read_circuit(&body, &t, &gl).unwrap();
        if block.contains("two-preparation drawing") {
            let fig = common::two_preparation_drawing(&t);
            assert_eq!(circ.fragment.region(), fig.region());
            if block.contains("as drawn") {
                assert_eq!(circ.fragment, fig);
            }
            drawings += 1;
        } else {
            assert!(circ.len() <= 6);
        }
        let p = ideal_probability(&circ, &t, &gl).unwrap();
        assert!((p - expect).abs() < 1e-10, "entry {n}: {p} vs {expect}");
        assert!((common::statevector_probability(&circ.fragment, &t) - expect).abs() < 1e-10);
        n += 1;
    }
    assert_eq!(n, 52);
    assert_eq!(drawings, 2);
}
