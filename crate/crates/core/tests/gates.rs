use nalgebra::{Matrix2, Matrix4};
use num_complex::Complex64 as C;
use stuffml::gates::*;

fn max_abs(m: &Matrix4<C>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn output(g: GateLabel, rho: &Matrix4<C>) -> Matrix4<C> {
    channel(g)
        .unwrap()
        .kraus_ops
        .iter()
        .map(|k| k * rho * k.adjoint())
        .fold(Matrix4::zeros(), |a, b| a + b)
}

#[test]
fn unitaries_are_unitary() {
    for g in UGS {
        let ch = channel(g).unwrap();
        if g.is_measurement() || g == GateLabel::PrepZZ {
            continue;
        }
        assert_eq!(ch.kraus_ops.len(), 1);
        let u = ch.kraus_ops[0];
        assert!(
            max_abs(&(u.adjoint() * u - Matrix4::identity())) < 1e-12,
            "{g}"
        );
    }
}

#[test]
fn phase_gate_matrix() {
    let k = channel(GateLabel::PI).unwrap().kraus_ops[0];
    let p = Matrix2::new(
        C::new(1.0, 0.0),
        C::new(0.0, 0.0),
        C::new(0.0, 0.0),
        C::new(0.0, 1.0),
    );
    assert!(max_abs(&(k - kron2(&p, &Matrix2::identity()))) < 1e-15);
}

#[test]
fn r_gate_phase_is_configurable() {
    let k = channel_with_phase(GateLabel::IR, 0.3).unwrap().kraus_ops[0];
    assert!((k[(1, 1)] - C::from_polar(1.0, 0.3)).norm() < 1e-15);
    let d = channel(GateLabel::RI).unwrap().kraus_ops[0];
    assert!((d[(2, 2)] - C::from_polar(1.0, std::f64::consts::PI / 8.0)).norm() < 1e-15);
}

#[test]
fn cnot_left_controls() {
    let k = channel(GateLabel::Cnot).unwrap().kraus_ops[0];
    // |10> -> |11>, |01> -> |01>
    assert_eq!(k[(3, 2)], C::new(1.0, 0.0));
    assert_eq!(k[(1, 1)], C::new(1.0, 0.0));
}

#[test]
fn identity_channel() {
    let ch = channel(GateLabel::II).unwrap();
    assert_eq!(ch.kraus_ops, vec![Matrix4::identity()]);
    assert!(ch.outcome_label.is_none() && !ch.absorbs_inputs);
}

#[test]
fn measurement_families_are_complete() {
    for pair in [
        [GateLabel::M0I, GateLabel::M1I],
        [GateLabel::IM0, GateLabel::IM1],
    ] {
        let s: Matrix4<C> = pair
            .iter()
            .flat_map(|g| channel(*g).unwrap().kraus_ops)
            .map(|k| k.adjoint() * k)
            .fold(Matrix4::zeros(), |a, b| a + b);
        assert!(max_abs(&(s - Matrix4::identity())) < 1e-15);
    }
    let fam = outcome_family(GateLabel::IM1).unwrap();
    assert_eq!(fam[0].to_string(), "right=0");
    assert_eq!(fam[1].to_string(), "right=1");
}

#[test]
fn measuring_plus_state_gives_half() {
    let plus = Matrix2::new(
        C::new(0.5, 0.0),
        C::new(0.5, 0.0),
        C::new(0.5, 0.0),
        C::new(0.5, 0.0),
    );
    let other = Matrix2::new(
        C::new(0.3, 0.0),
        C::new(0.1, 0.2),
        C::new(0.1, -0.2),
        C::new(0.7, 0.0),
    );
    let rho = kron2(&plus, &other);
    let out = output(GateLabel::M0I, &rho);
    assert!((out.trace().re - 0.5).abs() < 1e-15);
}

#[test]
fn prep_discards_any_input() {
    let target = {
        let mut m = Matrix4::zeros();
        m[(0, 0)] = C::new(1.0, 0.0);
        m
    };
    for a in 0..4 {
        for b in 0..4 {
            let mut rho = Matrix4::zeros();
            rho[(a, b)] = C::new(1.0, 0.0);
            let out = output(GateLabel::PrepZZ, &rho);
            let want = if a == b { target } else { Matrix4::zeros() };
            assert!(max_abs(&(out - want)) < 1e-15);
        }
    }
    assert!(channel(GateLabel::PrepZZ).unwrap().absorbs_inputs);
}

#[test]
fn identity_factors() {
    assert!(GateLabel::IH.identity_on(Side::Left));
    assert!(!GateLabel::IH.identity_on(Side::Right));
    assert!(GateLabel::M0I.identity_on(Side::Right));
    assert!(!GateLabel::Cnot.identity_on(Side::Left));
    assert!(!GateLabel::Swap.identity_on(Side::Right));
}
