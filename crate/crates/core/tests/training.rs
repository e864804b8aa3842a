use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stuffml::circuits::{validate_circuit, Circuit, Fragment};
use stuffml::codec::*;
use stuffml::gates::{GateLabel, GateLabel::*};
use stuffml::lattice::*;
use stuffml::nets::{self, Activation, Head, Manifest, Weights};
use stuffml::stuff::StuffPreset;
use stuffml::training::*;

fn strip(t: usize) -> (Tesselation, GateLattice) {
    let tess = build_tesselation(8, t, 4, 4, 1).unwrap();
    let gl = gate_adjacency(&tess);
    (tess, gl)
}

fn circuit(tess: &Tesselation, gl: &GateLattice, gates: &[(i64, i64, GateLabel)]) -> Circuit {
    let f = Fragment::from_pairs(
        gates
            .iter()
            .map(|&(x, t, g)| (tess.octagon_at(x, t).unwrap(), g)),
    );
    validate_circuit(&f, gl).unwrap()
}

fn transparent() -> StuffSpec {
    StuffSpec {
        preset: StuffPreset::Transparent,
        n_sites: 8,
        alphabet: 16,
    }
}

fn neural(tess: &Tesselation, seed: u64) -> NeuralScheme {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NeuralScheme {
        fleet: EncoderFleet::random(tess.l_sites, 16, tess.octagon_size(), &[32], 8, &mut rng),
        decoder: Decoder::random(DecoderKind::Gated, tess.octagon_size(), &[], &mut rng),
        null: NullEncoding::Trainable,
    }
}

#[test]
fn err_kinds() {
    assert_eq!(loss_single(0.5, 0.5, ErrKind::SquaredDifference), 0.0);
    assert!((loss_single(0.2, 0.5, ErrKind::AbsSquares) - 0.21).abs() < 1e-12);
    assert!((loss_single(0.2, 0.5, ErrKind::SquaredDifference) - 0.09).abs() < 1e-12);
    for k in [ErrKind::SquaredDifference, ErrKind::AbsSquares] {
        let h = 1e-6;
        let fd = (k.value(0.3 + h, 0.7) - k.value(0.3 - h, 0.7)) / (2.0 * h);
        assert!((fd - k.derivative(0.3, 0.7)).abs() < 1e-6);
    }
}

#[test]
fn hand_scheme_hadamard_is_half() {
    let (tess, gl) = strip(12);
    let c = circuit(
        &tess,
        &gl,
        &[
            (4, 4, PrepZZ),
            (2, 6, IH),
            (6, 6, II),
            (4, 8, II),
            (2, 10, IM0),
            (6, 10, M0I),
        ],
    );
    let lc = LabelledCircuit::new(c, &tess, &gl).unwrap();
    assert!((lc.target - 0.5).abs() < 1e-12);
    let hand = HandScheme::new(&tess).unwrap();
    let m = 4000;
    let p = empirical_probability(
        &hand,
        &transparent(),
        &lc.circuit,
        &tess,
        MemoryStrategy::Rasterized,
        m,
        3,
    )
    .unwrap();
    let sigma = (0.25 / m as f64).sqrt();
    assert!((p - 0.5).abs() < 3.0 * sigma, "p = {p}");
    let q = empirical_probability(
        &hand,
        &transparent(),
        &lc.circuit,
        &tess,
        MemoryStrategy::Rasterized,
        m,
        3,
    )
    .unwrap();
    assert_eq!(p, q);
}

#[test]
fn hand_scheme_has_zero_suite_loss() {
    let (tess, gl) = strip(12);
    let hand = HandScheme::new(&tess).unwrap();
    let suite = single_octagon_suite(&tess, &gl, 3).unwrap();
    assert_eq!(suite.len(), 56);
    let deterministic: Vec<_> = suite
        .into_iter()
        .filter(|lc| lc.target == 0.0 || lc.target == 1.0)
        .collect();
    let l = loss_set(
        &hand,
        &transparent(),
        &deterministic,
        &tess,
        MemoryStrategy::Rasterized,
        ErrKind::SquaredDifference,
        16,
        0,
    )
    .unwrap();
    assert!(l < 1e-24, "{l}");
}

#[test]
fn skeletons_cover_the_suite() {
    let (tess, gl) = strip(12);
    let suite = single_octagon_suite(&tess, &gl, 3).unwrap();
    let skel = single_octagon_skeletons(&tess, &gl, 3).unwrap();
    let mut from_skel: Vec<(String, f64)> = skel
        .iter()
        .flat_map(|s| s.circuits())
        .map(|lc| (format!("{:?}", lc.circuit.fragment), lc.target))
        .collect();
    let mut direct: Vec<(String, f64)> = suite
        .iter()
        .map(|lc| (format!("{:?}", lc.circuit.fragment), lc.target))
        .collect();
    from_skel.sort_by(|a, b| a.0.cmp(&b.0));
    direct.sort_by(|a, b| a.0.cmp(&b.0));
    assert_eq!(from_skel.len(), direct.len());
    for (a, b) in from_skel.iter().zip(&direct) {
        assert_eq!(a.0, b.0);
        assert!((a.1 - b.1).abs() < 1e-12);
    }
    for s in &skel {
        assert!((s.variants.iter().map(|v| v.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn loss_set_is_additive() {
    let (tess, gl) = strip(12);
    let s = neural(&tess, 4);
    let suite = single_octagon_suite(&tess, &gl, 3).unwrap();
    let st = transparent();
    let e = ErrKind::SquaredDifference;
    let r = MemoryStrategy::Rasterized;
    let both = loss_set(&s, &st, &suite[..2], &tess, r, e, 32, 9).unwrap();
    let p0 = empirical_probability(&s, &st, &suite[0].circuit, &tess, r, 32, mix(9, 2, 0)).unwrap();
    let p1 = empirical_probability(&s, &st, &suite[1].circuit, &tess, r, 32, mix(9, 2, 1)).unwrap();
    let sum = loss_single(p0, suite[0].target, e) + loss_single(p1, suite[1].target, e);
    assert!((both - sum).abs() < 1e-14);
    let single = loss_set(&s, &st, &suite[..1], &tess, r, e, 32, 9).unwrap();
    assert!((single - loss_single(p0, suite[0].target, e)).abs() < 1e-14);
    assert!(loss_set(&s, &st, &[], &tess, r, e, 32, 9).is_err());
    assert!(empirical_probability(&s, &st, &suite[0].circuit, &tess, r, 0, 9).is_err());
}

#[test]
fn loss_random_single_draw_is_a_single_loss() {
    let (tess, gl) = strip(12);
    let s = neural(&tess, 5);
    let mut src = SingleGateSource {
        tess: &tess,
        gl: &gl,
        rows: vec![3],
    };
    let a = loss_random(
        &s,
        &transparent(),
        &mut src,
        &tess,
        MemoryStrategy::Rasterized,
        1,
        1,
        ErrKind::SquaredDifference,
        16,
        2,
    )
    .unwrap();
    assert!((0.0..=1.0).contains(&a));
    let b = loss_random(
        &s,
        &transparent(),
        &mut src,
        &tess,
        MemoryStrategy::Rasterized,
        1,
        1,
        ErrKind::SquaredDifference,
        16,
        2,
    )
    .unwrap();
    assert_eq!(a, b);
}

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        m: 16,
        eval_m: 16,
        iterations,
        eval_every: 10,
        seed: 7,
        ..Default::default()
    }
}

#[test]
fn training_is_reproducible() {
    let (tess, gl) = strip(12);
    let skel = single_octagon_skeletons(&tess, &gl, 3).unwrap();
    let run = || {
        let mut s = neural(&tess, 1);
        let mut src = SingleGateSource {
            tess: &tess,
            gl: &gl,
            rows: vec![1, 3],
        };
        let r = train(
            &mut s,
            &transparent(),
            &tess,
            &mut src,
            &skel[..3],
            &small_config(20),
        )
        .unwrap();
        (r, s)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.heldout, b.heldout);
    assert_eq!(sa.fleet.weights, sb.fleet.weights);
    assert_eq!(sa.decoder.weights, sb.decoder.weights);
    assert_eq!(a.losses.len(), 20);
    assert!(a.to_text().contains("# final_heldout"));
}

#[test]
fn split_run_replays_an_unbroken_one() {
    let (tess, gl) = strip(12);
    let skel = single_octagon_skeletons(&tess, &gl, 3).unwrap();
    let cfg = TrainConfig {
        baseline: Baseline::MovingAverage { decay: 0.9 },
        ..small_config(12)
    };
    let mut whole = neural(&tess, 4);
    let mut src = SingleGateSource {
        tess: &tess,
        gl: &gl,
        rows: vec![1, 3],
    };
    let full = train(
        &mut whole,
        &transparent(),
        &tess,
        &mut src,
        &skel[..2],
        &cfg,
    )
    .unwrap();
    let mut split = neural(&tess, 4);
    let mut state = TrainState::new(&split, &cfg);
    let part = TrainConfig {
        iterations: 7,
        ..cfg.clone()
    };
    let a = train_from(
        &mut split,
        &transparent(),
        &tess,
        &mut src,
        &skel[..2],
        &part,
        &mut state,
    )
    .unwrap();
    assert_eq!(state.iteration, 7);
    let b = train_from(
        &mut split,
        &transparent(),
        &tess,
        &mut src,
        &skel[..2],
        &cfg,
        &mut state,
    )
    .unwrap();
    assert_eq!([a.losses, b.losses].concat(), full.losses);
    assert_eq!(split.fleet.weights, whole.fleet.weights);
    assert_eq!(split.decoder.weights, whole.decoder.weights);
    assert_eq!(b.iterations_run, 12);
}

#[test]
fn spsa_mode_runs() {
    let (tess, gl) = strip(12);
    let skel = single_octagon_skeletons(&tess, &gl, 3).unwrap();
    let mut s = neural(&tess, 2);
    let mut src = SingleGateSource {
        tess: &tess,
        gl: &gl,
        rows: vec![3],
    };
    let cfg = TrainConfig {
        gradient: GradientMode::Spsa { c: 0.05 },
        ..small_config(5)
    };
    let r = train(&mut s, &transparent(), &tess, &mut src, &skel[..2], &cfg).unwrap();
    assert_eq!(r.iterations_run, 5);
    assert!(r.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn trained_scheme_stays_put() {
    let (tess, gl) = strip(12);
    let skel = single_octagon_skeletons(&tess, &gl, 3).unwrap();
    let mut s = neural(&tess, 0);
    let mut src = SingleGateSource {
        tess: &tess,
        gl: &gl,
        rows: vec![1, 3],
    };
    let cfg = TrainConfig {
        m: 64,
        eval_m: 128,
        iterations: 4000,
        eval_every: 250,
        seed: 0,
        ..Default::default()
    };
    let r = train(&mut s, &transparent(), &tess, &mut src, &skel, &cfg).unwrap();
    assert!(r.converged, "{:?}", r.heldout);
    let before = s.clone();
    // Plain steps so that drift measures the gradient, not Adam's normalization.
    let cfg = TrainConfig {
        iterations: 100,
        eval_every: 100,
        epsilon: 0.0,
        seed: 1,
        optimizer: nets::OptimizerKind::Sgd,
        ..cfg
    };
    let r2 = train(&mut s, &transparent(), &tess, &mut src, &skel, &cfg).unwrap();
    assert!(r2.final_heldout < 2e-2, "{}", r2.final_heldout);
    let norm = |w: &Weights| w.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = |a: &Weights, b: &Weights| {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for (a, b) in before.fleet.weights.iter().zip(&s.fleet.weights) {
        assert!(diff(a, b) < 0.01 * norm(a).max(1.0));
    }
    assert!(
        diff(&before.decoder.weights, &s.decoder.weights)
            < 0.01 * norm(&before.decoder.weights).max(1.0)
    );
}

/// Toy substrate: one site, two settings, one step. Setting 1 succeeds with
/// probability 0.8 and setting 0 with 0.3, so E[q] = 0.3 + 0.5·π₁.
#[test]
fn score_function_estimator_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let manifest = Manifest::new(
        1,
        vec![],
        vec![Head {
            size: 2,
            activation: Activation::Identity,
        }],
    );
    let w = Weights::from_values(manifest, vec![0.3, -0.4, 0.1, 0.2]).unwrap();
    let cache = nets::forward(&w, &[1.0]).unwrap();
    let pi = nets::softmax(cache.output());
    let mut exact = vec![0.0; w.len()];
    let d_logits = [-0.5 * pi[1] * pi[0], 0.5 * pi[1] * pi[0]];
    nets::backward(&w, &cache, &d_logits, &mut exact).unwrap();

    let (batches, m) = (12_500, 8);
    let mut sum = vec![0.0; w.len()];
    let mut sq = vec![0.0; w.len()];
    for _ in 0..batches {
        let mut settings = Vec::with_capacity(m);
        let mut q = Vec::with_capacity(m);
        for _ in 0..m {
            let s = usize::from(rng.gen::<f64>() < pi[1]);
            let ok = rng.gen::<f64>() < if s == 1 { 0.8 } else { 0.3 };
            settings.push(s);
            q.push(if ok { 1.0 } else { 0.0 });
        }
        let coeffs = score_coefficients(&q, Baseline::LeaveOneOut, &mut None);
        let mut g = vec![0.0; w.len()];
        for (&s, c) in settings.iter().zip(coeffs) {
            let d: Vec<f64> = (0..2)
                .map(|k| c / m as f64 * (f64::from(u8::from(k == s)) - pi[k]))
                .collect();
            nets::backward(&w, &cache, &d, &mut g).unwrap();
        }
        for i in 0..g.len() {
            sum[i] += g[i];
            sq[i] += g[i] * g[i];
        }
    }
    let n = batches as f64;
    for i in 0..exact.len() {
        let mean = sum[i] / n;
        let se = ((sq[i] / n - mean * mean) / n).sqrt();
        assert!(
            (mean - exact[i]).abs() < 3.0 * se,
            "param {i}: {mean} vs {} (se {se})",
            exact[i]
        );
    }
}
