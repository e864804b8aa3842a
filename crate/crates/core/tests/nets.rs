use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stuffml::nets::*;
use stuffml::Error;

fn small() -> Manifest {
    Manifest::new(
        3,
        vec![5, 4],
        vec![
            Head {
                size: 2,
                activation: Activation::Identity,
            },
            Head {
                size: 3,
                activation: Activation::Tanh,
            },
        ],
    )
}

fn random(m: Manifest, seed: u64) -> Weights {
    Weights::random(m, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn parameter_count() {
    assert_eq!(small().n_params(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 5 + 5);
}

#[test]
fn linear_manifest_is_affine_map() {
    let m = Manifest::new(
        2,
        vec![],
        vec![Head {
            size: 2,
            activation: Activation::Identity,
        }],
    );
    // Row-major weights then biases.
    let w = Weights::from_values(m, vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
    let c = forward(&w, &[1.0, -1.0]).unwrap();
    assert_eq!(c.output(), &[-0.5, -1.5]);
}

#[test]
fn forward_is_deterministic() {
    let w = random(small(), 1);
    let a = forward(&w, &[0.1, 0.2, 0.3]).unwrap();
    let b = forward(&w, &[0.1, 0.2, 0.3]).unwrap();
    assert_eq!(a.output(), b.output());
    assert_eq!(random(small(), 1), w);
}

#[test]
fn wrong_input_length_is_rejected() {
    let w = random(small(), 1);
    assert!(matches!(forward(&w, &[0.0; 4]), Err(Error::Shape(_))));
}

#[test]
fn gradient_matches_finite_differences() {
    let w = random(small(), 2);
    let x = [0.3, -0.7, 0.9];
    let coef = [0.4, -1.1, 0.8, 0.2, -0.6];
    let loss = |p: &[f64]| {
        let w2 = Weights::from_values(small(), p.to_vec()).unwrap();
        let o = forward(&w2, &x).unwrap();
        o.output()
            .iter()
            .zip(&coef)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let cache = forward(&w, &x).unwrap();
    let mut g = vec![0.0; w.len()];
    backward(&w, &cache, &coef, &mut g).unwrap();
    let err = gradient_check(&loss, w.values(), &g, 1e-5, 1e-9);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let w = random(small(), 3);
    let x = vec![0.3, -0.7, 0.9];
    let coef = [0.4, -1.1, 0.8, 0.2, -0.6];
    let f = |xi: &[f64]| {
        let o = forward(&w, xi).unwrap();
        o.output()
            .iter()
            .zip(&coef)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let cache = forward(&w, &x).unwrap();
    let mut g = vec![0.0; w.len()];
    let dx = backward(&w, &cache, &coef, &mut g).unwrap();
    assert!(gradient_check(&f, &x, &dx, 1e-5, 1e-9) < 1e-4);
}

/// Three recurrent steps threaded through the memory, with a softmax
/// log-likelihood read out at every step.
fn unrolled_loss(w: &Weights, xs: &[[f64; 2]], targets: &[usize]) -> f64 {
    let mut mem = vec![0.0; 3];
    let mut total = 0.0;
    for (x, &t) in xs.iter().zip(targets) {
        let (logits, m2, _) = cell_forward(w, x, &mem).unwrap();
        total += softmax(&logits)[t].ln();
        mem = m2;
    }
    total + mem.iter().sum::<f64>()
}

#[test]
fn recurrent_unroll_gradient() {
    let m = Manifest::recurrent(2, 3, vec![6], 4);
    let w = random(m.clone(), 4);
    let xs = [[0.5, -0.2], [0.1, 0.9], [-0.8, 0.3], [0.2, 0.2]];
    let targets = [1, 3, 0, 2];

    let mut caches = Vec::new();
    let mut probs = Vec::new();
    let mut mem = vec![0.0; 3];
    for x in &xs {
        let (logits, m2, c) = cell_forward(&w, x, &mem).unwrap();
        probs.push(softmax(&logits));
        caches.push(c);
        mem = m2;
    }
    let mut g = vec![0.0; w.len()];
    let mut d_mem = vec![1.0; 3];
    for k in (0..xs.len()).rev() {
        let d_logits: Vec<f64> = probs[k]
            .iter()
            .enumerate()
            .map(|(i, p)| if i == targets[k] { 1.0 - p } else { -p })
            .collect();
        d_mem = cell_backward(&w, &caches[k], &d_logits, &d_mem, &mut g).unwrap();
    }
    let loss = |p: &[f64]| {
        unrolled_loss(
            &Weights::from_values(m.clone(), p.to_vec()).unwrap(),
            &xs,
            &targets,
        )
    };
    let err = gradient_check(&loss, w.values(), &g, 1e-5, 1e-9);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn stale_cache_is_rejected() {
    let mut w = random(small(), 5);
    let c = forward(&w, &[0.0, 0.0, 0.0]).unwrap();
    w.values_mut()[0] += 1.0;
    let mut g = vec![0.0; w.len()];
    assert!(matches!(
        backward(&w, &c, &[0.0; 5], &mut g),
        Err(Error::StaleCache(_))
    ));
}

#[test]
fn sgd_step() {
    let mut w = random(small(), 6);
    let before = w.values().to_vec();
    let g: Vec<f64> = (0..w.len()).map(|i| i as f64 * 0.01).collect();
    let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, w.len());
    update(&mut w, &g, &mut opt).unwrap();
    for i in 0..w.len() {
        assert!((w.values()[i] - (before[i] - 0.1 * g[i])).abs() < 1e-15);
    }
}

#[test]
fn adam_descends_a_bowl() {
    let m = Manifest::new(
        1,
        vec![],
        vec![Head {
            size: 1,
            activation: Activation::Identity,
        }],
    );
    let mut w = Weights::from_values(m, vec![3.0, -2.0]).unwrap();
    let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.05, 2);
    let f = |v: &[f64]| v[0] * v[0] + 4.0 * v[1] * v[1];
    let mut last = f(w.values());
    for _ in 0..8 {
        for _ in 0..50 {
            let v = w.values();
            let g = [2.0 * v[0], 8.0 * v[1]];
            update(&mut w, &g, &mut opt).unwrap();
        }
        let now = f(w.values());
        assert!(now < last, "{now} after {last}");
        last = now;
    }
    assert!(last < 1e-2);
}

#[test]
fn non_finite_gradient_is_rejected() {
    let mut w = random(small(), 7);
    let before = w.clone();
    let mut g = vec![0.0; w.len()];
    g[3] = f64::NAN;
    let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.1, w.len());
    assert!(matches!(
        update(&mut w, &g, &mut opt),
        Err(Error::NonFinite(_))
    ));
    assert_eq!(w, before);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let w = random(small(), 8);
    let mut buf = Vec::new();
    save_weights(&mut buf, &w).unwrap();
    assert_eq!(&buf[..4], b"PLST");
    let back = load_weights(&mut buf.as_slice()).unwrap();
    assert_eq!(back.manifest(), w.manifest());
    for (a, b) in back.values().iter().zip(w.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let w = random(small(), 9);
    let mut buf = Vec::new();
    save_weights(&mut buf, &w).unwrap();
    buf[0] = b'X';
    assert!(matches!(
        load_weights(&mut buf.as_slice()),
        Err(Error::Checkpoint(_))
    ));
    let mut short = Vec::new();
    save_weights(&mut short, &w).unwrap();
    short.truncate(short.len() - 3);
    assert!(load_weights(&mut short.as_slice()).is_err());
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn tanh_heads_are_bounded(seed in 0u64..1000, x in prop::collection::vec(-10.0f64..10.0, 3)) {
        let w = random(small(), seed);
        let c = forward(&w, &x).unwrap();
        prop_assert!(c.output()[2..].iter().all(|v| v.abs() <= 1.0));
    }
}
