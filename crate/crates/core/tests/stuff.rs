use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stuffml::stuff::symbols::*;
use stuffml::stuff::*;

fn transparent(n: usize, seed: u64) -> StuffInstance {
    make_stuff(StuffPreset::Transparent, n, 16, seed).unwrap()
}

fn at(n: usize, site: usize, s: usize) -> Vec<usize> {
    let mut v = vec![NOOP; n];
    v[site] = s;
    v
}

#[test]
fn idle_step_emits_nulls() {
    let mut st = transparent(4, 1);
    for _ in 0..5 {
        assert_eq!(st.step(&[NOOP; 4]).unwrap(), vec![RawOutcome::Null; 4]);
    }
    assert_eq!(st.step(&at(4, 2, MEASURE)).unwrap()[2], RawOutcome::Zero);
    assert_eq!(st.clock(), 6);
}

#[test]
fn ground_state_measures_zero() {
    let mut st = transparent(3, 2);
    for _ in 0..100 {
        st.reset();
        assert_eq!(st.step(&at(3, 0, MEASURE)).unwrap()[0], RawOutcome::Zero);
    }
}

#[test]
fn hadamard_frequency_is_half() {
    let mut st = transparent(2, 3);
    let n = 10_000;
    let mut ones = 0;
    for _ in 0..n {
        st.reset();
        st.step(&at(2, 1, H)).unwrap();
        if st.step(&at(2, 1, MEASURE)).unwrap()[1] == RawOutcome::One {
            ones += 1;
        }
    }
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((ones as f64 - n as f64 / 2.0).abs() < 3.0 * sigma, "{ones}");
}

#[test]
fn runs_after_reset_are_independent() {
    let mut st = transparent(1, 4);
    let mut table = [[0f64; 2]; 2];
    let n = 10_000;
    let run = |st: &mut StuffInstance| {
        st.reset();
        st.step(&[H]).unwrap();
        (st.step(&[MEASURE]).unwrap()[0] == RawOutcome::One) as usize
    };
    for _ in 0..n {
        let a = run(&mut st);
        let b = run(&mut st);
        table[a][b] += 1.0;
    }
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut chi2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n as f64;
            chi2 += (table[i][j] - e).powi(2) / e;
        }
    }
    // One degree of freedom, p = 0.001.
    assert!(chi2 < 10.83, "chi2 {chi2}");
}

#[test]
fn double_reset_is_single_reset() {
    let mut a = transparent(3, 5);
    let mut b = transparent(3, 5);
    for st in [&mut a, &mut b] {
        st.step(&[X, H, CNOT]).unwrap();
    }
    a.reset();
    b.reset();
    b.reset();
    for _ in 0..20 {
        let s = [H, MEASURE, MEASURE];
        assert_eq!(a.step(&s).unwrap(), b.step(&s).unwrap());
    }
}

#[test]
fn reset_action_returns_site_to_zero() {
    let mut st = transparent(2, 6);
    for _ in 0..200 {
        st.reset();
        st.step(&[H, X]).unwrap();
        st.step(&[RESET, RESET]).unwrap();
        assert_eq!(
            st.step(&[MEASURE, MEASURE]).unwrap(),
            vec![RawOutcome::Zero; 2]
        );
    }
}

#[test]
fn pair_actions_entangle() {
    let mut st = transparent(3, 7);
    for _ in 0..500 {
        st.reset();
        st.step(&[NOOP, H, NOOP]).unwrap();
        st.step(&[NOOP, CNOT, NOOP]).unwrap();
        let o = st.step(&[NOOP, MEASURE, MEASURE]).unwrap();
        assert_eq!(o[1], o[2]);
    }
    st.reset();
    st.step(&[X, NOOP, NOOP]).unwrap();
    st.step(&[SWAP, NOOP, NOOP]).unwrap();
    assert_eq!(
        st.step(&[MEASURE, MEASURE, NOOP]).unwrap()[..2],
        [RawOutcome::Zero, RawOutcome::One]
    );
}

#[test]
fn left_pair_request_wins() {
    let mut st = transparent(3, 8);
    st.step(&[X, NOOP, NOOP]).unwrap();
    // Site 1's swap is suppressed, so the excitation moves only to site 1.
    st.step(&[SWAP, SWAP, NOOP]).unwrap();
    let o = st.step(&[MEASURE, MEASURE, MEASURE]).unwrap();
    assert_eq!(o, vec![RawOutcome::Zero, RawOutcome::One, RawOutcome::Zero]);
}

#[test]
fn bad_settings_are_rejected() {
    let mut st = transparent(3, 9);
    assert!(matches!(
        st.step(&[0, 0]),
        Err(stuffml::Error::LengthMismatch { .. })
    ));
    assert!(matches!(
        st.step(&[0, 16, 0]),
        Err(stuffml::Error::InvalidSetting { .. })
    ));
    assert!(make_stuff(StuffPreset::Transparent, 9, 16, 0).is_err());
    assert!(make_stuff_with_cap(StuffPreset::Transparent, 9, 16, 0, 10).is_ok());
}

fn random_program(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> Vec<Vec<usize>> {
    (0..steps)
        .map(|_| (0..n).map(|_| rng.gen_range(0..16)).collect())
        .collect()
}

#[test]
fn permutation_undone_matches_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut plain = transparent(5, 77);
    let mut perm = make_stuff(StuffPreset::Permuted { seed: 3 }, 5, 16, 77).unwrap();
    let map: Vec<usize> = (0..16).map(|k| perm.model().symbol_for(k)).collect();
    assert!(map.iter().enumerate().any(|(k, &m)| k != m));
    for _ in 0..50 {
        plain.reset();
        perm.reset();
        for s in random_program(&mut rng, 5, 8) {
            let t: Vec<usize> = s.iter().map(|&k| map[k]).collect();
            assert_eq!(plain.step(&s).unwrap(), perm.step(&t).unwrap());
        }
    }
}

#[test]
fn zero_noise_matches_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut plain = transparent(4, 5);
    let mut noisy = make_stuff(StuffPreset::Noisy { rate: 0.0, seed: 9 }, 4, 16, 5).unwrap();
    for s in random_program(&mut rng, 4, 200) {
        assert_eq!(plain.step(&s).unwrap(), noisy.step(&s).unwrap());
    }
}

#[test]
fn noise_flips_measurements() {
    let mut st = make_stuff(StuffPreset::Noisy { rate: 0.5, seed: 1 }, 1, 16, 2).unwrap();
    let mut ones = 0;
    for _ in 0..2000 {
        st.reset();
        st.step(&[X]).unwrap();
        st.step(&[X]).unwrap();
        if st.step(&[MEASURE]).unwrap()[0] == RawOutcome::One {
            ones += 1;
        }
    }
    assert!(ones > 300, "{ones}");
}

#[test]
fn dressing_hides_the_basis() {
    let mut st = make_stuff(StuffPreset::Dressed { seed: 4 }, 1, 16, 3).unwrap();
    let mut ones = 0;
    for _ in 0..2000 {
        st.reset();
        st.step(&[RESET]).unwrap();
        st.step(&[H]).unwrap();
        if st.step(&[MEASURE]).unwrap()[0] == RawOutcome::One {
            ones += 1;
        }
    }
    // H acts in the dressed frame, so reset then H still gives a fair coin.
    assert!((ones as f64 - 1000.0).abs() < 150.0, "{ones}");
}

#[test]
fn hidden_signal_arrives_late() {
    let mut st = make_stuff(StuffPreset::HiddenSignalling { delay: 5 }, 2, 16, 1).unwrap();
    st.step(&[RESET, NOOP]).unwrap();
    for _ in 0..3 {
        assert_eq!(st.step(&[MEASURE, NOOP]).unwrap()[0], RawOutcome::Zero);
    }
    st.step(&[NOOP, NOOP]).unwrap();
    st.step(&[NOOP, NOOP]).unwrap();
    assert_eq!(st.step(&[MEASURE, NOOP]).unwrap()[0], RawOutcome::One);
}

#[test]
fn trace_log_lists_settings_and_outcomes() {
    let mut st = transparent(2, 1);
    st.enable_trace();
    st.step(&[H, MEASURE]).unwrap();
    let t = st.take_trace().unwrap();
    assert_eq!(t, "0 1,6 .0\n");
}

/// Frequency of outcome 1 at `(site, last step)` over many runs.
fn frequency(program: &[Vec<usize>], site: usize, runs: usize, seed: u64) -> f64 {
    let mut st = transparent(program[0].len(), seed);
    let mut ones = 0;
    for _ in 0..runs {
        st.reset();
        let mut last = Vec::new();
        for s in program {
            last = st.step(s).unwrap();
        }
        ones += (last[site] == RawOutcome::One) as usize;
    }
    ones as f64 / runs as f64
}

#[test]
fn no_hidden_signalling_outside_the_cone() {
    // Influence per step reaches two sites: a pair action plus the conflict
    // rule it imposes on its right neighbour.
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..6 {
        let steps = 2;
        let site = 0;
        let inside = |x: usize, t: usize| x <= site + 2 * (steps - 1 - t) + 2;
        let mut a = random_program(&mut rng, n, steps);
        a[0][0] = H;
        a[steps - 1][site] = MEASURE;
        let mut b = a.clone();
        for (t, row) in b.iter_mut().enumerate() {
            for (x, s) in row.iter_mut().enumerate() {
                if !inside(x, t) {
                    *s = rng.gen_range(0..16);
                }
            }
        }
        let runs = 4000;
        let (fa, fb) = (
            frequency(&a, site, runs, 100 + trial),
            frequency(&b, site, runs, 200 + trial),
        );
        let p = (fa + fb) / 2.0;
        let se = (2.0 * p * (1.0 - p) / runs as f64).sqrt().max(1e-3);
        assert!((fa - fb).abs() < 4.5 * se, "trial {trial}: {fa} vs {fb}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn norm_is_preserved(seed in any::<u64>(), preset in 0u8..4) {
        let preset = match preset {
            0 => StuffPreset::Transparent,
            1 => StuffPreset::Permuted { seed },
            2 => StuffPreset::Dressed { seed },
            _ => StuffPreset::Noisy { rate: 0.2, seed },
        };
        let mut st = make_stuff(preset, 6, 16, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in random_program(&mut rng, 6, 30) {
            st.step(&s).unwrap();
            prop_assert!(st.norm_error() < 1e-9);
        }
    }
}
