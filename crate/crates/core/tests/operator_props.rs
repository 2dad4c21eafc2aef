use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vgt_core::evo::*;
use vgt_core::testkit::{random_mirrored_truss, TrussShape};
use vgt_core::truss::{check_assignment, is_valid_assignment};

#[test]
fn initialisation_and_mutation_stay_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut inits, mut mutations, mut exhausted) = (0, 0, 0);
    for _ in 0..25 {
        let g = random_mirrored_truss(&mut rng, TrussShape::default());
        for _ in 0..40 {
            let a = initialize_assignment(&g, &mut rng).unwrap();
            let report = check_assignment(&g, a.channels());
            assert!(report.iter().all(|r| r.passed), "{report:?}");
            inits += 1;
            let mut current = a;
            for _ in 0..10 {
                match mutate_assignment(&g, &current, &mut rng) {
                    Ok(next) => {
                        let report = check_assignment(&g, next.channels());
                        assert!(report.iter().all(|r| r.passed), "{report:?}");
                        current = next;
                        mutations += 1;
                    }
                    Err(EvoError::NoValidMutation) => exhausted += 1,
                    Err(e) => panic!("unexpected {e}"),
                }
            }
        }
    }
    assert_eq!(inits, 1000);
    assert!(mutations > 9 * (mutations + exhausted) / 10);
}

#[test]
fn mutation_moves_exactly_one_mirror_orbit() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let g = random_mirrored_truss(&mut rng, TrussShape::default());
        let a = initialize_assignment(&g, &mut rng).unwrap();
        let Ok(b) = mutate_assignment(&g, &a, &mut rng) else {
            continue;
        };
        let changed: Vec<usize> = (0..g.n_edges())
            .filter(|&e| a.channel(e) != b.channel(e))
            .collect();
        assert!(!changed.is_empty() && changed.len() <= 2, "{changed:?}");
        if changed.len() == 2 {
            assert_eq!(g.edge_mirror(changed[0]), changed[1]);
        }
    }
}

#[test]
fn control_mutation_hamming_mean() {
    // Flip probability p on n bits, conditioned on at least one flip:
    // E = n·p / (1 − (1 − p)^n).
    let (n_steps, n_channels, p) = (20, 3, 0.05);
    let n = (n_steps * n_channels) as f64;
    let expect = n * p / (1.0 - (1.0 - p).powf(n));
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let base = ControlSequence::random(n_steps, n_channels, &mut rng);
    let trials = 20_000;
    let total: usize = (0..trials)
        .map(|_| {
            let m = mutate_control(&base, &mut rng, p).unwrap();
            assert!(m.is_rectangular());
            let d = base.hamming(&m);
            assert!(d >= 1);
            d
        })
        .sum();
    let mean = total as f64 / trials as f64;
    assert!((mean - expect).abs() < 0.05 * expect, "mean {mean} vs {expect}");
}

#[test]
fn control_mutation_rejects_bad_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = ControlSequence::zeros(2, 2);
    for p in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(
            mutate_control(&c, &mut rng, p),
            Err(EvoError::InvalidFlipProbability(_))
        ));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_genomes_are_valid(seed in any::<u64>(), steps in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mirrored_truss(&mut rng, TrussShape::default());
        let genome = Genome::random(&g, steps, &mut rng).unwrap();
        prop_assert!(is_valid_assignment(&g, genome.channels.channels()));
        prop_assert_eq!(genome.control.n_steps(), steps);
        prop_assert_eq!(genome.control.n_channels(), g.n_channels());
        prop_assert!(genome.rating.is_none());
    }

    #[test]
    fn mutation_chains_preserve_validity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mirrored_truss(&mut rng, TrussShape::default());
        let mut a = initialize_assignment(&g, &mut rng).unwrap();
        for _ in 0..25 {
            match mutate_assignment(&g, &a, &mut rng) {
                Ok(b) => a = b,
                Err(EvoError::NoValidMutation) => break,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
            prop_assert!(is_valid_assignment(&g, a.channels()));
        }
    }
}
