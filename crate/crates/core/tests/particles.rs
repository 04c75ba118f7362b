use std::collections::BTreeMap;

use ddsde_core::euler::TimeGrid;
use ddsde_core::particles::io::{read_snapshot, write_snapshot};
use ddsde_core::particles::{
    advance, empirical_expectation, kde_evaluate, kde_grid, moment_increment_check, rng, run, DensitySource,
    Feedback, KdeSpec, ParticleEnsemble, ParticleRunConfig,
};
use ddsde_core::{catalog, DriftSpec, Error, GridDensity, GridSpec, InitialDistribution};
use proptest::prelude::*;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn drift(name: &str, c: f64) -> DriftSpec {
    catalog(name, 1, &BTreeMap::from([("c".to_string(), c)])).unwrap()
}

fn origin() -> InitialDistribution {
    InitialDistribution::point_mass(vec![0.0])
}

fn kde_run(m: usize, seed: u64, store: Vec<usize>) -> ParticleRunConfig {
    ParticleRunConfig {
        particles: m,
        seed,
        feedback: Feedback::Kde(KdeSpec::silverman()),
        store_steps: store,
    }
}

#[test]
fn noise_matches_frozen_vectors() {
    let text = include_str!("data/noise_vectors.txt");
    let mut checked = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let (seed, stream, step) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
        let mut z = [0.0; 2];
        rng::increment(seed, stream, step, &mut z);
        assert_eq!(format!("{:016x}", z[0].to_bits()), f[3], "{line}");
        assert_eq!(format!("{:016x}", z[1].to_bits()), f[4], "{line}");
        checked += 1;
    }
    assert_eq!(checked, 27);
}

#[test]
fn noise_is_box_muller_on_raw_chacha8_words() {
    let (seed, stream, step) = (42u64, 7u64, 3u64);
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut raw = ChaCha8Rng::from_seed(key);
    raw.set_stream(stream);
    raw.set_word_pos(16 * step as u128);
    let a = raw.next_u64() >> 11;
    let b = raw.next_u64() >> 11;
    let u1 = (a + 1) as f64 / 9007199254740992.0;
    let u2 = b as f64 / 9007199254740992.0;
    let r = (-2.0 * u1.ln()).sqrt();
    let mut z = [0.0; 2];
    rng::increment(seed, stream as usize, step as usize, &mut z);
    assert_eq!(z[0], r * (std::f64::consts::TAU * u2).cos());
    assert_eq!(z[1], r * (std::f64::consts::TAU * u2).sin());
}

#[test]
fn zero_drift_mean_is_a_martingale() {
    let m = 20_000;
    let tg = TimeGrid::new(1.0, 8).unwrap();
    let out = run(&origin(), &drift("zero", 0.0), &tg, &kde_run(m, 1, vec![8])).unwrap();
    let band = 3.0 * (2.0 * tg.horizon() / m as f64).sqrt();
    assert!(out[0].mean()[0].abs() <= band);
}

#[test]
fn constant_drift_mean_skips_first_step() {
    let m = 20_000;
    let (c, n) = (1.5, 8);
    let tg = TimeGrid::new(1.0, n).unwrap();
    let out = run(&origin(), &drift("constant", c), &tg, &kde_run(m, 2, vec![n])).unwrap();
    let band = 3.0 * (2.0 / m as f64).sqrt();
    let expect = (n - 1) as f64 * tg.h() * c;
    assert!((out[0].mean()[0] - expect).abs() <= band);
    // the full-horizon drift c T sits outside the band
    assert!((out[0].mean()[0] - c).abs() > band);
}

#[test]
fn runs_are_bit_identical_across_thread_counts() {
    let tg = TimeGrid::new(1.0, 16).unwrap();
    let init = InitialDistribution::gaussian(vec![0.0], 0.25).unwrap();
    let go = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&init, &drift("tanh_density", 1.0), &tg, &kde_run(5000, 9, vec![16])).unwrap())
    };
    let (a, b) = (go(1), go(5));
    let bits = |e: &ParticleEnsemble| e.positions().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a[0]), bits(&b[0]));
}

#[test]
fn silverman_kde_of_gaussian_sample() {
    // samples of g(1, .) = N(0, 2)
    let e = ParticleEnsemble::sample(&InitialDistribution::gaussian(vec![0.0], 2.0).unwrap(), 100_000, 5).unwrap();
    let grid = GridSpec::symmetric(1, 16.0, 4096).unwrap();
    let est = kde_grid(&e, &KdeSpec::silverman(), &grid).unwrap();
    let exact = GridDensity::from_initial(&origin(), &grid, 1.0).unwrap();
    let l1 = est.l1_distance(&exact).unwrap();
    assert!(l1 <= 0.02, "L1 {l1}");
}

#[test]
fn binned_and_exact_kde_agree() {
    let e = ParticleEnsemble::sample(&InitialDistribution::gaussian(vec![0.3], 1.0).unwrap(), 2000, 8).unwrap();
    let spec = KdeSpec::fixed(0.3).unwrap();
    let grid = GridSpec::symmetric(1, 10.0, 1024).unwrap();
    let binned = kde_grid(&e, &spec, &grid).unwrap();
    let queries: Vec<f64> = (0..1024).map(|i| grid.center(i)[0]).collect();
    let exact = kde_evaluate(&e, &spec, &queries).unwrap();
    let worst = binned
        .values()
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
    let mass: f64 = exact.iter().sum::<f64>() * grid.cell_volume();
    assert!((mass - 1.0).abs() < 1e-9);
}

#[test]
fn expectations_of_heat_flow() {
    let m = 50_000;
    let t = 0.5;
    let tg = TimeGrid::new(t, 4).unwrap();
    let e = run(&origin(), &drift("zero", 0.0), &tg, &kde_run(m, 4, vec![4])).unwrap().remove(0);
    let half = empirical_expectation(&e, |x| if x[0] >= 0.0 { 1.0 } else { 0.0 }, 1.0).unwrap();
    assert!(half.covers(0.5), "{half:?}");
    assert!(half.half_width <= 3.0 / (m as f64).sqrt());
    let cos = empirical_expectation(&e, |x| x[0].cos(), 1.0).unwrap();
    assert!(cos.covers((-t).exp()), "{cos:?}");
    let one = empirical_expectation(&e, |_| 1.0, 1.0).unwrap();
    assert_eq!((one.mean, one.half_width), (1.0, 0.0));
}

#[test]
fn zero_drift_fourth_moment_ratio_is_twelve() {
    let tg = TimeGrid::new(1.0, 8).unwrap();
    let tr = run(&origin(), &drift("zero", 0.0), &tg, &kde_run(100_000, 6, vec![2, 4, 8])).unwrap();
    let fit = moment_increment_check(&tr, &tg, &[(0.25, 0.5), (0.5, 1.0)]).unwrap();
    for p in &fit.pairs {
        assert!((p.ratio - 12.0).abs() <= 3.0 * p.std_error, "{p:?}");
    }
    assert!(moment_increment_check(&tr, &tg, &[(0.5, 0.5)]).is_err());
    assert!(matches!(
        moment_increment_check(&tr, &tg, &[(0.125, 0.5)]),
        Err(Error::MissingData(_))
    ));
    assert!(moment_increment_check(&tr, &tg, &[]).is_err());
}

#[test]
fn coupled_mode_tracks_the_exact_law() {
    let grid = GridSpec::symmetric(1, 16.0, 2048).unwrap();
    let tg = TimeGrid::new(1.0, 16).unwrap();
    let d = drift("tanh_density", 1.0);
    let cfg = ParticleRunConfig {
        particles: 50_000,
        seed: 12,
        feedback: Feedback::Coupled { grid: grid.clone() },
        store_steps: vec![16],
    };
    let e = run(&origin(), &d, &tg, &cfg).unwrap().remove(0);
    let rho = ddsde_core::euler::run(&origin(), &d, &grid, &tg, &[1.0]).unwrap().remove(0).1;
    let l1 = kde_grid(&e, &KdeSpec::silverman(), &grid).unwrap().l1_distance(&rho).unwrap();
    assert!(l1 < 0.05, "{l1}");
}

#[test]
fn overflow_names_the_particle() {
    let huge = DriftSpec::new("huge", 1, f64::MAX, |_, _, _, out| out[0] = f64::MAX).unwrap();
    let tg = TimeGrid::new(3.0, 3).unwrap();
    let grid = GridSpec::symmetric(1, 8.0, 64).unwrap();
    let flat = GridDensity::from_values(grid.clone(), vec![1.0 / 16.0; 64]).unwrap();
    let mut e = ParticleEnsemble::sample(&origin(), 3, 0).unwrap();
    e = advance(&e, &huge, DensitySource::Grid(&flat), &tg).unwrap();
    e = advance(&e, &huge, DensitySource::Grid(&flat), &tg).unwrap();
    let err = advance(&e, &huge, DensitySource::Grid(&flat), &tg).unwrap_err();
    assert!(matches!(err, Error::NonFiniteParticle { index: 0, step: 3, .. }), "{err}");
}

#[test]
fn stored_ensembles_round_trip() {
    let tg = TimeGrid::new(1.0, 4).unwrap();
    let out = run(&origin(), &drift("tanh_density", 1.0), &tg, &kde_run(500, 3, vec![0, 4])).unwrap();
    assert_eq!(out.iter().map(|e| e.step()).collect::<Vec<_>>(), vec![0, 4]);
    let mut buf = Vec::new();
    write_snapshot(&out[1], &mut buf).unwrap();
    assert_eq!(read_snapshot(&buf[..]).unwrap(), out[1]);
    assert!(run(&origin(), &drift("zero", 0.0), &tg, &kde_run(10, 3, vec![5])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn particle_paths_ignore_ensemble_size(seed in any::<u64>(), m in 2usize..40, extra in 1usize..40) {
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let init = InitialDistribution::gaussian(vec![0.5], 0.5).unwrap();
        let small = run(&init, &drift("zero", 0.0), &tg, &kde_run(m, seed, vec![4])).unwrap();
        let big = run(&init, &drift("zero", 0.0), &tg, &kde_run(m + extra, seed, vec![4])).unwrap();
        prop_assert_eq!(small[0].positions(), &big[0].positions()[..m]);
    }
}
