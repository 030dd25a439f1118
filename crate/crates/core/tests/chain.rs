use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regimelq_core::matcore::Mat;
use regimelq_core::regime_chain::{sample_chain_path, transition_matrix, validate_generator};
use regimelq_core::samples::symmetric_generator;

#[test]
fn switch_probability_matches_closed_form() {
    let g = symmetric_generator(1.0);
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut switched = 0usize;
    for _ in 0..n {
        let path = sample_chain_path(&g, 0, 1.0, &mut rng).unwrap();
        assert!(path.is_well_formed());
        if path.state_at(1.0) != 0 {
            switched += 1;
        }
    }
    let p = (1.0 - (-2.0f64).exp()) / 2.0;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    let freq = switched as f64 / n as f64;
    assert!((freq - p).abs() <= 4.0 * se, "{freq} vs {p}");
}

#[test]
fn empirical_distribution_matches_transition_row() {
    let g = validate_generator(&Mat::from_row_slice(
        3,
        3,
        &[-1.0, 0.6, 0.4, 0.3, -0.5, 0.2, 0.5, 0.5, -1.0],
    ))
    .unwrap();
    let t = 0.8;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let path = sample_chain_path(&g, 2, t, &mut rng).unwrap();
        assert!(path.is_well_formed());
        counts[path.terminal_state()] += 1;
    }
    let row = transition_matrix(&g, t).unwrap();
    for (j, &c) in counts.iter().enumerate() {
        let p = row[(2, j)];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((c as f64 / n as f64 - p).abs() <= 4.0 * se);
    }
}

#[test]
fn long_run_rows_reach_stationarity() {
    let g = validate_generator(&Mat::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, -0.5])).unwrap();
    // left null vector of [[-1, 1], [0.5, -0.5]] is (1, 2)/3
    let p = transition_matrix(&g, 50.0).unwrap();
    for i in 0..2 {
        assert!((p[(i, 0)] - 1.0 / 3.0).abs() <= 1e-8);
        assert!((p[(i, 1)] - 2.0 / 3.0).abs() <= 1e-8);
    }
}
