use dhipf::{simulate_truth, NoiseScaling, StateSpaceModel};

fn positive_fraction(states: &[Vec<f64>]) -> f64 {
    states.iter().filter(|x| x[0] > 0.0).count() as f64 / states.len() as f64
}

#[test]
fn symmetric_wells_share_occupancy() {
    let m = StateSpaceModel::double_well(1.0, 1.5, 1.5, 0.01, NoiseScaling::SqrtDt).unwrap();
    for seed in [3, 17, 91] {
        let (truth, _) = simulate_truth(&m, &[0.6], 100_000, 1, seed, None).unwrap();
        let p = positive_fraction(&truth.states[1..]);
        assert!((0.3..=0.7).contains(&p), "seed {seed}: fraction near +1 is {p}");
        // the path does visit both wells rather than hovering at the barrier
        let near_wells = truth.states.iter().filter(|x| (x[0].abs() - 1.0).abs() < 0.5).count();
        assert!(near_wells as f64 > 0.5 * truth.states.len() as f64);
    }
}

#[test]
fn deep_wells_rarely_switch_without_forcing() {
    // alpha = 10 raises the barrier to 2.5, far above sigma^2 / 2
    let m = StateSpaceModel::double_well(10.0, 1.0, 2.0, 0.01, NoiseScaling::SqrtDt).unwrap();
    let (truth, _) = simulate_truth(&m, &[0.6], 300, 1, 5, None).unwrap();
    assert!(positive_fraction(&truth.states[1..]) > 0.95);
    let (forced, _) = simulate_truth(&m, &[0.6], 300, 1, 5, Some(150)).unwrap();
    assert!(forced.states[150][0] < 0.0);
    assert_eq!(forced.states[..150], truth.states[..150]);
}

#[test]
fn observation_gaps_keep_the_truth() {
    let m = StateSpaceModel::double_well(1.0, 1.0, 1.0, 0.01, NoiseScaling::SqrtDt).unwrap();
    let (t1, o1) = simulate_truth(&m, &[0.6], 60, 1, 8, None).unwrap();
    let (t5, o5) = simulate_truth(&m, &[0.6], 60, 5, 8, None).unwrap();
    assert_eq!(t1, t5);
    assert_eq!(o5.len(), 12);
    for n in (5..=60).step_by(5) {
        assert_eq!(o5.at(n), o1.at(n));
    }
    assert!(o5.at(7).is_none());
}
