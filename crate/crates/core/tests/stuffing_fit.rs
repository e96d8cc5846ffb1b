use election_forensics::stuffing::{fit, FitConfig};
use election_forensics::synth::{generate, SynthSpec};
use election_forensics::ElectionRound;

fn round(n: usize, f: f64, seed: u64) -> ElectionRound {
    generate(&SynthSpec {
        n_boxes: n,
        stuffing_fraction: f,
        seed,
        ..Default::default()
    })
    .unwrap()
    .round
    .filter_min_electorate(100)
}

fn no_bootstrap() -> FitConfig {
    FitConfig {
        bootstrap: 0,
        ..Default::default()
    }
}

#[test]
fn recovers_a_known_stuffing_fraction() {
    let fit = fit(&round(50_000, 0.085, 1), "E", &no_bootstrap()).unwrap();
    assert!((fit.f_hat - 0.085).abs() <= 0.03, "{}", fit.f_hat);
    assert!(fit.converged);
}

#[test]
fn more_stuffing_gives_a_larger_estimate() {
    let mean = |f: f64| {
        (1..=5)
            .map(|seed| fit(&round(20_000, f, 10 + seed), "E", &no_bootstrap()).unwrap().f_hat)
            .sum::<f64>()
            / 5.0
    };
    let (clean, stuffed) = (mean(0.0), mean(0.1));
    assert!(stuffed > clean, "{stuffed} vs {clean}");
}

#[test]
fn uses_exactly_the_restricted_boxes() {
    let r = round(10_000, 0.05, 3);
    let config = FitConfig { replicates: 4, ..no_bootstrap() };
    let fit = fit(&r, "E", &config).unwrap();
    let expected = r.boxes.iter().filter(|b| b.turnout() > 0.25 && b.share(0) > 0.25).count();
    assert_eq!(fit.n_boxes_used, expected);
    assert_eq!(fit.n_boxes_total, r.len());
    assert!(fit.loss <= fit.loss_at_zero && fit.loss <= fit.loss_at_one);
    assert!((0.0..=1.0).contains(&fit.f_hat));
}

#[test]
fn bootstrap_is_reproducible() {
    let r = round(5_000, 0.1, 4);
    let config = FitConfig {
        replicates: 4,
        bootstrap: 4,
        ..Default::default()
    };
    let a = fit(&r, "E", &config).unwrap();
    assert_eq!(a, fit(&r, "E", &config).unwrap());
    assert_eq!(a.bootstrap_estimates.len(), 4);
    assert!(a.f_sd.is_finite() && a.f_sd >= 0.0);
    assert_eq!(a.significant, a.f_hat > 2.0 * a.f_sd);
}

#[test]
fn other_candidates_and_bad_configs_are_rejected() {
    let r = round(2_000, 0.0, 5);
    assert!(fit(&r, "X", &no_bootstrap()).is_err());
    assert!(fit(&r, "E", &FitConfig { replicates: 0, ..no_bootstrap() }).is_err());
    assert!(fit(&r, "E", &FitConfig { extreme_fraction: 1.0, ..no_bootstrap() }).is_err());
}
