use coxmix::dataset::event_time_quantiles;
use coxmix::metrics::{evaluate_by_group, EvalOptions, Metric, RiskMatrix};
use coxmix::synth::{generate, ph_config, GroupSpec, SynthConfig};
use ndarray::Array2;

/// Group "1" carries a hazard shift the predictor ignores, so its calibration is worse.
#[test]
fn group_with_ignored_hazard_shift_is_worse_calibrated() {
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let config = SynthConfig {
            group: Some(GroupSpec {
                prevalence: 0.4,
                hazard_shift: 0.7,
            }),
            ..ph_config(4000, &[1.0, -0.5, 0.25], 0.3, seed)
        };
        let cohort = generate(&config).unwrap();
        let ds = cohort.dataset().unwrap();
        let horizons = event_time_quantiles(&cohort.times, &cohort.events, &[0.25, 0.5, 0.75]).unwrap();
        let values = Array2::from_shape_fn((cohort.len(), horizons.len()), |(i, h)| {
            config.true_survival(&cohort.features[i], false, horizons[h])
        });
        let risk = RiskMatrix::new(horizons.clone(), values);
        let opts = EvalOptions {
            bootstrap: 0,
            ..EvalOptions::default()
        };
        let report = evaluate_by_group(&risk, &ds.times(), &ds.events(), Some(&ds.groups()), &opts).unwrap();
        for h in 0..horizons.len() {
            let ece = |g: &str| report.get(Metric::Ece, h, g).unwrap().estimate.unwrap();
            gaps.push((seed, h, ece("1") - ece("0")));
        }
    }
    for h in 0..3 {
        let mut g: Vec<f64> = gaps.iter().filter(|x| x.1 == h).map(|x| x.2).collect();
        g.sort_by(f64::total_cmp);
        assert!(g[2] > 0.0, "horizon {h}: median ECE gap {} ({g:?})", g[2]);
    }
}
