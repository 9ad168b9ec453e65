use squeezelab::channels::apply_loss;
use squeezelab::distributions::JointDistribution;
use squeezelab::inference::fit::Objective;
use squeezelab::inference::pump::pump_curve;
use squeezelab::inference::{
    fidelity, fit_model, fit_pump_curve, klyshko_efficiency, mc_std, sample_counts, FitOptions,
    ForwardModel, Statistic,
};
use squeezelab::{multimode_pdc, tmsv_joint, Arm, Error, ModelParams};

fn lambda_for_mean(mu: f64) -> f64 {
    (mu / (1.0 + mu)).sqrt()
}

fn as_f64(c: &squeezelab::JointCounts) -> Vec<f64> {
    c.counts().iter().map(|&v| v as f64).collect()
}

#[test]
fn single_bin_distribution_takes_every_event() {
    let j = JointDistribution::new(3, 3, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 0.0).unwrap();
    let c = sample_counts(&j, 4321, 5).unwrap();
    assert_eq!(c.get(1, 1), 4321);
    assert_eq!(c.n_events(), 4321);
}

#[test]
fn sampled_bins_stay_within_binomial_spread() {
    let j = tmsv_joint(0.5, 40).unwrap();
    let n = 1_000_000u64;
    let c = sample_counts(&j, n, 17).unwrap();
    assert_eq!(c.counts().iter().sum::<u64>(), n);
    for k in 0..40 {
        let p = j.get(k, k);
        if p < 1e-3 {
            continue;
        }
        let freq = c.get(k, k) as f64 / n as f64;
        let bound = 5.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < bound, "bin {k}: {freq} vs {p}");
    }
}

#[test]
fn sampling_is_deterministic_and_seeds_are_independent() {
    let j = apply_loss(&multimode_pdc(2.0, 1.2, 60).unwrap(), 0.6, 0.7).unwrap();
    let n = 200_000u64;
    let a = sample_counts(&j, n, 1).unwrap();
    assert_eq!(a, sample_counts(&j, n, 1).unwrap());
    let b = sample_counts(&j, n, 2).unwrap();
    assert_ne!(a, b);

    let expected: Vec<f64> = j.probs().iter().map(|p| p * n as f64).collect();
    let used: Vec<usize> = (0..expected.len()).filter(|&i| expected[i] >= 20.0).collect();
    let df = used.len() as f64 - 1.0;
    let chi2 = |c: &[f64]| used.iter().map(|&i| (c[i] - expected[i]).powi(2) / expected[i]).sum::<f64>();
    let (ca, cb) = (as_f64(&a), as_f64(&b));
    for c in [&ca, &cb] {
        assert!((chi2(c) - df).abs() < 5.0 * (2.0 * df).sqrt(), "chi2 {} for df {df}", chi2(c));
    }
    let za: Vec<f64> = used.iter().map(|&i| (ca[i] - expected[i]) / expected[i].sqrt()).collect();
    let zb: Vec<f64> = used.iter().map(|&i| (cb[i] - expected[i]) / expected[i].sqrt()).collect();
    let dot: f64 = za.iter().zip(&zb).map(|(x, y)| x * y).sum();
    let norm = (za.iter().map(|x| x * x).sum::<f64>() * zb.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let corr = dot / norm;
    assert!(corr.abs() < 4.0 / (used.len() as f64).sqrt(), "correlation {corr}");
}

#[test]
fn zero_events_are_rejected() {
    let j = tmsv_joint(0.5, 10).unwrap();
    assert!(sample_counts(&j, 0, 1).is_err());
}

#[test]
fn mc_std_of_mean_follows_the_clt() {
    let j = apply_loss(&tmsv_joint(lambda_for_mean(2.0), 120).unwrap(), 0.6, 0.64).unwrap();
    let n = 100_000u64;
    let report = mc_std(&j, n, 2000, Statistic::Mean(Arm::Signal), 3).unwrap();
    let m = j.marginal(Arm::Signal);
    let mean = m.mean();
    let var: f64 = m.probs().iter().enumerate().map(|(k, p)| (k as f64 - mean).powi(2) * p).sum();
    let oracle = (var / n as f64).sqrt();
    assert!((report.std / oracle - 1.0).abs() < 0.1, "{} vs {oracle}", report.std);
    assert_eq!(report.trials, 2000);
    assert_eq!(report.failures, 0);
}

/// Delta-method standard deviation of `g2 = F2 / mu^2` from `n` draws.
fn delta_method_g2_std(p: &[f64], n: u64) -> f64 {
    let mu: f64 = p.iter().enumerate().map(|(k, q)| k as f64 * q).sum();
    let f2: f64 = p.iter().enumerate().map(|(k, q)| (k * k.saturating_sub(1)) as f64 * q).sum();
    let influence = |k: usize| {
        let k = k as f64;
        k * (k - 1.0) / (mu * mu) - 2.0 * f2 * k / mu.powi(3)
    };
    let mean_inf: f64 = p.iter().enumerate().map(|(k, q)| influence(k) * q).sum();
    let var: f64 = p
        .iter()
        .enumerate()
        .map(|(k, q)| (influence(k) - mean_inf).powi(2) * q)
        .sum();
    (var / n as f64).sqrt()
}

#[test]
fn mc_std_of_thermal_g2_matches_delta_method() {
    let j = tmsv_joint(lambda_for_mean(1.0), 120).unwrap();
    let n = 1_000_000u64;
    let report = mc_std(&j, n, 1000, Statistic::Gn { arm: Arm::Idler, order: 2 }, 8).unwrap();
    let oracle = delta_method_g2_std(j.marginal(Arm::Idler).probs(), n);
    assert!((report.point_estimate - 2.0).abs() < 1e-9);
    assert!((report.std / oracle - 1.0).abs() < 0.2, "{} vs {oracle}", report.std);
}

#[test]
fn mc_std_of_linear_statistic_scales_as_inverse_root_n() {
    let j = tmsv_joint(lambda_for_mean(1.5), 120).unwrap();
    let ns = [10_000u64, 31_623, 100_000];
    let points: Vec<(f64, f64)> = ns
        .iter()
        .map(|&n| {
            let r = mc_std(&j, n, 4000, Statistic::Mean(Arm::Signal), 21).unwrap();
            ((n as f64).ln(), r.std.ln())
        })
        .collect();
    let mx = points.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = points.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() < 0.025, "slope {slope}");
}

#[test]
fn mc_rejects_too_few_trials() {
    let j = tmsv_joint(0.5, 20).unwrap();
    assert!(mc_std(&j, 1000, 1, Statistic::Nrf, 0).is_err());
}

#[test]
fn mc_reports_unreliable_statistics() {
    let j = tmsv_joint(0.1, 20).unwrap();
    let err = mc_std(&j, 20, 200, Statistic::HeraldedG2 { herald: Arm::Idler, h: 3 }, 0).unwrap_err();
    assert!(matches!(err, Error::UnreliableMonteCarlo { .. }), "{err}");
}

fn noiseless_truth() -> ModelParams {
    ModelParams::pdc(1.5, 1.2)
        .with_efficiencies(0.55, 0.65)
        .with_coherent(0.1, 0.2)
        .with_thermal(0.05, 0.08)
}

#[test]
fn fit_recovers_noiseless_parameters() {
    let truth = noiseless_truth();
    let data = ForwardModel::new(24, 24)
        .unwrap()
        .predict(&truth)
        .unwrap()
        .with_n_events(Some(1_000_000_000));
    let fit = fit_model(&data, None, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    for (got, want) in fit.params.to_array().iter().zip(truth.to_array()) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!((fit.fidelity - 1.0).abs() < 1e-12);

    let objective = Objective::new(&data).unwrap();
    let at_truth = objective.value(&truth).unwrap();
    assert!(at_truth <= fit.residual + 1e-9);
    assert!(fit.residual >= 0.0);
}

#[test]
fn fit_needs_an_event_count() {
    let data = ForwardModel::new(8, 8).unwrap().predict(&noiseless_truth()).unwrap();
    assert!(fit_model(&data, None, &FitOptions::default()).is_err());
}

#[test]
fn klyshko_on_lossless_tmsv_is_near_unity() {
    let j = tmsv_joint(lambda_for_mean(2.0), 120).unwrap();
    let counts = sample_counts(&j, 1_000_000, 6).unwrap();
    let k = klyshko_efficiency(&counts.to_distribution().unwrap()).unwrap();
    assert!((k.eta_s - 1.0).abs() < 0.02 && (k.eta_i - 1.0).abs() < 0.02, "{k:?}");
}

#[test]
fn klyshko_recovers_sampled_efficiencies() {
    let j = apply_loss(&tmsv_joint(lambda_for_mean(2.0), 120).unwrap(), 0.6, 0.64).unwrap();
    let counts = sample_counts(&j, 10_000_000, 7).unwrap();
    let k = klyshko_efficiency(&counts.to_distribution().unwrap()).unwrap();
    assert!((k.eta_s - 0.6).abs() < 0.01, "{k:?}");
    assert!((k.eta_i - 0.64).abs() < 0.01, "{k:?}");
    assert!(k.warnings.is_empty());
}

#[test]
fn klyshko_is_biased_low_for_multimode_light() {
    let j = apply_loss(&multimode_pdc(2.0, 1.12, 120).unwrap(), 0.6, 0.64).unwrap();
    let k = klyshko_efficiency(&j).unwrap();
    let bias = (k.eta_s - 0.6, k.eta_i - 0.64);
    assert!(bias.0 < -0.01 && bias.1 < -0.01, "bias {bias:?}");
}

#[test]
fn pump_fit_examples() {
    let p_max: f64 = 4.0;
    let alpha = 2.9 / p_max.sqrt();
    let fit = fit_pump_curve(&[(0.0, 0.0), (p_max, pump_curve(alpha, p_max))]).unwrap();
    assert!((fit.alpha - alpha).abs() < 1e-12 * alpha);

    assert!((2.9f64.sinh().powi(2) - 82.0).abs() < 0.5);

    let noise = [0.031, -0.047, 0.012, 0.044, -0.021, -0.05, 0.008, 0.037, -0.033, 0.019];
    let points: Vec<(f64, f64)> = (1..=10)
        .zip(noise)
        .map(|(i, e)| {
            let p = p_max * i as f64 / 10.0;
            (p, pump_curve(alpha, p) * (1.0 + e))
        })
        .collect();
    let fit = fit_pump_curve(&points).unwrap();
    assert!((fit.alpha / alpha - 1.0).abs() < 0.02, "{}", fit.alpha);
    assert!(matches!(fit_pump_curve(&[(0.0, 1.0), (0.0, 2.0)]), Err(Error::InvalidData(_))));
}

#[test]
fn fidelity_examples() {
    let p = apply_loss(&multimode_pdc(1.0, 1.2, 40).unwrap(), 0.5, 0.6).unwrap();
    let q = tmsv_joint(0.6, 40).unwrap();
    assert!((fidelity(&p, &p).unwrap() - 1.0).abs() < 1e-12);
    let (pq, qp) = (fidelity(&p, &q).unwrap(), fidelity(&q, &p).unwrap());
    assert_eq!(pq, qp);
    assert!(pq < 1.0 - 1e-12 && pq > 0.0);

    let a = JointDistribution::new(2, 2, vec![0.5, 0.5, 0.0, 0.0], 0.0).unwrap();
    let b = JointDistribution::new(2, 2, vec![0.0, 0.0, 0.3, 0.7], 0.0).unwrap();
    assert_eq!(fidelity(&a, &b).unwrap(), 0.0);
    assert!(fidelity(&a, &tmsv_joint(0.5, 3).unwrap()).is_err());
}
