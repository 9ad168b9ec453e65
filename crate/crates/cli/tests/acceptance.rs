//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero when any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use squeezelab::channels::{apply_loss, invert_loss};
use squeezelab::inference::sampling::{stream_rng, EventSampler};
use squeezelab::inference::{fit_model, mc_g_surface, mc_std, sample_counts, FitOptions, Statistic};
use squeezelab::statistics::{
    g2, g_n, heralded_g2, heralded_parity, nonclassicality_matrix, nrf, squeezing_db,
};
use squeezelab::tes::{
    calibrate_standard, overlap, synth_trace_with, systematic_bounds, TemplateSet, Trace,
    TraceModel,
};
use squeezelab::{
    background_marginal, compose_state, multimode_pdc, required_dim, tmsv_joint, Arm, Background,
    JointCounts, JointDist, MarginalDist, ModelParams, Truncation,
};

const TABLE_EVENTS: u64 = 8_200_000;
const TABLE_WINDOW: usize = 80;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn table_params() -> ModelParams {
    ModelParams::pdc(20.30, 1.097)
        .with_efficiencies(0.4313, 0.5212)
        .with_coherent(0.14, 0.38)
}

/// The detected table state restricted to the detector range.
fn table_state() -> JointDist {
    let p = table_params();
    let dim = required_dim(&p, 1e-12).unwrap();
    let state = compose_state::<f64>(&p, Truncation::new(dim).with_tail_tol(1e-12)).unwrap();
    apply_loss(&state, p.eta_s, p.eta_i)
        .unwrap()
        .window(TABLE_WINDOW, TABLE_WINDOW)
        .unwrap()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn criterion_1() -> Outcome {
    // Mean one photon per arm; the grid tail underflows to zero.
    let j = tmsv_joint(0.5f64.sqrt(), 1200).unwrap();
    let signal = j.marginal(Arm::Signal);
    let gn_err = (2..=6)
        .map(|n| (g_n(&signal, n).unwrap() - factorial(n)).abs())
        .fold(0.0, f64::max);
    let herald_err = (1..=20)
        .map(|h| (heralded_g2(&j, Arm::Idler, h).unwrap() - (1.0 - 1.0 / h as f64)).abs())
        .fold(0.0, f64::max);
    Outcome::new(
        gn_err <= 1e-9 && herald_err <= 1e-12,
        format!("max |g_n - n!| = {gn_err:.2e} (n <= 6), max |heralded g2 - (1 - 1/h)| = {herald_err:.2e} (h <= 20)"),
    )
}

fn criterion_2() -> Outcome {
    let j = tmsv_joint(0.5f64.sqrt(), 200).unwrap();
    let mut worst = 0.0f64;
    let mut at_066 = f64::NAN;
    for eta in [0.36, 0.6, 0.66] {
        let v = nrf(&apply_loss(&j, eta, eta).unwrap()).unwrap();
        worst = worst.max((v - (1.0 - eta)).abs());
        if eta == 0.66 {
            at_066 = v;
        }
    }
    Outcome::new(
        worst <= 1e-6 && at_066 < 0.4,
        format!("max |NRF - (1 - eta)| = {worst:.2e}, NRF(0.66) = {at_066:.6}"),
    )
}

fn criterion_3() -> Outcome {
    let j = multimode_pdc(0.1f64, 1.12, 60).unwrap();
    let (gs, gi) = (
        g2(&j.marginal(Arm::Signal)).unwrap(),
        g2(&j.marginal(Arm::Idler)).unwrap(),
    );
    let pass = [gs, gi]
        .iter()
        .all(|&g| (g - 1.89).abs() <= 0.03 && (g - 1.87).abs() <= 0.03);
    Outcome::new(
        pass,
        format!("g2 = {gs:.4} / {gi:.4}, 1 + 1/K = {:.4}, measured 1.89 and 1.87", 1.0 + 1.0 / 1.12),
    )
}

fn criterion_4() -> Outcome {
    let (potential, _) = squeezing_db(2.9f64, 1.0).unwrap();
    let mut pass = (potential - 25.2).abs() <= 0.05;
    let mut parts = vec![format!("potential {potential:.3} dB")];
    for eta in [0.60, 0.64, 0.66, 0.68] {
        let (_, m) = squeezing_db(2.9f64, eta).unwrap();
        pass &= (4.3..=4.9).contains(&m);
        parts.push(format!("eta {eta}: {m:.3} dB"));
    }
    Outcome::new(pass, parts.join(", "))
}

fn criterion_5(data: &JointDist) -> Outcome {
    let truth = table_params();
    let r = match fit_model(data, None, &FitOptions::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("fit failed: {e}")),
    };
    let p = r.params;
    let d_es = (p.eta_s - truth.eta_s).abs();
    let d_ei = (p.eta_i - truth.eta_i).abs();
    let rel_n = (p.n_pdc / truth.n_pdc - 1.0).abs();
    let d_k = (p.k - truth.k).abs();
    Outcome::new(
        d_es <= 0.01 && d_ei <= 0.01 && rel_n <= 0.01 && d_k <= 0.02 && r.fidelity >= 0.999,
        format!(
            "eta = ({:.4}, {:.4}), n_pdc = {:.3}, K = {:.4}, fidelity = {:.5}, converged = {}",
            p.eta_s, p.eta_i, p.n_pdc, p.k, r.fidelity, r.converged
        ),
    )
}

/// Delta-method standard deviation of the signal `g2` estimated from
/// `n_events` multinomial draws.
fn delta_method_g2_std(m: &MarginalDist, n_events: u64) -> f64 {
    let p = m.probs();
    let f1: f64 = p.iter().enumerate().map(|(n, &q)| n as f64 * q).sum();
    let f2: f64 = p
        .iter()
        .enumerate()
        .map(|(n, &q)| (n * n.saturating_sub(1)) as f64 * q)
        .sum();
    let grad: Vec<f64> = (0..p.len())
        .map(|n| {
            let n = n as f64;
            n * (n - 1.0) / (f1 * f1) - 2.0 * f2 * n / (f1 * f1 * f1)
        })
        .collect();
    let mean: f64 = p.iter().zip(&grad).map(|(q, d)| q * d).sum();
    let second: f64 = p.iter().zip(&grad).map(|(q, d)| q * d * d).sum();
    ((second - mean * mean) / n_events as f64).sqrt()
}

fn criterion_6(state: &JointDist) -> Outcome {
    let trials = 10_000;
    let stat = Statistic::Gn {
        arm: Arm::Signal,
        order: 2,
    };
    let mc = mc_std(state, TABLE_EVENTS, trials, stat, 11).unwrap();
    let analytic = delta_method_g2_std(&state.marginal(Arm::Signal), TABLE_EVENTS);
    let ratio = mc.std / analytic;

    let surface = mc_g_surface(state, TABLE_EVENTS, trials, 40, 40, 12).unwrap();
    let rel: Vec<f64> = surface
        .std
        .iter()
        .zip(&surface.point_estimate)
        .map(|(s, v)| s / v)
        .collect();
    let finite = rel.iter().all(|r| r.is_finite());
    let worst = rel.iter().copied().fold(0.0, f64::max);
    let reliable = (1..=40)
        .take_while(|&k| rel[(k - 1) * 40 + (k - 1)] < 0.1)
        .last()
        .unwrap_or(0);
    Outcome::new(
        (ratio - 1.0).abs() <= 0.2 && finite && worst < 0.1,
        format!(
            "g2 std: MC {:.3e} vs delta method {analytic:.3e} (ratio {ratio:.3}); \
             surface relative error finite = {finite}, max {worst:.3} (m,n <= 40), \
             g(k,k) below 10% up to k = {reliable}; {} failed resamples",
            mc.std, surface.failures
        ),
    )
}

fn criterion_7(state: &JointDist) -> Outcome {
    let dim = 60;
    let classical = JointDist::product(
        &background_marginal(Background::Poisson, 5.0, dim).unwrap(),
        &background_marginal(Background::Poisson, 3.0, dim).unwrap(),
    );
    let classical_min = (1..=3)
        .map(|o| nonclassicality_matrix(&classical, o).unwrap().min_eigenvalue)
        .fold(f64::INFINITY, f64::min);

    let mut pass = classical_min >= -1e-10;
    let mut parts = vec![format!("Poisson x Poisson min eigenvalue {classical_min:.2e}")];
    for order in 1..=2 {
        let lambda = nonclassicality_matrix(state, order).unwrap().min_eigenvalue;
        let std = mc_std(state, TABLE_EVENTS, 1000, Statistic::MinEigenvalue { order }, 20 + order as u64)
            .unwrap()
            .std;
        let sigmas = -lambda / std;
        pass &= lambda < 0.0 && sigmas > 10.0;
        parts.push(format!("order {order}: {lambda:.4e} ({sigmas:.0} sigma)"));
    }
    Outcome::new(pass, parts.join(", "))
}

fn criterion_8() -> Outcome {
    let p = ModelParams::pdc(7.0, 1.12).with_efficiencies(0.68, 0.64);
    let state = compose_state::<f64>(&p, 400).unwrap();
    let detected = apply_loss(&state, p.eta_s, p.eta_i).unwrap();
    let curve: Vec<f64> = (1..=50)
        .map(|h| heralded_g2(&detected, Arm::Idler, h).unwrap())
        .collect();
    let below_one = curve.iter().all(|&g| g < 1.0);
    let monotone = curve.windows(2).all(|w| w[1] > w[0]);
    let parity = heralded_parity(&detected, Arm::Idler, 1).unwrap();
    Outcome::new(
        below_one && monotone && parity < 0.0 && parity.abs() <= 0.3,
        format!(
            "heralded g2: h=1 {:.4}, h=50 {:.4}, all < 1 = {below_one}, increasing = {monotone}; parity(h=1) = {parity:.4}",
            curve[0], curve[49]
        ),
    )
}

fn criterion_9() -> Outcome {
    let (eta_s, eta_i) = (0.64, 0.68);
    let lambda = (1.4f64 / 2.4).sqrt();
    let truth = tmsv_joint(lambda, 80).unwrap();
    let detected = apply_loss(&truth, eta_s, eta_i).unwrap();
    let counts = sample_counts(&detected, 10_000_000, 31).unwrap();
    let inv = match invert_loss(&counts.to_distribution().unwrap(), eta_s, eta_i, 15) {
        Ok(inv) => inv,
        Err(e) => return Outcome::new(false, format!("inversion failed: {e}")),
    };
    let diag_mass: f64 = (0..15).map(|n| inv.state.get(n, n)).sum();
    let off = 1.0 - diag_mass;
    let worst = (0..15)
        .map(|n| (inv.state.get(n, n) - truth.get(n, n)).abs())
        .fold(0.0, f64::max);
    Outcome::new(
        off < 1e-2 && worst <= 0.02,
        format!("off-diagonal mass {off:.3e}, max |diagonal error| {worst:.3e}"),
    )
}

fn classify_photons(bank: &TemplateSet, traces: &[Trace]) -> Vec<Option<usize>> {
    bank.classify_all(traces)
        .into_iter()
        .map(|r| r.ok().map(|c| c.photons))
        .collect()
}

fn fixed_traces(n: usize, count: usize, model: &TraceModel, seed: u64) -> Vec<Trace> {
    (0..count)
        .map(|t| synth_trace_with(n, model, &mut stream_rng(seed, t as u64)).unwrap())
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

fn heralded_curve(bank: &TemplateSet, signal: &[Trace], idler: &[Trace], max_h: usize) -> Vec<f64> {
    let pairs: Vec<(usize, usize)> = classify_photons(bank, signal)
        .into_iter()
        .zip(classify_photons(bank, idler))
        .filter_map(|(s, i)| Some((s?, i?)))
        .collect();
    let dim = pairs.iter().map(|&(s, i)| s.max(i) + 1).max().unwrap_or(1);
    let mut counts = vec![0u64; dim * dim];
    for &(s, i) in &pairs {
        counts[s * dim + i] += 1;
    }
    let j: JointDist = JointCounts::new(dim, dim, counts)
        .unwrap()
        .to_distribution()
        .unwrap();
    (1..=max_h)
        .map(|h| heralded_g2(&j, Arm::Idler, h).unwrap_or(f64::NAN))
        .collect()
}

fn criterion_10() -> Outcome {
    let model = TraceModel::design();
    let bank = calibrate_standard(&model, 10_000, 1).unwrap();
    let mut traces_used = 20 * 10_000;

    let mut min_accuracy = f64::INFINITY;
    for n in 0..10 {
        let got = classify_photons(&bank, &fixed_traces(n, 1000, &model, 100 + n as u64));
        traces_used += got.len();
        let correct = got.iter().filter(|&&g| g == Some(n)).count();
        min_accuracy = min_accuracy.min(correct as f64 / got.len() as f64);
    }

    let mut worst_bias = 0.0f64;
    let mut unclassified = 0;
    for n in 1..=80 {
        let got = classify_photons(&bank, &fixed_traces(n, 500, &model, 1000 + n as u64));
        traces_used += got.len();
        let est: Vec<f64> = got.iter().flatten().map(|&g| g as f64).collect();
        unclassified += got.len() - est.len();
        let bias = est.iter().sum::<f64>() / est.len() as f64 - n as f64;
        if bias.abs() > worst_bias.abs() || bias.is_nan() {
            worst_bias = bias;
        }
    }

    let mut min_separation = f64::INFINITY;
    for n in 1..=20 {
        let tpl = bank
            .templates
            .iter()
            .min_by(|a, b| {
                (a.mean_photons - n as f64)
                    .abs()
                    .total_cmp(&(b.mean_photons - n as f64).abs())
            })
            .unwrap();
        let cluster = |k: usize| {
            let o: Vec<f64> = fixed_traces(k, 1000, &model, 5000 + k as u64)
                .iter()
                .map(|t| overlap(&t.samples, &tpl.trace, model.dt))
                .collect();
            mean_std(&o)
        };
        let (m0, s0) = cluster(n);
        let (m1, s1) = cluster(n + 1);
        traces_used += 2000;
        min_separation = min_separation.min((m1 - m0) / (s0 + s1));
    }

    let p = ModelParams::pdc(7.0, 1.12).with_efficiencies(0.68, 0.64);
    let detected = apply_loss(&compose_state::<f64>(&p, 400).unwrap(), p.eta_s, p.eta_i).unwrap();
    let sampler = EventSampler::new(&detected).unwrap();
    let mut rng = stream_rng(77, 0);
    let (signal, idler): (Vec<Trace>, Vec<Trace>) = (0..50_000u64)
        .map(|e| {
            let (s, i) = sampler.sample(&mut rng);
            let mut r = stream_rng(78, e);
            (
                synth_trace_with(s, &model, &mut r).unwrap(),
                synth_trace_with(i, &model, &mut r).unwrap(),
            )
        })
        .unzip();
    traces_used += 100_000;
    let max_h = 20;
    let nominal = heralded_curve(&bank, &signal, &idler, max_h);
    let (lo_bank, hi_bank) = systematic_bounds(&bank, 0.85, 1.15).unwrap();
    let lo = heralded_curve(&lo_bank, &signal, &idler, max_h);
    let hi = heralded_curve(&hi_bank, &signal, &idler, max_h);
    let bracketed = (0..max_h)
        .filter(|&h| lo[h].min(hi[h]) <= nominal[h] && nominal[h] <= lo[h].max(hi[h]))
        .count();

    Outcome::new(
        min_accuracy >= 0.99
            && worst_bias.abs() <= 0.5
            && min_separation > 1.0
            && bracketed == max_h,
        format!(
            "min accuracy n<10 {min_accuracy:.4}, worst bias n<=80 {worst_bias:+.3} ({unclassified} out of range), \
             min cluster separation n<=20 {min_separation:.2} sigma-sums, \
             band (x0.85, x1.15) brackets heralded g2 at {bracketed}/{max_h} heralds; {traces_used} traces"
        ),
    )
}

fn run_cli(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_squeezelab"))
        .args(args)
        .env("SQUEEZELAB_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).display().to_string();
    let read = |p: &str| std::fs::read(p).unwrap_or_default();
    let (hist, traces, bank) = (d("hist.json"), d("traces.csv"), d("bank.json"));
    let sidecar = Path::new(&traces).with_extension("json").display().to_string();
    let (classes, surface) = (d("classes.csv"), d("surface.csv"));

    let commands: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (
            vec!["simulate", "--n-pdc", "2", "--k", "1.1", "--eta", "0.6", "0.64", "--alpha", "0.1", "0.2",
                 "--events", "200000", "--seed", "5", "--out", &hist],
            vec![&hist],
        ),
        (
            vec!["analyze", &hist, "--nrf", "--parity", "--herald", "1", "--ncmatrix", "2", "--mc", "200",
                 "--g-surface", "4", "4", "--surface-out", &surface, "--seed", "9"],
            vec![&surface],
        ),
        (vec!["fit", &hist, "--starts", "4", "--seed", "3", "--tol", "1e-6"], vec![]),
        (
            vec!["tes-synth", "--mean", "4", "--count", "2000", "--seed", "8", "--out", &traces],
            vec![&traces, &sidecar],
        ),
        (vec!["tes-calibrate", "--seed", "2", "--out", &bank], vec![&bank]),
        (
            vec!["tes-classify", &traces, "--templates", &bank, "--bounds", "0.9", "1.1", "--out", &classes],
            vec![&classes],
        ),
    ];

    let mut failures = Vec::new();
    for (args, files) in &commands {
        let first = run_cli(args, "1");
        let first_files: Vec<Vec<u8>> = files.iter().map(|f| read(f)).collect();
        let second = run_cli(args, "4");
        let second_files: Vec<Vec<u8>> = files.iter().map(|f| read(f)).collect();
        let ok = first.status.success()
            && second.status.success()
            && first.stdout == second.stdout
            && first_files == second_files
            && first_files.iter().all(|f| !f.is_empty());
        if !ok {
            failures.push(args[0].to_string());
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} seeded commands byte-identical across reruns with 1 and 4 threads", commands.len())
        } else {
            format!("differing or failing: {}", failures.join(", "))
        },
    )
}

fn report(number: usize, limit: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = run();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = outcome.pass && in_time;
    println!(
        "criterion {number:>2}: {} [{:.1} s, limit {} s{}] {}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", too slow" },
        outcome.detail
    );
    pass
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= report(1, secs(5), criterion_1);
    all &= report(2, secs(5), criterion_2);
    all &= report(3, secs(5), criterion_3);
    all &= report(4, secs(1), criterion_4);

    let table = table_state();
    let data = sample_counts(&table, TABLE_EVENTS, 7)
        .unwrap()
        .to_distribution()
        .unwrap();
    all &= report(5, secs(600), || criterion_5(&data));
    all &= report(6, secs(900), || criterion_6(&table));
    all &= report(7, secs(900), || criterion_7(&table));
    all &= report(8, secs(60), criterion_8);
    all &= report(9, secs(300), criterion_9);
    all &= report(10, secs(600), criterion_10);
    all &= report(11, secs(600), criterion_11);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
