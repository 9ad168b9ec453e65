//! Subcommand definitions and their implementations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use squeezelab::channels::{apply_loss, invert_loss};
use squeezelab::inference::fit::{fit_model, FitOptions};
use squeezelab::inference::sampling::stream_rng;
use squeezelab::inference::{
    fit_pump_curve, klyshko_efficiency, mc_g_surface, mc_std, sample_counts, Statistic,
};
use squeezelab::io::{
    read_jpnd, read_traces, write_counts, write_distribution, write_g_surface, write_json,
    write_traces, TraceSidecar,
};
use squeezelab::statistics::{g_surface, herald, nonclassicality_matrix, parity};
use squeezelab::tes::{
    calibrate_standard, calibrate_templates, synth_trace_with, CalibrationRun, TemplateSet,
    TraceModel,
};
use squeezelab::{compose_state, required_dim, Arm, Error, JointDist, ModelParams, Result, Truncation};

#[derive(Parser, Debug)]
#[command(
    name = "squeezelab",
    version,
    about = "Photon-number statistics of two-mode squeezed light"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the model state, apply loss and optionally sample a histogram.
    Simulate(SimulateArgs),
    /// Compute statistics of a jpnd-v1 file.
    Analyze(AnalyzeArgs),
    /// Fit the eight-parameter loss model to a histogram.
    Fit(FitArgs),
    /// Invert detector loss on a small photon-number grid.
    Invert(InvertArgs),
    /// Estimate detection efficiencies from twin-beam correlations.
    Klyshko(FileArg),
    /// Fit mean photon number against pump power.
    PumpFit(FileArg),
    /// Generate synthetic detector traces.
    TesSynth(TesSynthArgs),
    /// Calibrate a template bank from Poissonian runs.
    TesCalibrate(TesCalibrateArgs),
    /// Assign photon numbers to traces.
    TesClassify(TesClassifyArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// JSON file with model parameters; flags below override its fields.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Mean PDC photon number per arm.
    #[arg(long)]
    n_pdc: Option<f64>,
    /// Effective Schmidt mode number.
    #[arg(long)]
    k: Option<f64>,
    /// Signal and idler efficiencies.
    #[arg(long, num_args = 2, value_names = ["ETA_S", "ETA_I"])]
    eta: Option<Vec<f64>>,
    /// Coherent background photons in signal and idler.
    #[arg(long, num_args = 2, value_names = ["N_S", "N_I"])]
    alpha: Option<Vec<f64>>,
    /// Thermal background photons in signal and idler.
    #[arg(long, num_args = 2, value_names = ["N_S", "N_I"])]
    thermal: Option<Vec<f64>>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelParams> {
        let mut p = match &self.params {
            Some(path) => read_json_file::<ModelParams>(path)?,
            None => {
                if self.n_pdc.is_none() {
                    return Err(Error::InvalidParameter(
                        "give --n-pdc or a --params file".into(),
                    ));
                }
                ModelParams::pdc(0.0, 1.0)
            }
        };
        if let Some(v) = self.n_pdc {
            p.n_pdc = v;
        }
        if let Some(v) = self.k {
            p.k = v;
        }
        if let Some(v) = &self.eta {
            (p.eta_s, p.eta_i) = (v[0], v[1]);
        }
        if let Some(v) = &self.alpha {
            (p.n_alpha_s, p.n_alpha_i) = (v[0], v[1]);
        }
        if let Some(v) = &self.thermal {
            (p.n_th_s, p.n_th_i) = (v[0], v[1]);
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Photon-number grid size; chosen from the tail tolerance if absent.
    #[arg(long)]
    dim: Option<usize>,
    /// Largest probability allowed outside the grid.
    #[arg(long, default_value_t = squeezelab::distributions::DEFAULT_TAIL_TOL)]
    tail_tol: f64,
    /// Detector range: keep photon numbers below these limits and
    /// renormalize.
    #[arg(long, num_args = 2, value_names = ["DIM_S", "DIM_I"])]
    window: Option<Vec<usize>>,
    /// Sample a histogram with this many events.
    #[arg(long)]
    events: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output jpnd-v1 file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Input jpnd-v1 file.
    file: PathBuf,
    /// Correlation surface g(m,n) for 1 <= m <= M, 1 <= n <= N.
    #[arg(long, num_args = 2, value_names = ["M", "N"])]
    g_surface: Option<Vec<usize>>,
    /// CSV file for the surface; without it the surface is part of the report.
    #[arg(long)]
    surface_out: Option<PathBuf>,
    /// Condition the other arm on this photon number.
    #[arg(long)]
    herald: Option<usize>,
    /// Arm carrying the herald.
    #[arg(long, default_value = "idler")]
    herald_arm: Arm,
    /// Heralded g2 and parity for every herald 1..=H.
    #[arg(long)]
    herald_curve: Option<usize>,
    /// Noise reduction factor.
    #[arg(long)]
    nrf: bool,
    /// Parity of both arms, and of the heralded arm with --herald.
    #[arg(long)]
    parity: bool,
    /// Moment matrix of this order and its smallest eigenvalue.
    #[arg(long)]
    ncmatrix: Option<usize>,
    /// Further named statistics, e.g. g3:signal, g:2,3, k:idler.
    #[arg(long = "stat")]
    stats: Vec<Statistic>,
    /// Monte-Carlo standard deviations from this many resamples.
    #[arg(long)]
    mc: Option<usize>,
    /// Events per resample; defaults to the file's event count.
    #[arg(long)]
    events: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Input jpnd-v1 histogram.
    file: PathBuf,
    /// `auto` for a moment-based start, or a JSON parameter file.
    #[arg(long, default_value = "auto")]
    init: String,
    #[arg(long, default_value_t = 16)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simplex diameter required for convergence.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Output file for the fitted state before loss.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = squeezelab::distributions::DEFAULT_TAIL_TOL)]
    tail_tol: f64,
}

#[derive(Args, Debug)]
struct InvertArgs {
    /// Input jpnd-v1 histogram.
    file: PathBuf,
    #[arg(long, num_args = 2, value_names = ["ETA_S", "ETA_I"], required = true)]
    eta: Vec<f64>,
    /// Size of the reconstructed grid.
    #[arg(long, default_value_t = squeezelab::channels::MAX_INVERSION_DIM)]
    dim_in: usize,
    /// Output jpnd-v1 file for the reconstructed state.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FileArg {
    /// Input file.
    file: PathBuf,
}

#[derive(Args, Debug)]
struct TraceModelArgs {
    /// JSON detector model; the reference design if absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Switch off detector noise.
    #[arg(long)]
    noiseless: bool,
}

impl TraceModelArgs {
    fn resolve(&self) -> Result<TraceModel> {
        let mut m = match &self.model {
            Some(path) => read_json_file::<TraceModel>(path)?,
            None => TraceModel::design(),
        };
        if self.noiseless {
            m = m.noiseless();
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Args, Debug)]
struct TesSynthArgs {
    #[command(flatten)]
    model: TraceModelArgs,
    /// Fixed photon number of every trace.
    #[arg(long, conflicts_with = "mean", required_unless_present = "mean")]
    photons: Option<usize>,
    /// Poissonian photon numbers with this mean.
    #[arg(long)]
    mean: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; metadata goes to the same path with a .json extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TesCalibrateArgs {
    #[command(flatten)]
    model: TraceModelArgs,
    /// Calibration run as MEAN=TRACES.csv; repeat in increasing order of
    /// mean. Without runs, the standard runs are simulated.
    #[arg(long = "run", value_parser = parse_run)]
    runs: Vec<(f64, PathBuf)>,
    /// Traces per simulated run.
    #[arg(long, default_value_t = squeezelab::tes::MIN_TRACES_PER_RUN)]
    traces_per_run: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON template bank.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TesClassifyArgs {
    /// Trace CSV file.
    traces: PathBuf,
    /// Template bank from tes-calibrate.
    #[arg(long)]
    templates: PathBuf,
    /// Factor applied to all templates.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Also classify with templates scaled by LO and HI.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    bounds: Option<Vec<f64>>,
    /// Output CSV with one row per trace.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_run(s: &str) -> std::result::Result<(f64, PathBuf), String> {
    let (mean, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected MEAN=FILE, got '{s}'"))?;
    let mean = mean
        .parse::<f64>()
        .map_err(|e| format!("bad mean '{mean}': {e}"))?;
    Ok((mean, PathBuf::from(path)))
}

/// Runs a command and returns its exit status.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Analyze(a) => analyze(&a),
        Command::Fit(a) => fit(&a),
        Command::Invert(a) => invert(&a),
        Command::Klyshko(a) => klyshko(&a.file),
        Command::PumpFit(a) => pump_fit(&a.file),
        Command::TesSynth(a) => tes_synth(&a),
        Command::TesCalibrate(a) => tes_calibrate(&a),
        Command::TesClassify(a) => tes_classify(&a),
    }
}

fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn read_joint(path: &Path) -> Result<JointDist> {
    read_jpnd(BufReader::new(File::open(path)?))?.into_distribution()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    write_json(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn print<T: Serialize + ?Sized>(value: &T) -> Result<()> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    write_json(&mut lock, value)?;
    lock.flush()?;
    Ok(())
}

fn path_value(p: Option<&PathBuf>) -> Value {
    p.map_or(Value::Null, |p| Value::String(p.display().to_string()))
}

fn ok_or_null(r: Result<f64>) -> Value {
    r.map_or(Value::Null, |v| json!(v))
}

fn simulate(a: &SimulateArgs) -> Result<u8> {
    let params = a.model.resolve()?;
    let dim = match a.dim {
        Some(d) => d,
        None => required_dim(&params, a.tail_tol)?,
    };
    let state = compose_state::<f64>(&params, Truncation::new(dim).with_tail_tol(a.tail_tol))?;
    let mut out = apply_loss(&state, params.eta_s, params.eta_i)?;
    if let Some(w) = &a.window {
        out = out.window(w[0], w[1])?;
    }
    let data = match a.events {
        Some(n) => {
            let counts = sample_counts(&out, n, a.seed)?;
            if let Some(path) = &a.out {
                let mut w = create(path)?;
                write_counts(&mut w, &counts)?;
                w.flush()?;
            }
            counts.to_distribution()?
        }
        None => {
            if let Some(path) = &a.out {
                let mut w = create(path)?;
                write_distribution(&mut w, &out)?;
                w.flush()?;
            }
            out
        }
    };
    let stat = |s: Statistic| ok_or_null(s.evaluate(&data));
    print(&json!({
        "params": params,
        "dims": [data.dims().0, data.dims().1],
        "truncated_mass": data.truncated_mass(),
        "n_events": data.n_events(),
        "seed": a.seed,
        "mean": [data.mean(Arm::Signal), data.mean(Arm::Idler)],
        "g2": [
            stat(Statistic::Gn { arm: Arm::Signal, order: 2 }),
            stat(Statistic::Gn { arm: Arm::Idler, order: 2 }),
        ],
        "nrf": stat(Statistic::Nrf),
        "k": [
            stat(Statistic::EffectiveModeNumber(Arm::Signal)),
            stat(Statistic::EffectiveModeNumber(Arm::Idler)),
        ],
        "output": path_value(a.out.as_ref()),
    }))?;
    Ok(0)
}

struct McConfig {
    trials: usize,
    n_events: u64,
    seed: u64,
}

fn mc_config(a: &AnalyzeArgs, data: &JointDist) -> Result<Option<McConfig>> {
    let Some(trials) = a.mc else { return Ok(None) };
    let n_events = a.events.or(data.n_events()).ok_or_else(|| {
        Error::InvalidParameter("--mc needs an event count: use --events or a histogram".into())
    })?;
    Ok(Some(McConfig {
        trials,
        n_events,
        seed: a.seed,
    }))
}

fn scalar_entry(data: &JointDist, s: Statistic, mc: Option<&McConfig>) -> Result<Value> {
    let value = s.evaluate(data)?;
    let std = match mc {
        Some(c) => json!(mc_std(data, c.n_events, c.trials, s, c.seed)?.std),
        None => Value::Null,
    };
    Ok(json!({ "statistic": s.to_string(), "value": value, "mc_std": std }))
}

fn analyze(a: &AnalyzeArgs) -> Result<u8> {
    let data = read_joint(&a.file)?;
    let mc = mc_config(a, &data)?;
    let mut report = serde_json::Map::new();
    report.insert("file".into(), json!(a.file.display().to_string()));
    report.insert("dims".into(), json!([data.dims().0, data.dims().1]));
    report.insert("n_events".into(), json!(data.n_events()));
    report.insert("truncated_mass".into(), json!(data.truncated_mass()));
    report.insert("mean".into(), json!([data.mean(Arm::Signal), data.mean(Arm::Idler)]));
    report.insert(
        "g2".into(),
        json!([
            ok_or_null(Statistic::Gn { arm: Arm::Signal, order: 2 }.evaluate(&data)),
            ok_or_null(Statistic::Gn { arm: Arm::Idler, order: 2 }.evaluate(&data)),
        ]),
    );

    let mut scalars: Vec<Statistic> = Vec::new();
    if a.nrf {
        scalars.push(Statistic::Nrf);
    }
    if a.parity {
        scalars.push(Statistic::Parity(Arm::Signal));
        scalars.push(Statistic::Parity(Arm::Idler));
    }
    if let Some(h) = a.herald {
        scalars.push(Statistic::HeraldedG2 { herald: a.herald_arm, h });
        if a.parity {
            scalars.push(Statistic::HeraldedParity { herald: a.herald_arm, h });
        }
    }
    scalars.extend(a.stats.iter().copied());
    let entries = scalars
        .iter()
        .map(|&s| scalar_entry(&data, s, mc.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    report.insert("statistics".into(), Value::Array(entries));

    if let Some(h) = a.herald {
        let (cond, prob) = herald(&data, a.herald_arm, h)?;
        report.insert(
            "herald".into(),
            json!({
                "arm": a.herald_arm,
                "h": h,
                "probability": prob,
                "distribution": cond.probs(),
                "parity": parity(&cond),
            }),
        );
    }

    if let Some(hmax) = a.herald_curve {
        let mut curve = Vec::with_capacity(hmax);
        for h in 1..=hmax {
            let (cond, prob) = herald(&data, a.herald_arm, h)?;
            let g2 = Statistic::HeraldedG2 { herald: a.herald_arm, h };
            let par = Statistic::HeraldedParity { herald: a.herald_arm, h };
            let (g2_std, par_std) = match &mc {
                Some(c) => (
                    json!(mc_std(&data, c.n_events, c.trials, g2, c.seed)?.std),
                    json!(mc_std(&data, c.n_events, c.trials, par, c.seed)?.std),
                ),
                None => (Value::Null, Value::Null),
            };
            curve.push(json!({
                "h": h,
                "probability": prob,
                "g2": squeezelab::statistics::g2(&cond)?,
                "g2_mc_std": g2_std,
                "parity": parity(&cond),
                "parity_mc_std": par_std,
            }));
        }
        report.insert("herald_curve".into(), Value::Array(curve));
    }

    if let Some(order) = a.ncmatrix {
        let mm = nonclassicality_matrix(&data, order)?;
        let std = match &mc {
            Some(c) => Some(
                mc_std(&data, c.n_events, c.trials, Statistic::MinEigenvalue { order }, c.seed)?.std,
            ),
            None => None,
        };
        report.insert(
            "ncmatrix".into(),
            json!({
                "order": order,
                "basis": mm.basis,
                "entries": mm.entries,
                "min_eigenvalue": mm.min_eigenvalue,
                "mc_std": std,
                "significance": std.map(|s| -mm.min_eigenvalue / s),
            }),
        );
    }

    if let Some(g) = &a.g_surface {
        let (max_m, max_n) = (g[0], g[1]);
        let surface = g_surface(&data, max_m, max_n)?;
        let std = match &mc {
            Some(c) => Some(mc_g_surface(&data, c.n_events, c.trials, max_m, max_n, c.seed)?.std),
            None => None,
        };
        let entry = match &a.surface_out {
            Some(path) => {
                let mut w = create(path)?;
                write_g_surface(&mut w, max_m, max_n, &surface.values, std.as_deref())?;
                w.flush()?;
                json!({ "max_m": max_m, "max_n": max_n, "csv": path.display().to_string() })
            }
            None => json!({
                "max_m": max_m,
                "max_n": max_n,
                "values": surface.values,
                "mc_std": std,
            }),
        };
        report.insert("g_surface".into(), entry);
    }

    if let Some(c) = &mc {
        report.insert(
            "monte_carlo".into(),
            json!({ "trials": c.trials, "n_events": c.n_events, "seed": c.seed }),
        );
    }
    print(&Value::Object(report))?;
    Ok(0)
}

fn fit(a: &FitArgs) -> Result<u8> {
    let data = read_joint(&a.file)?;
    let init = match a.init.as_str() {
        "auto" => None,
        path => Some(read_json_file::<ModelParams>(Path::new(path))?),
    };
    let options = FitOptions {
        starts: a.starts,
        seed: a.seed,
        tol: a.tol,
        ..FitOptions::default()
    };
    let result = fit_model(&data, init, &options)?;
    if let Some(path) = &a.out {
        let p = result.params;
        let dim = required_dim(&p, a.tail_tol)?;
        let state = compose_state::<f64>(&p, Truncation::new(dim).with_tail_tol(a.tail_tol))?;
        let mut w = create(path)?;
        write_distribution(&mut w, &state)?;
        w.flush()?;
    }
    let table: Vec<Value> = ModelParams::NAMES
        .iter()
        .zip(result.params.to_array())
        .map(|(name, value)| json!({ "parameter": name, "value": value }))
        .collect();
    print(&json!({
        "fit": result,
        "table": table,
        "state_file": path_value(a.out.as_ref()),
    }))?;
    Ok(if result.converged { 0 } else { 3 })
}

fn invert(a: &InvertArgs) -> Result<u8> {
    let data = read_joint(&a.file)?;
    let inv = invert_loss(&data, a.eta[0], a.eta[1], a.dim_in)?;
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        write_distribution(&mut w, &inv.state)?;
        w.flush()?;
    }
    let d = a.dim_in;
    let diagonal: Vec<f64> = (0..d).map(|n| inv.state.get(n, n)).collect();
    let off: f64 = 1.0 - diagonal.iter().sum::<f64>();
    print(&json!({
        "dim_in": d,
        "residual": inv.residual,
        "iterations": inv.iterations,
        "off_diagonal_mass": off.max(0.0),
        "diagonal": diagonal,
        "output": path_value(a.out.as_ref()),
    }))?;
    Ok(0)
}

fn klyshko(file: &Path) -> Result<u8> {
    let data = read_joint(file)?;
    print(&klyshko_efficiency(&data)?)?;
    Ok(0)
}

#[derive(Deserialize)]
struct PumpPoint {
    power: f64,
    mean_photons: f64,
}

fn pump_fit(file: &Path) -> Result<u8> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(file)?));
    let points = r
        .deserialize::<PumpPoint>()
        .map(|row| row.map(|p| (p.power, p.mean_photons)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let fit = fit_pump_curve(&points)?;
    let p_max = points.iter().map(|p| p.0).fold(0.0, f64::max);
    let r_max = fit.alpha * p_max.sqrt();
    print(&json!({
        "alpha": fit.alpha,
        "ssq": fit.ssq,
        "points": points.len(),
        "r_at_max_power": r_max,
        "mean_at_max_power": r_max.sinh().powi(2),
    }))?;
    Ok(0)
}

fn sidecar_path(traces: &Path) -> PathBuf {
    traces.with_extension("json")
}

fn tes_synth(a: &TesSynthArgs) -> Result<u8> {
    use photon_source::PoissonDraw;
    let model = a.model.resolve()?;
    let draw = match (a.photons, a.mean) {
        (Some(n), _) => PoissonDraw::Fixed(n),
        (None, Some(mu)) => PoissonDraw::new(mu)?,
        (None, None) => unreachable!("clap requires one of --photons and --mean"),
    };
    let mut photons = Vec::with_capacity(a.count);
    let mut traces = Vec::with_capacity(a.count);
    for t in 0..a.count {
        let mut rng = stream_rng(a.seed, t as u64);
        let n = draw.sample(&mut rng);
        photons.push(n);
        traces.push(synth_trace_with(n, &model, &mut rng)?);
    }
    let mut w = create(&a.out)?;
    write_traces(&mut w, &traces)?;
    w.flush()?;
    let sidecar = sidecar_path(&a.out);
    write_json_file(
        &sidecar,
        &TraceSidecar {
            dt: model.dt,
            samples: model.samples,
            model,
            seed: a.seed,
            photons: Some(photons),
        },
    )?;
    print(&json!({
        "count": a.count,
        "output": a.out.display().to_string(),
        "sidecar": sidecar.display().to_string(),
    }))?;
    Ok(0)
}

/// Photon-number source for synthetic traces.
mod photon_source {
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};
    use squeezelab::{Error, Result};

    pub enum PoissonDraw {
        Fixed(usize),
        Poisson(Poisson<f64>),
    }

    impl PoissonDraw {
        pub fn new(mean: f64) -> Result<Self> {
            if mean == 0.0 {
                return Ok(PoissonDraw::Fixed(0));
            }
            Poisson::new(mean)
                .map(PoissonDraw::Poisson)
                .map_err(|e| Error::InvalidParameter(format!("mean {mean}: {e}")))
        }

        pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
            match self {
                PoissonDraw::Fixed(n) => *n,
                PoissonDraw::Poisson(p) => p.sample(rng) as usize,
            }
        }
    }
}

fn tes_calibrate(a: &TesCalibrateArgs) -> Result<u8> {
    let model = a.model.resolve()?;
    let bank = if a.runs.is_empty() {
        calibrate_standard(&model, a.traces_per_run, a.seed)?
    } else {
        let runs = a
            .runs
            .iter()
            .map(|(mean, path)| {
                let (_, traces) = read_traces(BufReader::new(File::open(path)?))?;
                Ok(CalibrationRun {
                    mean_photons: *mean,
                    traces,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        calibrate_templates(&runs, model.dt)?
    };
    write_json_file(&a.out, &bank)?;
    let windows: Vec<[f64; 2]> = bank
        .templates
        .iter()
        .map(|t| {
            let (lo, hi) = t.window();
            [lo, hi]
        })
        .collect();
    print(&json!({
        "templates": bank.templates.len(),
        "means": bank.templates.iter().map(|t| t.mean_photons).collect::<Vec<_>>(),
        "windows": windows,
        "seed": a.seed,
        "output": a.out.display().to_string(),
    }))?;
    Ok(0)
}

#[derive(Default)]
struct ClassSummary {
    out_of_range: usize,
    histogram: Vec<u64>,
    correct: usize,
    labelled: usize,
    bias_sum: f64,
}

fn summarize(results: &[Result<squeezelab::tes::Classification>], truth: Option<&[usize]>) -> Value {
    let mut s = ClassSummary::default();
    let mut photon_sum = 0.0;
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(c) => {
                if s.histogram.len() <= c.photons {
                    s.histogram.resize(c.photons + 1, 0);
                }
                s.histogram[c.photons] += 1;
                photon_sum += c.photons as f64;
                if let Some(t) = truth.and_then(|t| t.get(i)) {
                    s.labelled += 1;
                    s.correct += usize::from(c.photons == *t);
                    s.bias_sum += c.photons as f64 - *t as f64;
                }
            }
            Err(_) => s.out_of_range += 1,
        }
    }
    let classified = results.len() - s.out_of_range;
    let mean = (classified > 0).then(|| photon_sum / classified as f64);
    let (accuracy, bias) = if s.labelled > 0 {
        (
            Some(s.correct as f64 / s.labelled as f64),
            Some(s.bias_sum / s.labelled as f64),
        )
    } else {
        (None, None)
    };
    json!({
        "classified": classified,
        "out_of_range": s.out_of_range,
        "mean_photons": mean,
        "histogram": s.histogram,
        "accuracy": accuracy,
        "bias": bias,
    })
}

fn tes_classify(a: &TesClassifyArgs) -> Result<u8> {
    let (ids, traces) = read_traces(BufReader::new(File::open(&a.traces)?))?;
    let bank: TemplateSet = read_json_file(&a.templates)?;
    let bank = bank.rescaled(a.scale)?;
    let sidecar = sidecar_path(&a.traces);
    let truth = if sidecar.exists() {
        read_json_file::<TraceSidecar>(&sidecar)?.photons
    } else {
        None
    };
    let nominal = bank.classify_all(&traces);
    let bounds = match &a.bounds {
        Some(b) => {
            let (lo, hi) = squeezelab::tes::systematic_bounds(&bank, b[0], b[1])?;
            Some((lo.classify_all(&traces), hi.classify_all(&traces)))
        }
        None => None,
    };

    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_writer(create(path)?);
        let mut header = vec!["id", "photons", "estimate", "template"];
        if bounds.is_some() {
            header.extend(["photons_lo", "photons_hi"]);
        }
        w.write_record(&header)?;
        let photons = |r: &Result<squeezelab::tes::Classification>| {
            r.as_ref().map_or(String::new(), |c| c.photons.to_string())
        };
        for (i, r) in nominal.iter().enumerate() {
            let (estimate, template) = match r {
                Ok(c) => (c.estimate, c.template.to_string()),
                Err(Error::OutOfRange { nearest_estimate }) => (*nearest_estimate, String::new()),
                Err(e) => return Err(Error::InvalidData(e.to_string())),
            };
            let mut rec = vec![ids[i].clone(), photons(r), squeezelab::io::format_f64(estimate), template];
            if let Some((lo, hi)) = &bounds {
                rec.push(photons(&lo[i]));
                rec.push(photons(&hi[i]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }

    let mut report = json!({
        "count": traces.len(),
        "scale": a.scale,
        "nominal": summarize(&nominal, truth.as_deref()),
        "output": path_value(a.out.as_ref()),
    });
    if let (Some((lo, hi)), Some(b)) = (&bounds, &a.bounds) {
        report["bounds"] = json!({
            "scales": b,
            "lo": summarize(lo, truth.as_deref()),
            "hi": summarize(hi, truth.as_deref()),
        });
    }
    print(&report)?;
    Ok(0)
}
