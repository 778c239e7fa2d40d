//! `dtlearn` command-line driver. Every run takes one JSON config document,
//! echoes the resolved config into the output directory, and writes results
//! as JSON/CSV with a format_version field. Exit codes: 0 success/converged,
//! 1 not-converged, 2 validation error, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use dtlearn::bench::{
    measure_recovery, pareto_front_indices, ratio_report, read_samples_csv, roofline_sweep,
    write_samples_csv, Objective, PlatformSample, RooflineSpec, SampleField,
};
use dtlearn::dynamics::{
    build_library, simulate, CoefficientVector, InputSignal, Model, ModelTag,
};
use dtlearn::hlscost::{min_feasible_ii, probe_table, LoopSpec, PartitionSpec};
use dtlearn::neuralflow::{gradient_check, GradCheckReport};
use dtlearn::recovery::{recover, recover_with_progress, RecoveryConfig, RecoveryReport};
use dtlearn::signal::{corrupt, mask_hidden, NoiseSpec, Trajectory};
use dtlearn::{Error, FORMAT_VERSION};

#[derive(Parser)]
#[command(name = "dtlearn", version, about = "Digital-twin model recovery toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config document for the run
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the seed field(s) in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Integrate a model forward and write a trajectory CSV
    Simulate,
    /// Fit flow weights and sparse coefficients to a trajectory
    Recover,
    /// Run recovery under the measurement harness and compare platforms
    Bench,
    /// Attainable-performance sweep for a peak/bandwidth spec
    Roofline,
    /// Non-dominated subset of a platform-sample table
    Pareto,
    /// Finite-difference audit of the analytic gradients
    Gradcheck,
    /// Initiation-interval feasibility table for a pipelined loop
    Hlscost,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::Domain(_)
        | Error::Index(_)
        | Error::Parse { .. }
        | Error::Schema(_)
        | Error::Json(_)
        | Error::Csv(_) => 2,
        Error::MeasuredFailure { source, .. } => exit_code_for(source),
        _ => 3,
    }
}

fn run(cli: &Cli) -> dtlearn::Result<u8> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--config is required".into()))?;
    let out = cli
        .out
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
    let raw = fs::read_to_string(config_path)?;
    fs::create_dir_all(out)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&raw, out, cli),
        Command::Recover => cmd_recover(&raw, out, cli),
        Command::Bench => cmd_bench(&raw, out, cli),
        Command::Roofline => cmd_roofline(&raw, out, cli),
        Command::Pareto => cmd_pareto(&raw, out, cli),
        Command::Gradcheck => cmd_gradcheck(&raw, out, cli),
        Command::Hlscost => cmd_hlscost(&raw, out, cli),
    }
}

fn parse_config<T: for<'de> Deserialize<'de>>(raw: &str) -> dtlearn::Result<T> {
    serde_json::from_str(raw).map_err(|e| Error::Schema(format!("config: {e}")))
}

/// Every command writes its resolved config next to its results.
fn echo_config<T: Serialize>(out: &Path, command: &str, config: &T) -> dtlearn::Result<()> {
    let doc = json!({
        "format_version": FORMAT_VERSION,
        "command": command,
        "config": config,
    });
    write_json(&out.join("config.json"), &doc)
}

fn write_json(path: &Path, value: &serde_json::Value) -> dtlearn::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// model/theta config shared by simulate, recover, bench

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
enum ModelSpec {
    Bergman,
    Ecgsyn,
    Library {
        state_dim: usize,
        input_dim: usize,
        order: u32,
    },
}

impl ModelSpec {
    fn build(&self) -> dtlearn::Result<Model> {
        match self {
            ModelSpec::Bergman => Ok(Model::Bergman),
            ModelSpec::Ecgsyn => Ok(Model::Ecgsyn),
            ModelSpec::Library {
                state_dim,
                input_dim,
                order,
            } => Ok(Model::Library(build_library(*state_dim, *input_dim, *order)?)),
        }
    }

    fn tag(&self) -> ModelTag {
        match self {
            ModelSpec::Bergman => ModelTag::Bergman,
            ModelSpec::Ecgsyn => ModelTag::Ecgsyn,
            ModelSpec::Library { .. } => ModelTag::Library,
        }
    }

    /// Full coefficient length when no explicit term_ids are given.
    fn full_theta_len(&self, model: &Model) -> usize {
        match (self, model) {
            (ModelSpec::Bergman, _) => 6,
            (ModelSpec::Ecgsyn, _) => 15,
            (ModelSpec::Library { state_dim, .. }, Model::Library(lib)) => {
                state_dim * lib.num_terms()
            }
            _ => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaSpec {
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    term_ids: Option<Vec<usize>>,
}

impl ThetaSpec {
    fn build(&self, tag: ModelTag) -> dtlearn::Result<CoefficientVector> {
        let ids = match &self.term_ids {
            Some(ids) => ids.clone(),
            None => (0..self.values.len()).collect(),
        };
        CoefficientVector::new(self.values.clone(), ids, tag)
    }
}

fn zero_theta(spec: &ModelSpec, model: &Model) -> dtlearn::Result<CoefficientVector> {
    let len = spec.full_theta_len(model);
    CoefficientVector::new(vec![0.0; len], (0..len).collect(), spec.tag())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    model: ModelSpec,
    theta: ThetaSpec,
    x0: Vec<f64>,
    horizon: f64,
    n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    substeps: Option<usize>,
    /// Input channels; defaults to no inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inputs: Option<InputSignal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise: Option<NoiseSpec>,
    /// Channels to keep observable; hidden ones are zeroed out of the CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    observable: Option<Vec<bool>>,
    #[serde(default)]
    seed: u64,
}

fn cmd_simulate(raw: &str, out: &Path, cli: &Cli) -> dtlearn::Result<u8> {
    let mut cfg: SimulateConfig = parse_config(raw)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        if let Some(n) = &mut cfg.noise {
            n.seed = seed;
        }
    }
    echo_config(out, "simulate", &cfg)?;
    let model = cfg.model.build()?;
    let theta = cfg.theta.build(cfg.model.tag())?;
    let input = cfg.inputs.clone().unwrap_or_else(InputSignal::empty);
    let substeps = cfg.substeps.unwrap_or(dtlearn::dynamics::DEFAULT_SUBSTEPS);
    if cli.verbose {
        eprintln!(
            "simulate: {} states, {} samples over {}",
            model.state_dim(),
            cfg.n_samples,
            cfg.horizon
        );
    }
    let mut traj = simulate(
        &model,
        &theta,
        &input,
        &cfg.x0,
        cfg.horizon,
        cfg.n_samples,
        substeps,
    )?;
    if let Some(noise) = &cfg.noise {
        traj = corrupt(&traj, noise)?;
    }
    if let Some(observable) = &cfg.observable {
        traj = mask_hidden(&traj, observable)?;
    }
    traj.write_csv_path(&out.join("trajectory.csv"))?;
    write_json(
        &out.join("metadata.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "n_samples": traj.len(),
            "state_dim": traj.state_dim(),
            "input_dim": traj.input_dim(),
            "mask": traj.mask,
            "horizon": cfg.horizon,
            "seed": cfg.seed,
        }),
    )?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// recover

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecoverConfig {
    model: ModelSpec,
    trajectory: PathBuf,
    /// Defaults to all-zero coefficients (sparsity-friendly start).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta_init: Option<ThetaSpec>,
    recovery: RecoveryConfig,
}

fn run_recovery(cfg: &RecoverConfig, verbose: bool) -> dtlearn::Result<RecoveryReport> {
    let traj = Trajectory::read_csv_path(&cfg.trajectory)?;
    let model = cfg.model.build()?;
    let theta0 = match &cfg.theta_init {
        Some(spec) => spec.build(cfg.model.tag())?,
        None => zero_theta(&cfg.model, &model)?,
    };
    if verbose {
        eprintln!(
            "recover: {} samples, {} coefficients, {} epochs",
            traj.len(),
            theta0.len(),
            cfg.recovery.epochs
        );
        // progress flows over a channel to a printer thread, no shared state
        let (tx, rx) = std::sync::mpsc::channel::<dtlearn::recovery::Progress>();
        let printer = std::thread::spawn(move || {
            for p in rx {
                if p.epoch % 1000 == 0 {
                    eprintln!(
                        "{:?} epoch {}: total {:.6} recon {:.6} physics {:.6}",
                        p.phase, p.epoch, p.loss.total, p.loss.recon, p.loss.physics
                    );
                }
            }
        });
        let result = recover_with_progress(&traj, &model, &theta0, &cfg.recovery, Some(&tx));
        drop(tx);
        let _ = printer.join();
        result
    } else {
        recover(&traj, &model, &theta0, &cfg.recovery)
    }
}

fn write_recovery_outputs(
    out: &Path,
    cfg: &RecoverConfig,
    report: &RecoveryReport,
) -> dtlearn::Result<()> {
    write_json(
        &out.join("report.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "report": report,
        }),
    )?;
    let mut csv = Vec::new();
    report.write_loss_csv(&mut csv)?;
    fs::write(out.join("loss_history.csv"), csv)?;
    write_json(
        &out.join("theta_recovered.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "model": cfg.model,
            "theta": {
                "values": report.theta_recovered.values,
                "term_ids": report.theta_recovered.term_ids,
            },
        }),
    )?;
    Ok(())
}

fn cmd_recover(raw: &str, out: &Path, cli: &Cli) -> dtlearn::Result<u8> {
    let mut cfg: RecoverConfig = parse_config(raw)?;
    if let Some(seed) = cli.seed {
        cfg.recovery.seed = seed;
    }
    echo_config(out, "recover", &cfg)?;
    match run_recovery(&cfg, cli.verbose) {
        Ok(report) => {
            write_recovery_outputs(out, &cfg, &report)?;
            Ok(if report.converged { 0 } else { 1 })
        }
        Err(e @ Error::TrainingDiverged { .. }) => {
            // leave a machine-readable trace of the failed run
            write_json(
                &out.join("error.json"),
                &json!({
                    "format_version": FORMAT_VERSION,
                    "error": e.to_string(),
                }),
            )?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// bench

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchConfig {
    /// Label for the locally measured sample.
    label: String,
    recover: RecoverConfig,
    /// Published platform table to compare against (samples CSV).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_samples: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    baseline_label: Option<String>,
}

fn cmd_bench(raw: &str, out: &Path, cli: &Cli) -> dtlearn::Result<u8> {
    let mut cfg: BenchConfig = parse_config(raw)?;
    if let Some(seed) = cli.seed {
        cfg.recover.recovery.seed = seed;
    }
    echo_config(out, "bench", &cfg)?;
    let verbose = cli.verbose;
    let recover_cfg = cfg.recover.clone();
    let (report, measurement) = measure_recovery(|| run_recovery(&recover_cfg, verbose))?;
    write_recovery_outputs(out, &cfg.recover, &report)?;

    let local = PlatformSample {
        label: cfg.label.clone(),
        runtime_s: measurement.runtime_s,
        avg_power_w: None,
        dram_mb: measurement.peak_memory_bytes as f64 / (1024.0 * 1024.0),
        error: Some(report.reconstruction_error),
        freq_mhz: None,
        flops: None,
        bytes_moved: None,
    };
    let mut samples = match &cfg.reference_samples {
        Some(p) => read_samples_csv(fs::File::open(p)?)?,
        None => Vec::new(),
    };
    samples.push(local);
    let mut csv = Vec::new();
    write_samples_csv(&samples, &mut csv)?;
    fs::write(out.join("samples.csv"), csv)?;

    if let Some(baseline) = &cfg.baseline_label {
        let ratios = ratio_report(&samples, baseline)?;
        write_json(
            &out.join("ratio_report.json"),
            &json!({
                "format_version": FORMAT_VERSION,
                "ratios": ratios,
            }),
        )?;
    }
    // runtime/footprint front over fields every row carries
    let objectives = vec![
        Objective::minimize(SampleField::RuntimeS),
        Objective::minimize(SampleField::DramMb),
    ];
    let front = pareto_front_indices(&samples, &objectives)?;
    let labels: Vec<&str> = front.iter().map(|&i| samples[i].label.as_str()).collect();
    write_json(
        &out.join("pareto.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "objectives": objectives,
            "front": labels,
        }),
    )?;
    Ok(if report.converged { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// roofline

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RooflineConfig {
    peak_gflops: f64,
    bandwidth_gbs: f64,
    #[serde(default = "default_oi_min")]
    oi_min: f64,
    #[serde(default = "default_oi_max")]
    oi_max: f64,
    #[serde(default = "default_oi_points")]
    n_points: usize,
}

fn default_oi_min() -> f64 {
    0.01
}
fn default_oi_max() -> f64 {
    100.0
}
fn default_oi_points() -> usize {
    64
}

fn cmd_roofline(raw: &str, out: &Path, cli: &Cli) -> dtlearn::Result<u8> {
    let cfg: RooflineConfig = parse_config(raw)?;
    echo_config(out, "roofline", &cfg)?;
    let spec = RooflineSpec {
        peak_gflops: cfg.peak_gflops,
        bandwidth_gbs: cfg.bandwidth_gbs,
    };
    let pts = roofline_sweep(&spec, cfg.oi_min, cfg.oi_max, cfg.n_points)?;
    let mut csv = String::from("oi,attainable_gflops\n");
    for (oi, a) in &pts {
        csv.push_str(&format!("{oi},{a}\n"));
    }
    fs::write(out.join("roofline.csv"), csv)?;
    write_json(
        &out.join("roofline.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "spec": spec,
            "ridge_oi": spec.ridge(),
        }),
    )?;
    if cli.verbose {
        eprintln!("roofline: ridge at oi = {}", spec.ridge());
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// pareto

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParetoConfig {
    samples: PathBuf,
    objectives: Vec<Objective>,
}

fn cmd_pareto(raw: &str, out: &Path, _cli: &Cli) -> dtlearn::Result<u8> {
    let cfg: ParetoConfig = parse_config(raw)?;
    echo_config(out, "pareto", &cfg)?;
    let samples = read_samples_csv(fs::File::open(&cfg.samples)?)?;
    let front = pareto_front_indices(&samples, &cfg.objectives)?;
    let labels: Vec<&str> = front.iter().map(|&i| samples[i].label.as_str()).collect();
    write_json(
        &out.join("pareto.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "objectives": cfg.objectives,
            "front": labels,
        }),
    )?;
    let kept: Vec<PlatformSample> = front.iter().map(|&i| samples[i].clone()).collect();
    let mut csv = Vec::new();
    write_samples_csv(&kept, &mut csv)?;
    fs::write(out.join("pareto.csv"), csv)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckConfig {
    #[serde(default = "default_gc_hidden")]
    hidden_dim: usize,
    #[serde(default = "default_gc_state")]
    state_dim: usize,
    #[serde(default = "default_gc_input")]
    input_dim: usize,
    #[serde(default = "default_gc_samples")]
    n_samples: usize,
    #[serde(default = "default_gc_coords")]
    n_coords: usize,
    #[serde(default = "default_gc_seeds")]
    seeds: Vec<u64>,
}

fn default_gc_hidden() -> usize {
    4
}
fn default_gc_state() -> usize {
    2
}
fn default_gc_input() -> usize {
    1
}
fn default_gc_samples() -> usize {
    8
}
fn default_gc_coords() -> usize {
    100
}
fn default_gc_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn cmd_gradcheck(raw: &str, out: &Path, cli: &Cli) -> dtlearn::Result<u8> {
    let mut cfg: GradcheckConfig = parse_config(raw)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    // FD probing is O(coords · samples · hidden²); keep instances small
    if cfg.hidden_dim > 64 || cfg.state_dim > 16 || cfg.input_dim > 16 || cfg.n_samples > 256 {
        return Err(Error::InvalidArgument(
            "gradcheck dims too large (hidden <= 64, state/input <= 16, samples <= 256)".into(),
        ));
    }
    echo_config(out, "gradcheck", &cfg)?;
    let mut reports: Vec<(u64, GradCheckReport)> = Vec::new();
    for &seed in &cfg.seeds {
        let r = gradient_check(
            cfg.hidden_dim,
            cfg.state_dim,
            cfg.input_dim,
            cfg.n_samples,
            seed,
            cfg.n_coords,
            false,
        )?;
        if cli.verbose {
            eprintln!(
                "gradcheck seed {seed}: max rel error {:.3e}",
                r.max_rel_error
            );
        }
        reports.push((seed, r));
    }
    let passed = reports.iter().all(|(_, r)| r.passed);
    let doc = json!({
        "format_version": FORMAT_VERSION,
        "passed": passed,
        "runs": reports
            .iter()
            .map(|(seed, r)| json!({ "seed": seed, "report": r }))
            .collect::<Vec<_>>(),
    });
    write_json(&out.join("gradcheck.json"), &doc)?;
    Ok(if passed { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// hlscost

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HlscostConfig {
    #[serde(rename = "loop")]
    loop_spec: LoopSpec,
    #[serde(default)]
    partition: PartitionSpec,
    #[serde(default = "default_clock_mhz")]
    clock_mhz: f64,
}

fn default_clock_mhz() -> f64 {
    173.0
}

fn cmd_hlscost(raw: &str, out: &Path, _cli: &Cli) -> dtlearn::Result<u8> {
    let cfg: HlscostConfig = parse_config(raw)?;
    echo_config(out, "hlscost", &cfg)?;
    let min_ii = min_feasible_ii(&cfg.loop_spec, &cfg.partition)?;
    let rows = probe_table(&cfg.loop_spec, &cfg.partition, cfg.clock_mhz)?;
    println!("II  feasible  violations  latency  iter/s");
    for r in &rows {
        let latency = r
            .latency_cycles
            .map_or_else(|| "-".to_string(), |l| l.to_string());
        let throughput = r
            .throughput_iters_per_s
            .map_or_else(|| "-".to_string(), |t| format!("{t:.3e}"));
        println!(
            "{:<3} {:<9} {:<11} {:<8} {}",
            r.ii,
            r.feasible,
            r.violations.len(),
            latency,
            throughput
        );
    }
    write_json(
        &out.join("hlscost.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "min_feasible_ii": min_ii,
            "rows": rows,
        }),
    )?;
    Ok(0)
}
