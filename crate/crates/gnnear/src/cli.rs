//! Command-line front end. Every command starts from one TOML experiment
//! description (or the built-in defaults) plus dotted-path overrides, so
//! a run is reproducible from its command line alone.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or I/O failure,
//! 3 validation mismatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::metrics::{reduction_saving, sweep_csv, SimReport, SweepRow, Verdict};
use crate::partition::{partition, write_placement};
use crate::sim::{simulate, verify_against_reference, FaultSpec, MachineConfig, SimConfig, SimOptions};
use crate::timing::render_cmd_trace;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gnnear",
    version,
    about = "Cycle-approximate simulator for DIMM-based near-memory GNN training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training epoch and render its report.
    Simulate(SimulateArgs),
    /// Run in checked mode and compare against the dense reference trainer.
    Validate(ValidateArgs),
    /// Re-run one epoch across values of one parameter; emit CSV.
    Sweep(SweepArgs),
    /// Print the storage layout a configuration produces.
    Partition(PartitionArgs),
    /// Inspect saved reports: summarize one, or compare against a baseline.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment description (TOML); built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key by dotted path, e.g. --set model.variant=gin.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Count traffic only; skip the DDR4 command engines.
    #[arg(long)]
    traffic: bool,
    /// Write the report here instead of the config's output.report/stdout.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Record and write the merged DDR command trace.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corrupt the layer-0 forward edge weights into this destination
    /// vertex, to demonstrate that the payload checker localizes faults.
    #[arg(long, value_name = "VERTEX")]
    inject_fault: Option<u32>,
    /// Weight scale applied by --inject-fault.
    #[arg(long, default_value_t = 1.5, value_name = "FACTOR")]
    fault_scale: f32,
    /// Worst tolerated relative deviation against the reference trainer.
    #[arg(long, default_value_t = 1e-4, value_name = "REL")]
    tolerance: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Swept knob: shard (RxC), window, lambda, or ranks.
    #[arg(long, value_name = "NAME")]
    param: String,
    /// Comma-separated values, e.g. 1x127,2x126 or 1,2,4,8.
    #[arg(long, value_name = "LIST")]
    values: String,
    /// Count traffic only (cycle column reads zero).
    #[arg(long)]
    traffic: bool,
    /// Write CSV here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Write the placement table here.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Rendered report to inspect.
    #[arg(long, value_name = "PATH")]
    path: PathBuf,
    /// Optional second report; prints the off-chip reduce-read saving of
    /// PATH relative to this baseline.
    #[arg(long, value_name = "PATH")]
    baseline: Option<PathBuf>,
}

/// Parse arguments and dispatch. Returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("gnnear: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Validate(a) => cmd_validate(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Partition(a) => cmd_partition(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

// ── Config plumbing ─────────────────────────────────────────────────────

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))
        })
        .collect()
}

fn load_run(cfg: &ConfigArgs) -> Result<RunConfig> {
    let ov = overrides(&cfg.set)?;
    match &cfg.config {
        Some(path) => RunConfig::load(path, &ov),
        None => RunConfig::from_toml_with_overrides("", &ov),
    }
}

fn sim_config(run: &RunConfig, opts: SimOptions) -> Result<SimConfig> {
    Ok(SimConfig {
        model: run.build_model()?,
        partition: run.partition_config(),
        shard: run.shard_config(),
        window: run.effective_window(),
        toggles: run.optimizations,
        machine: MachineConfig::default(),
        opts,
        feature_seed: run.seed,
    })
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            std::fs::write(p, text)?;
            eprintln!("wrote {}", p.display());
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ── Commands ────────────────────────────────────────────────────────────

fn cmd_simulate(a: SimulateArgs) -> Result<i32> {
    let run = load_run(&a.cfg)?;
    let g = run.build_graph()?;
    let trace_path = a.trace.clone().or_else(|| run.output.trace.clone());
    let opts = SimOptions {
        cycle: !a.traffic,
        record_commands: trace_path.is_some(),
        ..SimOptions::default()
    };
    if a.traffic && trace_path.is_some() {
        return Err(Error::Config("command traces need the cycle engines; drop --traffic".into()));
    }
    let cfg = sim_config(&run, opts)?;
    let out = simulate(&g, &cfg)?;
    let report_path = a.report.or_else(|| run.output.report.clone());
    write_or_print(report_path.as_deref(), &out.report.render())?;
    if let Some(p) = &trace_path {
        std::fs::write(p, render_cmd_trace(&out.commands))?;
        eprintln!("wrote {} ({} commands)", p.display(), out.commands.len());
    }
    if out.audit.violations > 0 {
        eprintln!("warning: {} partial readouts above the placement bound", out.audit.violations);
    }
    Ok(0)
}

fn cmd_validate(a: ValidateArgs) -> Result<i32> {
    let run = load_run(&a.cfg)?;
    let g = run.build_graph()?;
    let opts = SimOptions {
        cycle: true,
        check_payloads: true,
        fault: a.inject_fault.map(|vertex| {
            FaultSpec { vertex, scale: a.fault_scale }
        }),
        ..SimOptions::default()
    };
    if let Some(f) = &opts.fault {
        if f.vertex >= g.num_vertices {
            return Err(Error::Config(format!(
                "--inject-fault {} is out of range for {} vertices",
                f.vertex, g.num_vertices
            )));
        }
    }
    let cfg = sim_config(&run, opts)?;
    let (out, worst, at) = verify_against_reference(&g, &cfg)?;
    println!("epoch comparison: worst relative deviation {worst:.3e} at {at}");
    let mut failed = false;
    if worst > a.tolerance {
        println!("epoch comparison: FAIL (tolerance {:.1e})", a.tolerance);
        failed = true;
    }
    match &out.report.verdict {
        Verdict::Pass { max_rel } => {
            println!("payload check: PASS (max relative deviation {max_rel:.3e})");
        }
        Verdict::Fail { tensor, index, rel } => {
            println!("payload check: FAIL at {tensor}, {index} (relative deviation {rel:.3e})");
            failed = true;
        }
        Verdict::Skipped => println!("payload check: skipped"),
    }
    if failed {
        println!("validate: FAIL");
        Ok(3)
    } else {
        println!("validate: PASS");
        Ok(0)
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<i32> {
    let run = load_run(&a.cfg)?;
    let g = run.build_graph()?;
    let values: Vec<&str> = a.values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Config("--values must list at least one value".into()));
    }
    let opts = SimOptions {
        cycle: !a.traffic,
        check_payloads: false,
        ..SimOptions::default()
    };
    let rows: Result<Vec<SweepRow>> = values
        .par_iter()
        .map(|v| {
            let mut point = run.clone();
            apply_sweep_value(&mut point, &a.param, v)?;
            point.validate()?;
            let cfg = sim_config(&point, opts)?;
            let out = simulate(&g, &cfg)?;
            Ok(SweepRow {
                parameter: v.to_string(),
                cycles: out.makespan_ticks,
                off_chip_bytes: out.report.counters.off_chip_read_bytes
                    + out.report.counters.off_chip_write_bytes,
                energy_j: out.report.energy_active.total_j,
            })
        })
        .collect();
    let csv = sweep_csv(&rows?);
    write_or_print(a.out.as_deref(), &csv)?;
    Ok(0)
}

/// Set the swept knob on a copy of the run config. Toggles stay as
/// configured: sweeping window or lambda under a disabled toggle yields a
/// flat curve rather than silently flipping features on.
fn apply_sweep_value(run: &mut RunConfig, param: &str, value: &str) -> Result<()> {
    let int = |v: &str| -> Result<u32> {
        v.parse().map_err(|_| Error::Config(format!("bad {param} value {v:?}")))
    };
    match param {
        "shard" => {
            let (r, c) = value
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("shard values look like 2x126, got {value:?}")))?;
            run.shard.rows = int(r)?;
            run.shard.cols = int(c)?;
        }
        "window" => run.schedule.window = int(value)?,
        "lambda" => {
            run.partition.lambda = value
                .parse()
                .map_err(|_| Error::Config(format!("bad lambda value {value:?}")))?;
        }
        "ranks" => run.partition.ranks_per_dimm = int(value)?,
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected shard, window, lambda, or ranks"
            )));
        }
    }
    Ok(())
}

fn cmd_partition(a: PartitionArgs) -> Result<i32> {
    let run = load_run(&a.cfg)?;
    let g = run.build_graph()?;
    let pc = run.partition_config();
    let place = partition(&g, &pc)?;
    println!(
        "placement: {} vertices, {} channels x {} DIMMs x {} ranks, mode {}, lambda {}",
        g.num_vertices,
        pc.num_channels,
        pc.dimms_per_channel,
        pc.ranks_per_dimm,
        pc.mode.name(),
        pc.lambda
    );
    println!("duplicated vertices: {}", place.num_duplicated());
    for (ch, row) in place.home_counts().iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        println!("channel {ch} homes per DIMM: {}", cells.join(" "));
    }
    if let Some(p) = a.out.or_else(|| run.output.placement.clone()) {
        let file = std::fs::File::create(&p)?;
        write_placement(std::io::BufWriter::new(file), &place)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(0)
}

fn cmd_report(a: ReportArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&a.path)?;
    let report = SimReport::parse(&text)?;
    println!(
        "{}: variant {}, {} vertices, toggles {}",
        a.path.display(),
        report.workload.variant,
        report.workload.vertices,
        report.workload.toggles
    );
    println!("  time: {} ticks ({:.6} s)", report.makespan_ticks, report.makespan_seconds);
    println!(
        "  off-chip bytes: {} read, {} written",
        report.counters.off_chip_read_bytes, report.counters.off_chip_write_bytes
    );
    println!("  energy (active): {:.6} J", report.energy_active.total_j);
    if let Some(base_path) = &a.baseline {
        let base = SimReport::parse(&std::fs::read_to_string(base_path)?)?;
        let saving = reduction_saving(&base, &report)?;
        println!(
            "  off-chip reduce-read saving vs {}: {:.1}%",
            base_path.display(),
            saving * 100.0
        );
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn override_splitting_rejects_bare_keys() {
        assert!(overrides(&["a.b=1".into(), "c=d".into()]).is_ok());
        assert!(overrides(&["nodelimiter".into()]).is_err());
    }

    #[test]
    fn sweep_values_apply_to_the_right_knobs() {
        let mut run = RunConfig::default();
        apply_sweep_value(&mut run, "shard", "8x120").unwrap();
        assert_eq!((run.shard.rows, run.shard.cols), (8, 120));
        apply_sweep_value(&mut run, "window", "16").unwrap();
        assert_eq!(run.schedule.window, 16);
        apply_sweep_value(&mut run, "lambda", "0.5").unwrap();
        assert_eq!(run.partition.lambda, 0.5);
        apply_sweep_value(&mut run, "ranks", "1").unwrap();
        assert_eq!(run.partition.ranks_per_dimm, 1);
        assert!(apply_sweep_value(&mut run, "shard", "127").is_err());
        assert!(apply_sweep_value(&mut run, "voltage", "3").is_err());
    }

    #[test]
    fn command_lines_parse() {
        parse(&["gnnear", "simulate", "--traffic"]);
        parse(&["gnnear", "validate", "--inject-fault", "7", "--fault-scale", "2.0"]);
        parse(&["gnnear", "sweep", "--param", "shard", "--values", "1x127,2x126"]);
        parse(&["gnnear", "partition", "--out", "p.txt"]);
        parse(&["gnnear", "report", "--path", "r.txt", "--baseline", "b.txt"]);
        assert!(Cli::try_parse_from(["gnnear", "sweep"]).is_err());
    }

    #[test]
    fn validate_passes_clean_and_localizes_faults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(
            &cfg_path,
            "seed = 5\n[graph]\nvertices = 60\navg_degree = 5.0\n\
             [model]\nvariant = \"gcn\"\nin_dim = 8\nhidden = 6\nclasses = 3\n\
             [partition]\nchannels = 2\ndimms_per_channel = 2\n",
        )
        .unwrap();
        let clean = ValidateArgs {
            cfg: ConfigArgs { config: Some(cfg_path.clone()), set: vec![] },
            inject_fault: None,
            fault_scale: 1.5,
            tolerance: 1e-4,
        };
        assert_eq!(cmd_validate(clean).unwrap(), 0);
        let faulty = ValidateArgs {
            cfg: ConfigArgs { config: Some(cfg_path), set: vec![] },
            inject_fault: Some(3),
            fault_scale: 1.5,
            tolerance: 1e-4,
        };
        assert_eq!(cmd_validate(faulty).unwrap(), 3);
    }

    #[test]
    fn simulate_writes_report_and_trace() {
        let dir = tempfile::tempdir().unwrap();
        let report = dir.path().join("report.txt");
        let trace = dir.path().join("trace.txt");
        let args = SimulateArgs {
            cfg: ConfigArgs {
                config: None,
                set: vec![
                    "graph.vertices=50".into(),
                    "graph.avg_degree=4.0".into(),
                    "model.in_dim=8".into(),
                    "model.hidden=6".into(),
                    "partition.channels=2".into(),
                    "partition.dimms_per_channel=2".into(),
                ],
            },
            traffic: false,
            report: Some(report.clone()),
            trace: Some(trace.clone()),
        };
        assert_eq!(cmd_simulate(args).unwrap(), 0);
        let rendered = std::fs::read_to_string(&report).unwrap();
        let parsed = SimReport::parse(&rendered).unwrap();
        assert_eq!(parsed.workload.vertices, 50);
        let trace_text = std::fs::read_to_string(&trace).unwrap();
        assert!(trace_text.lines().count() > 10);
        crate::timing::parse_cmd_trace(&trace_text).unwrap();
    }

    #[test]
    fn sweep_emits_one_row_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sweep.csv");
        let args = SweepArgs {
            cfg: ConfigArgs {
                config: None,
                set: vec![
                    "graph.vertices=50".into(),
                    "graph.avg_degree=4.0".into(),
                    "model.in_dim=8".into(),
                    "model.hidden=6".into(),
                    "partition.channels=2".into(),
                    "partition.dimms_per_channel=2".into(),
                ],
            },
            param: "window".into(),
            values: "1,2,4".into(),
            traffic: false,
            out: Some(out.clone()),
        };
        assert_eq!(cmd_sweep(args).unwrap(), 0);
        let csv = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("parameter,"));
        assert!(lines[1].starts_with("1,"));
        assert!(lines[3].starts_with("4,"));
    }
}
