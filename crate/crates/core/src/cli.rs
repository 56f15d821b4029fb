//! Command-line front end. Commands write to caller-supplied streams and
//! return an [`ExitStatus`] so they can be driven in-process.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::audit::{access_records, audit, taint, AuditVerdict, SubVerdict};
use crate::simulator::{
    revocation_race, run_scenario_with_policy, sweep, EngineMode, RaceConfig, RaceMetrics,
    Scenario, SimError, RACE_CSV_HEADER,
};
use crate::trace::{verify_bytes, TraceError, WorkflowTrace};
use crate::workflow::{ExecutionStatus, TemporalPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Denied = 1,
    InvalidInput = 2,
    IntegrityFailure = 3,
    Violations = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn for_status(status: &ExecutionStatus) -> Self {
        match status {
            ExecutionStatus::Completed | ExecutionStatus::CompletedPartial { .. } => ExitStatus::Ok,
            ExecutionStatus::Denied { .. } => ExitStatus::Denied,
        }
    }

    pub fn for_verdict(verdict: &AuditVerdict) -> Self {
        if verdict.is_clean() {
            ExitStatus::Ok
        } else {
            ExitStatus::Violations
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "authprop",
    version,
    about = "Workflow-scoped authorization propagation: run, audit, taint, race"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario file without running it.
    Validate { path: PathBuf },
    /// Execute a scenario and write its trace.
    Run(RunArgs),
    /// Verify and audit a binary trace.
    Audit { trace: PathBuf },
    /// Report everything downstream of an access record.
    Taint {
        trace: PathBuf,
        #[arg(long)]
        origin: u64,
    },
    /// TTL vs execution-count revocation race.
    Race(RaceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Compliant,
    Legacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Initiation,
    Access,
    Completion,
}

impl From<PolicyArg> for TemporalPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Initiation => TemporalPolicy::InitiationTime,
            PolicyArg::Access => TemporalPolicy::AccessTime,
            PolicyArg::Completion => TemporalPolicy::CompletionTime,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub path: PathBuf,
    #[arg(long, value_enum, default_value = "compliant")]
    pub mode: ModeArg,
    /// Required: when authorization is evaluated is a policy choice.
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Binary trace output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a JSON export of the trace.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RaceArgs {
    #[arg(long)]
    pub velocity: Option<u64>,
    #[arg(long)]
    pub ttl: Option<u64>,
    #[arg(long)]
    pub exec_count: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub revoke_at: u64,
    #[arg(long, default_value_t = 10_000)]
    pub horizon: u64,
    /// JSON array of race configurations.
    #[arg(long, conflicts_with_all = ["velocity", "ttl", "exec_count"])]
    pub sweep: Option<PathBuf>,
    #[arg(long)]
    pub csv: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                ExitStatus::InvalidInput
            } else {
                let _ = write!(out, "{}", e.render());
                ExitStatus::Ok
            };
        }
    };
    dispatch(cli.command, out, err)
}

pub fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus {
    let result = match command {
        Command::Validate { path } => cmd_validate(&path, out, err),
        Command::Run(args) => cmd_run(&args, out, err),
        Command::Audit { trace } => cmd_audit(&trace, out, err),
        Command::Taint { trace, origin } => cmd_taint(&trace, origin, out, err),
        Command::Race(args) => cmd_race(&args, out, err),
    };
    result.unwrap_or_else(|e| {
        let _ = writeln!(err, "error: {e}");
        ExitStatus::InvalidInput
    })
}

fn load_scenario(path: &Path) -> Result<Scenario, SimError> {
    let text = fs::read_to_string(path)
        .map_err(|e| SimError::InvalidScenario(vec![format!("{}: {e}", path.display())]))?;
    Scenario::from_json(&text)
}

fn diagnostics(err: &mut dyn Write, e: &SimError) -> std::io::Result<ExitStatus> {
    match e {
        SimError::InvalidScenario(list) => {
            for d in list {
                writeln!(err, "invalid: {d}")?;
            }
        }
        other => writeln!(err, "error: {other}")?,
    }
    Ok(ExitStatus::InvalidInput)
}

pub fn cmd_validate(
    path: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::io::Result<ExitStatus> {
    let scenario = match load_scenario(path) {
        Ok(s) => s,
        Err(e) => return diagnostics(err, &e),
    };
    let problems = scenario.validate();
    if !problems.is_empty() {
        return diagnostics(err, &SimError::InvalidScenario(problems));
    }
    writeln!(
        out,
        "{}: valid ({} vertices, {} tokens, {} events)",
        scenario.name,
        scenario.graph.vertices.len(),
        scenario.tokens.len(),
        scenario.events.len()
    )?;
    Ok(ExitStatus::Ok)
}

pub fn cmd_run(
    args: &RunArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::io::Result<ExitStatus> {
    let Some(policy) = args.policy else {
        writeln!(
            err,
            "error: --policy is required (initiation|access|completion); evaluation timing is a policy decision and has no default"
        )?;
        return Ok(ExitStatus::InvalidInput);
    };
    let policy = TemporalPolicy::from(policy);
    let scenario = match load_scenario(&args.path) {
        Ok(s) => s,
        Err(e) => return diagnostics(err, &e),
    };
    if let Some(fixed) = scenario.config.temporal_policy {
        if fixed != policy {
            writeln!(
                err,
                "error: scenario {} fixes temporal policy {fixed}, but --policy {policy} was given",
                scenario.name
            )?;
            return Ok(ExitStatus::InvalidInput);
        }
    }
    let mode = match args.mode {
        ModeArg::Compliant => EngineMode::Compliant,
        ModeArg::Legacy => EngineMode::LegacyBuggy,
    };
    let run = match run_scenario_with_policy(&scenario, mode, policy) {
        Ok(r) => r,
        Err(e) => return diagnostics(err, &e),
    };
    if let Some(path) = &args.out {
        fs::write(path, run.trace.to_bytes())?;
    }
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&run.trace.to_json()).expect("json value");
        fs::write(path, text + "\n")?;
    }
    writeln!(
        out,
        "scenario: {} (mode {mode}, policy {policy})",
        scenario.name
    )?;
    writeln!(out, "status: {}", run.result.status)?;
    for (vertex, allowed) in &run.result.accesses {
        writeln!(
            out,
            "  access {vertex}: {}",
            if *allowed { "allow" } else { "deny" }
        )?;
    }
    for d in &run.result.delivered {
        let provenance: Vec<&str> = d.artifact.provenance.iter().map(|r| r.as_str()).collect();
        writeln!(
            out,
            "  delivered {} to {} (provenance: {})",
            d.artifact.id,
            d.recipient,
            provenance.join(", ")
        )?;
        if let Some(disclosure) = &d.disclosure {
            writeln!(out, "    disclosure: {disclosure}")?;
        }
    }
    writeln!(
        out,
        "trace: {} records, final tick {}",
        run.metrics.records, run.metrics.final_tick
    )?;
    Ok(ExitStatus::for_status(&run.result.status))
}

/// Reads and verifies a trace file. `Err` carries the exit status already
/// reported on `err`.
fn load_trace(
    path: &Path,
    err: &mut dyn Write,
) -> std::io::Result<Result<WorkflowTrace, ExitStatus>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            writeln!(err, "error: {}: {e}", path.display())?;
            return Ok(Err(ExitStatus::InvalidInput));
        }
    };
    match verify_bytes(&bytes) {
        Ok(v) if v.is_intact() => {}
        Ok(v) => {
            writeln!(err, "integrity: {v}")?;
            return Ok(Err(ExitStatus::IntegrityFailure));
        }
        Err(e) => {
            writeln!(err, "integrity: {e}")?;
            return Ok(Err(ExitStatus::IntegrityFailure));
        }
    }
    match WorkflowTrace::from_bytes(&bytes) {
        Ok(t) => Ok(Ok(t)),
        Err(
            e @ (TraceError::Broken(_)
            | TraceError::Malformed { .. }
            | TraceError::SequenceGap { .. }),
        ) => {
            writeln!(err, "integrity: {e}")?;
            Ok(Err(ExitStatus::IntegrityFailure))
        }
    }
}

fn write_sub(out: &mut dyn Write, question: &str, sub: &SubVerdict) -> std::io::Result<()> {
    if sub.is_clean() {
        writeln!(out, "{question}: clean")
    } else {
        writeln!(out, "{question}: {} violation(s)", sub.violations.len())?;
        for v in &sub.violations {
            writeln!(out, "  {v}")?;
        }
        Ok(())
    }
}

pub fn cmd_audit(
    path: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::io::Result<ExitStatus> {
    let trace = match load_trace(path, err)? {
        Ok(t) => t,
        Err(code) => return Ok(code),
    };
    let verdict = match audit(&trace) {
        Ok(v) => v,
        Err(e) => {
            writeln!(err, "integrity: {e}")?;
            return Ok(ExitStatus::IntegrityFailure);
        }
    };
    writeln!(out, "integrity: intact ({} records)", trace.len())?;
    write_sub(out, "authorized accesses", &verdict.access)?;
    write_sub(out, "delegation chains", &verdict.chain)?;
    write_sub(out, "aggregation", &verdict.aggregation)?;
    write_sub(out, "delivery", &verdict.delivery)?;
    for n in &verdict.notices {
        writeln!(out, "notice #{}: {}", n.seq, n.detail)?;
    }
    if let Some(status) = &verdict.outcome.status {
        writeln!(out, "recorded outcome: {status}")?;
    }
    writeln!(
        out,
        "overall: {}",
        if verdict.is_clean() {
            "clean"
        } else {
            "violations"
        }
    )?;
    Ok(ExitStatus::for_verdict(&verdict))
}

pub fn cmd_taint(
    path: &Path,
    origin: u64,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::io::Result<ExitStatus> {
    let trace = match load_trace(path, err)? {
        Ok(t) => t,
        Err(code) => return Ok(code),
    };
    let report = match taint(&trace, origin) {
        Ok(r) => r,
        Err(e) => {
            writeln!(err, "error: {e}")?;
            let seqs: Vec<String> = access_records(&trace)
                .into_iter()
                .map(|(s, v)| format!("#{s} ({v})"))
                .collect();
            writeln!(err, "access records: {}", seqs.join(", "))?;
            return Ok(ExitStatus::InvalidInput);
        }
    };
    writeln!(out, "origin: #{} ({})", report.origin, report.origin_vertex)?;
    let join = |it: Vec<String>| {
        if it.is_empty() {
            "-".to_string()
        } else {
            it.join(", ")
        }
    };
    writeln!(
        out,
        "tainted vertices: {}",
        join(
            report
                .tainted_vertices
                .iter()
                .map(|v| v.to_string())
                .collect()
        )
    )?;
    writeln!(
        out,
        "tainted artifacts: {}",
        join(
            report
                .tainted_artifacts
                .iter()
                .map(|a| a.to_string())
                .collect()
        )
    )?;
    for (recipient, artifact) in &report.delivered_tainted {
        writeln!(out, "flag: {artifact} delivered to {recipient}")?;
    }
    Ok(ExitStatus::Ok)
}

fn race_table(out: &mut dyn Write, rows: &[RaceMetrics], csv: bool) -> std::io::Result<()> {
    if csv {
        writeln!(out, "{RACE_CSV_HEADER}")?;
        for r in rows {
            writeln!(out, "{}", r.csv_row())?;
        }
        return Ok(());
    }
    writeln!(
        out,
        "{:>9} {:>7} {:>6} {:>7} {:>9} {:>10} {:>10} {:>9}",
        "velocity", "ttl", "n", "revoke", "horizon", "ttl_ops", "exec_ops", "ratio"
    )?;
    for r in rows {
        let c = &r.config;
        let ratio = r
            .ratio
            .map_or_else(|| "inf".to_string(), |x| format!("{x:.2}"));
        writeln!(
            out,
            "{:>9} {:>7} {:>6} {:>7} {:>9} {:>10} {:>10} {:>9}",
            c.velocity,
            c.ttl,
            c.exec_count,
            c.revoke_at,
            c.horizon,
            r.unauthorized_ops_ttl,
            r.unauthorized_ops_exec,
            ratio
        )?;
    }
    Ok(())
}

pub fn cmd_race(
    args: &RaceArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::io::Result<ExitStatus> {
    let rows = if let Some(path) = &args.sweep {
        let grid: Vec<RaceConfig> = match fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        {
            Ok(g) => g,
            Err(e) => {
                writeln!(err, "error: {}: {e}", path.display())?;
                return Ok(ExitStatus::InvalidInput);
            }
        };
        sweep(&grid)
    } else {
        let (Some(velocity), Some(ttl), Some(exec_count)) =
            (args.velocity, args.ttl, args.exec_count)
        else {
            writeln!(
                err,
                "error: give --velocity, --ttl and --exec-count, or --sweep"
            )?;
            return Ok(ExitStatus::InvalidInput);
        };
        revocation_race(RaceConfig {
            velocity,
            ttl,
            exec_count,
            revoke_at: args.revoke_at,
            horizon: args.horizon,
        })
        .map(|m| vec![m])
    };
    match rows {
        Ok(rows) => {
            race_table(out, &rows, args.csv)?;
            Ok(ExitStatus::Ok)
        }
        Err(e) => {
            writeln!(err, "error: {e}")?;
            Ok(ExitStatus::InvalidInput)
        }
    }
}
