mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use otsforge::cases;
use otsforge::diff_opf::{self, gradcheck};
use otsforge::dispatch::{
    solve_dcopf, solve_ed, solve_ots_exact, DispatchSolution, OtsBudget, OtsMode, OtsOptions, SwitchVector,
};
use otsforge::matpower::{parse_case, RawCase};
use otsforge::network::{build_network, Network};
use otsforge::neural::MlpParams;
use otsforge::scenarios::{generate, Dataset, GenConfig, ScaleMode, Split};
use otsforge::trainer::{self, EvalOptions, EvalReport, MethodSummary, TrainConfig};

use output::{fmt9, fmt_k, sig9, sig9_vec, Csv, Manifest};

const CKPT_FORMAT: &str = "otsforge-ckpt 1";
const GRADCHECK_TOL: f64 = 1e-4;
const HIST_BINS: usize = 20;

#[derive(Parser)]
#[command(name = "otsforge", version, about = "DC optimal transmission switching: exact baselines and a dispatch-aware switching network")]
struct Cli {
    /// Cap on worker threads for per-sample work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// One worker and fixed reduction order, so seeded runs repeat byte for byte.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a MATPOWER case and print a summary or a JSON dump.
    Parse(ParseArgs),
    /// Economic dispatch (no network constraints).
    Ed(EdArgs),
    /// DC optimal power flow, optionally with a fixed topology.
    Opf(OpfArgs),
    /// Exact DC optimal transmission switching.
    Ots(OtsArgs),
    /// Generate a demand dataset with train/val/test splits.
    GenData(GenDataArgs),
    /// Train the switching network on a dataset.
    Train(TrainArgs),
    /// Per-sample comparison of ED, DC-OPF, DC-OTS and the trained model.
    Eval(EvalArgs),
    /// One summary row per method.
    Bench(BenchArgs),
    /// Compare analytic dispatch-cost gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct CaseArgs {
    /// Case file, or a bundled case: case2, case3b, case5r, case14t.
    case: String,
    /// Bus angle bound in radians.
    #[arg(long, default_value_t = 0.5)]
    theta_max: f64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Bb,
    Exhaustive,
}

#[derive(Args, Serialize)]
struct ParseArgs {
    case: String,
    /// Canonical JSON dump instead of a summary.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Serialize)]
struct EdArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Multiply every demand by this factor.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct OpfArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// File of line statuses, one value per line (whitespace or comma separated).
    #[arg(long)]
    z: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct OtsArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, value_enum, default_value_t = Mode::Bb)]
    mode: Mode,
    /// Seconds; unlimited when omitted.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Largest number of lines that may be opened.
    #[arg(long)]
    max_open: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, default_value_t = 3000)]
    n: usize,
    #[arg(long, default_value = "perbus", value_parser = parse_scale_mode)]
    mode: ScaleMode,
    #[arg(long, default_value_t = 1.0)]
    low: f64,
    #[arg(long, default_value_t = 1.1)]
    high: f64,
    #[arg(long, env = "OTSFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    eta: f64,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    wd: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 25)]
    batch: usize,
    /// Hidden width; 64 up to 100 buses and 128 above when omitted.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, env = "OTSFORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// Plain random output layer instead of the feasibility-preserving one.
    #[arg(long)]
    random_head: bool,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Histogram of relaxed line statuses before and after training;
    /// defaults to `<out>.zhat.csv`.
    #[arg(long)]
    hist_csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Seconds per sample for exact OTS; skipped when omitted.
    #[arg(long)]
    ots_budget: Option<f64>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint; the DA-DNN row is omitted without it.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Seconds per sample for exact OTS; 0 marks the row not solved and
    /// omitting it drops the row.
    #[arg(long)]
    ots_budget: Option<f64>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, env = "OTSFORGE_SEED", default_value_t = 0)]
    seed: u64,
}

fn parse_scale_mode(s: &str) -> Result<ScaleMode, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("checkpoint was trained on network {expected}, not {found}")]
    CheckpointMismatch { expected: String, found: String },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("gradient check failed: max relative error {0} exceeds {GRADCHECK_TOL}")]
    GradcheckFailed(String),
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    network_fingerprint: String,
    train_config: TrainConfig,
    params: Value,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let record = json!({ "error": "Usage", "message": e.to_string().trim() });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(1)
        }
    }
}

fn error_record(e: &anyhow::Error) -> Value {
    let message = format!("{e:#}");
    json!({ "error": error_kind(e), "message": message })
}

/// Variant name of the innermost library error, e.g. `MissingTable`.
fn error_kind(e: &anyhow::Error) -> String {
    fn variant(debug: String) -> String {
        debug.split(['(', '{', ' ']).next().unwrap_or("Error").to_string()
    }
    for cause in e.chain() {
        macro_rules! try_as {
            ($($t:ty),*) => {$(
                if let Some(x) = cause.downcast_ref::<$t>() {
                    return variant(format!("{x:?}"));
                }
            )*};
        }
        try_as!(
            otsforge::matpower::CaseError,
            otsforge::network::NetworkError,
            otsforge::scenarios::ScenarioError,
            otsforge::diff_opf::DiffOpfError,
            otsforge::neural::NeuralError,
            otsforge::dispatch::DispatchError,
            otsforge::trainer::TrainError,
            CliError
        );
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "Io".into();
        }
    }
    "Error".into()
}

fn run(cli: Cli) -> Result<()> {
    let jobs = if cli.deterministic { Some(1) } else { cli.jobs };
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match cli.command {
        Command::Parse(a) => cmd_parse(a),
        Command::Ed(a) => cmd_ed(a),
        Command::Opf(a) => cmd_opf(a),
        Command::Ots(a) => cmd_ots(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a, cli.deterministic),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Case text from a file, or from the bundled cases when no such file
/// exists.
fn read_case(name: &str) -> Result<(RawCase, String)> {
    let text = if Path::new(name).exists() {
        fs::read_to_string(name).with_context(|| format!("reading {name}"))?
    } else if let Some(t) = cases::builtin(name) {
        t.to_string()
    } else {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no case file or bundled case named '{name}'")).into());
    };
    let case = parse_case(&text).with_context(|| format!("parsing {name}"))?;
    Ok((case, text))
}

fn load_network(args: &CaseArgs, manifest: Option<&mut Manifest>) -> Result<Network> {
    let (case, text) = read_case(&args.case)?;
    if let Some(m) = manifest {
        m.input("case", text.as_bytes());
    }
    Ok(build_network(&case, args.theta_max)?)
}

fn scaled(net: &Network, scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0) {
        bail!(CliError::BadInput(format!("demand scale {scale} must be positive")));
    }
    Ok(net.nominal_demand.iter().map(|d| d * scale).collect())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Prints `text`, or writes it with a manifest when `out` is given.
fn emit(text: &str, out: Option<&Path>, mut manifest: Manifest) -> Result<()> {
    match out {
        Some(p) => {
            manifest.write(p, text)?;
            manifest.finish()
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_parse(a: ParseArgs) -> Result<()> {
    let (case, _) = read_case(&a.case)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&case)?);
    } else {
        let demand: f64 = case.bus_rows.iter().map(|b| b.pd).sum();
        let capacity: f64 = case.gen_rows.iter().map(|g| g.pmax).sum();
        println!("base_mva {}", fmt9(case.base_mva));
        println!("buses {}", case.bus_rows.len());
        println!("generators {}", case.gen_rows.len());
        println!("branches {}", case.branch_rows.len());
        println!("total_demand_mw {}", fmt9(demand));
        println!("total_capacity_mw {}", fmt9(capacity));
    }
    Ok(())
}

fn dispatch_record(sol: &DispatchSolution, z: Option<&SwitchVector>, solve_ms: f64) -> Value {
    json!({
        "status": format!("{:?}", sol.status),
        "objective": sig9(sol.objective),
        "objective_k": fmt_k(sol.objective),
        "p_g": sig9_vec(&sol.p_g),
        "theta": sig9_vec(&sol.theta),
        "z": z.map(|z| sig9_vec(z.values())),
        "iterations": sol.iterations,
        "solve_ms": sig9(solve_ms),
    })
}

fn dispatch_csv(sol: &DispatchSolution, z: Option<&SwitchVector>) -> String {
    let mut csv = Csv::new("dispatch.v1", &["quantity", "index", "value"]);
    csv.row(&["status", "", &format!("{:?}", sol.status)]);
    csv.row(&["objective", "", &fmt9(sol.objective)]);
    for (i, v) in sol.p_g.iter().enumerate() {
        csv.row(&["p_g", &i.to_string(), &fmt9(*v)]);
    }
    for (i, v) in sol.theta.iter().enumerate() {
        csv.row(&["theta", &i.to_string(), &fmt9(*v)]);
    }
    if let Some(z) = z {
        for (i, v) in z.values().iter().enumerate() {
            csv.row(&["z", &i.to_string(), &fmt9(*v)]);
        }
    }
    csv.into_string()
}

fn render(record: Value, csv: impl FnOnce() -> String, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(&record)? + "\n",
        Format::Csv => csv(),
    })
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64() * 1e3)
}

fn cmd_ed(a: EdArgs) -> Result<()> {
    let mut m = Manifest::new("ed", &a);
    let net = load_network(&a.case, Some(&mut m))?;
    let d = scaled(&net, a.scale)?;
    let (sol, ms) = timed(|| solve_ed(&net, &d));
    let sol = sol?;
    let text = render(dispatch_record(&sol, None, ms), || dispatch_csv(&sol, None), a.format)?;
    emit(&text, a.out.as_deref(), m)
}

fn read_z(path: &Path, n_line: usize) -> Result<SwitchVector> {
    let text = String::from_utf8(read_bytes(path)?).context("z file is not UTF-8")?;
    let values = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| CliError::BadInput(format!("'{t}' in z file is not a number"))))
        .collect::<Result<Vec<f64>, _>>()?;
    if values.len() != n_line {
        bail!(CliError::BadInput(format!("z file has {} values for {n_line} lines", values.len())));
    }
    let z = if values.iter().all(|&v| v == 0.0 || v == 1.0) {
        SwitchVector::binary(values)?
    } else {
        SwitchVector::relaxed(values)?
    };
    Ok(z)
}

fn cmd_opf(a: OpfArgs) -> Result<()> {
    let mut m = Manifest::new("opf", &a);
    let net = load_network(&a.case, Some(&mut m))?;
    let d = scaled(&net, a.scale)?;
    let z = match &a.z {
        Some(p) => {
            m.input("z", &read_bytes(p)?);
            read_z(p, net.n_line)?
        }
        None => SwitchVector::all_closed(net.n_line),
    };
    let (sol, ms) = timed(|| solve_dcopf(&net, &d, &z));
    let sol = sol?;
    let text = render(dispatch_record(&sol, Some(&z), ms), || dispatch_csv(&sol, Some(&z)), a.format)?;
    emit(&text, a.out.as_deref(), m)
}

fn cmd_ots(a: OtsArgs) -> Result<()> {
    let mut m = Manifest::new("ots", &a);
    let net = load_network(&a.case, Some(&mut m))?;
    let d = scaled(&net, a.scale)?;
    let budget = match a.time_limit {
        Some(s) if s >= 0.0 => OtsBudget::seconds(s),
        Some(s) => bail!(CliError::BadInput(format!("time limit {s} must be nonnegative"))),
        None => OtsBudget::unlimited(),
    };
    let mode = match a.mode {
        Mode::Bb => OtsMode::BranchAndBound,
        Mode::Exhaustive => OtsMode::Exhaustive,
    };
    let opts = OtsOptions { budget, max_open: a.max_open };
    let (sol, ms) = timed(|| solve_ots_exact(&net, &d, mode, &opts));
    let sol = sol?;
    let mut record = dispatch_record(&sol.dispatch, Some(&sol.z), ms);
    record["open_lines"] = json!(sol.z.open_lines());
    record["proved_optimal"] = json!(sol.proved_optimal);
    record["nodes_explored"] = json!(sol.nodes_explored);
    record["root_bound"] = json!(sol.root_bound.map(sig9));
    let text = render(record, || dispatch_csv(&sol.dispatch, Some(&sol.z)), a.format)?;
    emit(&text, a.out.as_deref(), m)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut m = Manifest::new("gen-data", &a);
    m.seeds(json!({ "data": a.seed }));
    let net = load_network(&a.case, Some(&mut m))?;
    let cfg = GenConfig {
        low: a.low,
        high: a.high,
        mode: a.mode,
        seed: a.seed,
    };
    let ds = generate(&net, a.n, &cfg)?;
    m.write(&a.out, &ds.to_text())?;
    m.finish()?;
    let (train, val, test) = ds.counts();
    println!("{}", json!({ "samples": ds.len(), "train": train, "val": val, "test": test, "network": ds.network_fingerprint }));
    Ok(())
}

fn load_dataset(path: &Path, net: &Network, m: &mut Manifest) -> Result<Dataset> {
    let bytes = read_bytes(path)?;
    m.input("data", &bytes);
    let text = String::from_utf8(bytes).context("dataset is not UTF-8")?;
    let ds = Dataset::from_text(&text)?;
    ds.check_network(net)?;
    Ok(ds)
}

fn load_checkpoint(path: &Path, net: &Network, m: &mut Manifest) -> Result<MlpParams> {
    let bytes = read_bytes(path)?;
    m.input("ckpt", &bytes);
    let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| CliError::BadInput(format!("checkpoint: {e}")))?;
    if ck.format != CKPT_FORMAT {
        bail!(CliError::BadInput(format!("checkpoint format '{}'", ck.format)));
    }
    if ck.network_fingerprint != net.fingerprint() {
        bail!(CliError::CheckpointMismatch {
            expected: ck.network_fingerprint,
            found: net.fingerprint(),
        });
    }
    Ok(MlpParams::from_json(&ck.params.to_string())?)
}

fn default_beside(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs, deterministic: bool) -> Result<()> {
    let mut m = Manifest::new("train", &a);
    m.seeds(json!({ "init_and_shuffle": a.seed }));
    let net = load_network(&a.case, Some(&mut m))?;
    let ds = load_dataset(&a.data, &net, &mut m)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        weight_decay: a.wd,
        eta: a.eta,
        seed: a.seed,
        hidden: a.hidden,
        custom_head: !a.random_head,
        deterministic,
        ..TrainConfig::default()
    };
    let train_set = ds.subset(Split::Train);
    let initial = trainer::initial_params(&net, &train_set, &cfg)?;
    let (params, history) = trainer::train(&net, &ds, &cfg)?;

    let ck = Checkpoint {
        format: CKPT_FORMAT.into(),
        network_fingerprint: net.fingerprint(),
        train_config: cfg,
        params: serde_json::from_str(&params.to_json())?,
    };
    m.write(&a.out, &(serde_json::to_string_pretty(&ck)? + "\n"))?;

    let mut loss = Csv::new("loss.v1", &["epoch", "train_loss", "val_cost", "infeasible"]);
    for e in &history.epochs {
        loss.row(&[e.epoch.to_string(), fmt9(e.train_loss), fmt9(e.val_cost), e.infeasible.to_string()]);
    }
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| default_beside(&a.out, ".loss.csv"));
    m.write(&loss_path, &loss.into_string())?;

    let before = trainer::zhat_histogram(&initial, &train_set, HIST_BINS)?;
    let after = trainer::zhat_histogram(&params, &train_set, HIST_BINS)?;
    let mut hist = Csv::new("zhat_hist.v1", &["bin_low", "bin_high", "before", "after"]);
    for b in 0..HIST_BINS {
        hist.row(&[
            fmt9(b as f64 / HIST_BINS as f64),
            fmt9((b + 1) as f64 / HIST_BINS as f64),
            before[b].to_string(),
            after[b].to_string(),
        ]);
    }
    let hist_path = a.hist_csv.clone().unwrap_or_else(|| default_beside(&a.out, ".zhat.csv"));
    m.write(&hist_path, &hist.into_string())?;
    m.finish()?;

    let last = history.epochs.last();
    println!(
        "{}",
        json!({
            "epochs": history.epochs.len(),
            "initial_val_cost": sig9(history.initial_val_cost),
            "final_val_cost": last.map(|e| sig9(e.val_cost)),
            "selected_epoch": history.selected_epoch,
        })
    );
    Ok(())
}

fn ots_budget(seconds: Option<f64>) -> Result<Option<OtsBudget>> {
    match seconds {
        None => Ok(None),
        Some(s) if s == 0.0 => Ok(Some(trainer::zero_budget())),
        Some(s) if s > 0.0 => Ok(Some(OtsBudget::seconds(s))),
        Some(s) => bail!(CliError::BadInput(format!("OTS budget {s} must be nonnegative"))),
    }
}

fn opt9(v: Option<f64>, missing: &str) -> String {
    v.map(fmt9).unwrap_or_else(|| missing.to_string())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut m = Manifest::new("eval", &a);
    let net = load_network(&a.case, Some(&mut m))?;
    let ds = load_dataset(&a.data, &net, &mut m)?;
    let params = load_checkpoint(&a.ckpt, &net, &mut m)?;
    let opts = EvalOptions {
        ots_budget: ots_budget(a.ots_budget)?,
        ..EvalOptions::default()
    };
    let report = trainer::evaluate(Some(&params), &net, &ds, a.split, &opts)?;
    let ots_missing = if opts.ots_budget.is_some() { "NS" } else { "" };
    let mut csv = Csv::new(
        "eval.v1",
        &[
            "index", "ed", "opf", "ots", "dadnn", "used_fallback", "dadnn_violation", "ed_ms", "opf_ms", "ots_ms", "dadnn_ms",
        ],
    );
    for r in &report.samples {
        csv.row(&[
            r.index.to_string(),
            fmt9(r.ed),
            fmt9(r.opf),
            opt9(r.ots, ots_missing),
            opt9(r.dadnn, ""),
            r.used_fallback.to_string(),
            opt9(r.dadnn_violation, ""),
            fmt9(r.ed_ms),
            fmt9(r.opf_ms),
            opt9(r.ots_ms, ""),
            opt9(r.dadnn_ms, ""),
        ]);
    }
    emit(&csv.into_string(), a.out.as_deref(), m)?;
    if a.out.is_some() {
        println!("{}", summary_json(&report));
    }
    Ok(())
}

fn summary_json(report: &EvalReport) -> Value {
    let method = |s: &MethodSummary| {
        json!({
            "mean_cost": s.mean_cost.map(sig9),
            "median_ms": s.median_ms.map(sig9),
            "not_solved": s.not_solved,
        })
    };
    json!({
        "ed": method(&report.ed),
        "opf": method(&report.opf),
        "ots": report.ots.as_ref().map(method),
        "dadnn": report.dadnn.as_ref().map(method),
        "fallback_count": report.fallback_count,
    })
}

fn bench_row(csv: &mut Csv, name: &str, s: &MethodSummary, fallbacks: Option<usize>) {
    let (cost, cost_k, status) = match s.mean_cost {
        Some(c) if !s.not_solved => (fmt9(c), fmt_k(c), "ok"),
        _ => ("NS".into(), "NS".into(), "NS"),
    };
    let fallbacks = fallbacks.map(|f| f.to_string()).unwrap_or_default();
    csv.row(&[name.to_string(), cost, cost_k, opt9(s.median_ms, ""), fallbacks, status.to_string()]);
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut m = Manifest::new("bench", &a);
    let net = load_network(&a.case, Some(&mut m))?;
    let ds = load_dataset(&a.data, &net, &mut m)?;
    let params = match &a.ckpt {
        Some(p) => Some(load_checkpoint(p, &net, &mut m)?),
        None => None,
    };
    let opts = EvalOptions {
        ots_budget: ots_budget(a.ots_budget)?,
        ..EvalOptions::default()
    };
    let report = trainer::evaluate(params.as_ref(), &net, &ds, a.split, &opts)?;
    let mut csv = Csv::new("bench.v1", &["method", "mean_cost", "mean_cost_k", "median_ms", "fallback_count", "status"]);
    bench_row(&mut csv, "ED", &report.ed, None);
    bench_row(&mut csv, "DC-OPF", &report.opf, None);
    if let Some(ots) = &report.ots {
        bench_row(&mut csv, "DC-OTS", ots, None);
    }
    if let Some(dadnn) = &report.dadnn {
        bench_row(&mut csv, "DA-DNN", dadnn, Some(report.fallback_count));
    }
    emit(&csv.into_string(), a.out.as_deref(), m)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let net = load_network(&a.case, None)?;
    if !solve_dcopf(&net, &net.nominal_demand, &SwitchVector::all_closed(net.n_line))?.is_optimal() {
        bail!(CliError::BadInput("DC-OPF with every line closed is infeasible at nominal demand".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let report = gradcheck(&net, a.trials, &mut rng)?;
    let passed = report.passed(GRADCHECK_TOL);
    println!(
        "{}",
        json!({
            "instances": report.errors.len(),
            "rejected": report.rejected,
            "max_rel_error": sig9(report.max_error()),
            "fd_step": diff_opf::FD_STEP,
            "tolerance": GRADCHECK_TOL,
            "passed": passed,
        })
    );
    if !passed {
        bail!(CliError::GradcheckFailed(fmt9(report.max_error())));
    }
    Ok(())
}
