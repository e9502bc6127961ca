use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use gdps_core::conflict::{conflict_report, ConflictConfig, RatioThresholds};
use gdps_core::decomposer::{self, Activation, DecomposeError, DecompositionPlan, UnifiedFfnWeights};
use gdps_core::gradbundle::{self, GradientBundle};
use gdps_core::grouping::consensus_group;
use gdps_core::pipeline::{run_plan, PipelineReport, PlanConfig, Provenance, Setting};
use gdps_core::subspace::{subspace_report, SubspaceConfig};
use gdps_core::synthbench::{self, ModeSelect, SimConfig, SynthError};
use gdps_core::DEFAULT_SEED;

mod report;

/// Error carrying the process exit code: 1 for bad input, 2 for analysis
/// or numerical failures.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure { code: 1, err: e.into() }
}

fn analysis<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure { code: 2, err: e.into() }
}

fn from_pipeline(e: gdps_core::pipeline::PipelineError) -> Failure {
    if e.is_input_error() {
        input(e)
    } else {
        analysis(e)
    }
}

fn from_synth(e: SynthError) -> Failure {
    match e {
        SynthError::Invalid(_) | SynthError::UnknownTask(_) | SynthError::Bundle(_) => input(e),
        SynthError::Pipeline(p) => from_pipeline(p),
        _ => analysis(e),
    }
}

#[derive(Parser)]
#[command(name = "gdps", version, about = "Gradient-driven parameter sharing analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Md,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Unified,
    Specialized,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a gradient bundle.
    Inspect(InspectArgs),
    /// Cluster tasks by mean-gradient similarity.
    Group(GroupArgs),
    /// Per-layer conflict scores and the shared ratio they imply.
    Conflict(ConflictArgs),
    /// Joint spectrum, energy shares and canonical correlations.
    Subspace(SubspaceArgs),
    /// Run grouping, conflict and subspace analysis and write a plan.
    Plan(PlanArgs),
    /// Split unified feed-forward weights according to a plan.
    Decompose(DecomposeArgs),
    /// Train unified and specialized toy models on a synthetic suite.
    Simulate(SimulateArgs),
    /// Consolidate outputs of earlier commands.
    Report(ReportArgs),
}

#[derive(Args)]
struct BundleArg {
    /// Bundle directory containing manifest.json.
    #[arg(long)]
    bundle: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    bundle: BundleArg,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
}

#[derive(Args)]
struct GroupArgs {
    #[command(flatten)]
    bundle: BundleArg,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    k_groups: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
}

#[derive(Args)]
struct ConflictArgs {
    #[command(flatten)]
    bundle: BundleArg,
    /// Candidate layers, comma separated. Defaults to every layer.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    /// Ratio breakpoints `low,high`.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
}

#[derive(Args)]
struct SubspaceArgs {
    #[command(flatten)]
    bundle: BundleArg,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    normalize_rows: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    bundle: BundleArg,
    /// Layer for grouping and subspace analysis; defaults to the
    /// highest-conflict candidate.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    #[arg(long)]
    k_groups: Option<usize>,
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    private_rank: Option<usize>,
    #[arg(long)]
    normalize_rows: bool,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    /// Scale private-init noise by one minus the mean canonical correlation.
    #[arg(long)]
    cca_noise_scaling: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    /// Up-projection `d_ff × d_model` (.gdm).
    #[arg(long)]
    w1: PathBuf,
    /// Down-projection `d_model × d_ff` (.gdm).
    #[arg(long)]
    w2: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Plan report, required with cca noise scaling.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    private_rank: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Angle between group target maps, degrees.
    #[arg(long, default_value_t = 80.0)]
    theta: f64,
    /// Planted group sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    groups: Vec<usize>,
    /// Number of tasks; must equal the sum of group sizes when given.
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long, default_value_t = synthbench::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = synthbench::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    private_lr_mult: f64,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    #[arg(long, default_value = "identity")]
    activation: String,
    /// Standard deviation of target noise.
    #[arg(long, default_value_t = 0.1)]
    target_noise: f64,
    /// Within-group angle between target maps, degrees.
    #[arg(long, default_value_t = 5.0)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    pretrain_steps: usize,
    /// Private-init noise scale of the derived plans.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    k_groups: Option<usize>,
    #[arg(long)]
    thresholds: Option<String>,
    /// Also write the gradient bundle and probe weights of the first seed.
    #[arg(long)]
    export: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directories of `plan` or `simulate`, or their JSON files.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {:#}", f.err);
        return ExitCode::from(f.code);
    }
    let res = match cli.command {
        Command::Inspect(a) => cmd_inspect(a),
        Command::Group(a) => cmd_group(a),
        Command::Conflict(a) => cmd_conflict(a),
        Command::Subspace(a) => cmd_subspace(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => report::cmd_report(&a.inputs, a.format, a.out.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

/// `GDPS_THREADS` sets the worker count; results do not depend on it.
fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("GDPS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| input(anyhow!("GDPS_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(input(anyhow!("GDPS_THREADS must be a positive integer, got 0")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| analysis(anyhow!("thread pool: {e}")))
}

fn load_bundle(path: &Path) -> CliResult<GradientBundle> {
    gradbundle::read_bundle(path).map_err(input)
}

fn parse_thresholds(s: Option<&str>) -> CliResult<RatioThresholds> {
    let Some(s) = s else {
        return Ok(RatioThresholds::default());
    };
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || input(anyhow!("--thresholds expects `low,high`, got `{s}`"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let low: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let high: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    RatioThresholds::new(low, high).map_err(input)
}

fn parse_activation(s: Option<&str>) -> CliResult<Option<Activation>> {
    s.map(|a| {
        Activation::parse(a).ok_or_else(|| input(anyhow!("unknown activation `{a}` (identity, relu, silu, tanh)")))
    })
    .transpose()
}

fn single_layer(bundle: &GradientBundle, layer: Option<&str>) -> CliResult<String> {
    match layer {
        Some(l) => {
            bundle.layer_cols(l).map_err(input)?;
            Ok(l.to_string())
        }
        None if bundle.layers().len() == 1 => Ok(bundle.layers()[0].name.clone()),
        None => Err(input(anyhow!(
            "bundle has {} layers; choose one with --layer",
            bundle.layers().len()
        ))),
    }
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .map_err(input)?;
        }
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(input)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn emit(format: Format, json: String, md: String, csv: String, out: Option<&Path>, stem: &str) -> CliResult<()> {
    if let Some(dir) = out {
        write(&dir.join(format!("{stem}.json")), &json)?;
        write(&dir.join(format!("{stem}.md")), &md)?;
        write(&dir.join(format!("{stem}.csv")), &csv)?;
    }
    print!(
        "{}",
        match format {
            Format::Json => json,
            Format::Md => md,
            Format::Csv => csv,
        }
    );
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult<()> {
    let b = load_bundle(&a.bundle.bundle)?;
    let mut md = format!(
        "# Bundle\n\nfingerprint: `{}`\n\n| task | layer | rows | cols |\n|---|---|---|---|\n",
        b.fingerprint()
    );
    let mut csv = String::from("task,layer,rows,cols\n");
    let mut entries = Vec::new();
    for t in b.tasks() {
        for l in b.layers() {
            let m = b.sample_gradients(t, &l.name).map_err(input)?;
            md.push_str(&format!("| {t} | {} | {} | {} |\n", l.name, m.rows(), m.cols()));
            csv.push_str(&format!("{t},{},{},{}\n", l.name, m.rows(), m.cols()));
            entries.push(json!({"task": t, "layer": l.name, "rows": m.rows(), "cols": m.cols()}));
        }
    }
    let js = to_json(&json!({
        "fingerprint": b.fingerprint(),
        "tasks": b.tasks(),
        "layers": b.layers(),
        "matrices": entries,
    }));
    emit(a.format, js, md, csv, None, "inspect")
}

fn cmd_group(a: GroupArgs) -> CliResult<()> {
    let b = load_bundle(&a.bundle.bundle)?;
    let layer = single_layer(&b, a.layer.as_deref())?;
    let o = consensus_group(&b, &layer, a.k_groups.unwrap_or(2), a.seed.unwrap_or(DEFAULT_SEED)).map_err(|e| {
        use gdps_core::grouping::GroupingError;
        match e {
            GroupingError::Bundle(_) | GroupingError::InvalidK { .. } => input(e),
            _ => analysis(e),
        }
    })?;
    let mut md = format!("# Grouping at `{layer}`\n\n");
    for (g, m) in o.plan.groups.iter().enumerate() {
        md.push_str(&format!("- group {g}: {}\n", m.join(", ")));
    }
    md.push_str(&format!("\nmethod: {:?}\n", o.plan.method));
    for w in &o.warnings {
        md.push_str(&format!("\nwarning: {w}\n"));
    }
    let csv = report::heatmap_csv(&o.similarity.tasks, &o.similarity.s);
    emit(a.format, to_json(&o), md, csv, a.out.as_deref(), "grouping")
}

fn cmd_conflict(a: ConflictArgs) -> CliResult<()> {
    let b = load_bundle(&a.bundle.bundle)?;
    let thresholds = parse_thresholds(a.thresholds.as_deref())?;
    let layers = if a.layers.is_empty() { b.layer_names() } else { a.layers.clone() };
    let cfg = ConflictConfig {
        seed: a.seed.unwrap_or(DEFAULT_SEED),
        ..ConflictConfig::default()
    };
    let r = conflict_report(&b, &layers, &thresholds, &cfg).map_err(|e| {
        use gdps_core::conflict::ConflictError;
        match e {
            ConflictError::AllDegenerate { .. } => analysis(e),
            _ => input(e),
        }
    })?;
    let mut md = String::from("# Conflict\n\n| layer | S_self | S_cross | delta | purity |\n|---|---|---|---|---|\n");
    let mut csv = String::from("layer,s_self,s_cross,delta,purity\n");
    for l in &r.layers {
        md.push_str(&format!(
            "| {} | {:.6} | {:.6} | {:.6} | {:.4} |\n",
            l.layer, l.s_self, l.s_cross, l.delta, l.purity
        ));
        csv.push_str(&format!("{},{},{},{},{}\n", l.layer, l.s_self, l.s_cross, l.delta, l.purity));
    }
    md.push_str(&format!(
        "\ndelta = {:.6}; {}; shared ratio = {:.2}\n",
        r.delta, r.branch_rule, r.shared_ratio
    ));
    emit(a.format, to_json(&r), md, csv, a.out.as_deref(), "conflict")
}

fn cmd_subspace(a: SubspaceArgs) -> CliResult<()> {
    let b = load_bundle(&a.bundle.bundle)?;
    let layer = single_layer(&b, a.layer.as_deref())?;
    let d = SubspaceConfig::default();
    let cfg = SubspaceConfig {
        top_k: a.top_k.unwrap_or(d.top_k),
        lambda: a.lambda.unwrap_or(d.lambda),
        normalize_rows: a.normalize_rows,
        ..d
    };
    let r = subspace_report(&b, &layer, &cfg).map_err(|e| {
        use gdps_core::subspace::SubspaceError;
        match e {
            SubspaceError::Bundle(_) | SubspaceError::InvalidK { .. } => input(e),
            _ => analysis(e),
        }
    })?;
    let mut md = format!(
        "# Subspace at `{layer}`\n\nk = {}, top-1 share = {:.4}, gini = {:.4}\n\n| task | energy share |\n|---|---|\n",
        r.k, r.top1_share, r.gini
    );
    for (t, p) in r.tasks.iter().zip(&r.proportions) {
        md.push_str(&format!("| {t} | {p:.6} |\n"));
    }
    emit(a.format, to_json(&r), md, r.spectrum_csv(), a.out.as_deref(), "subspace")
}

fn setting<T: serde::Serialize>(name: &str, value: T, explicit: bool, default: Provenance) -> Setting {
    Setting {
        name: name.to_string(),
        value: serde_json::to_value(value).expect("serializable"),
        provenance: if explicit { Provenance::User } else { default },
    }
}

/// Flags as given, without the program name.
fn echoed_flags() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn cmd_plan(a: PlanArgs) -> CliResult<()> {
    let b = load_bundle(&a.bundle.bundle)?;
    let thresholds = parse_thresholds(a.thresholds.as_deref())?;
    let activation = parse_activation(a.activation.as_deref())?;
    let mut cfg = PlanConfig::default();
    cfg.k_groups = a.k_groups.unwrap_or(cfg.k_groups);
    cfg.thresholds = thresholds;
    cfg.layer = a.layer.clone();
    cfg.candidates = a.layers.clone();
    cfg.subspace.top_k = a.top_k.unwrap_or(cfg.subspace.top_k);
    cfg.subspace.lambda = a.lambda.unwrap_or(cfg.subspace.lambda);
    cfg.subspace.normalize_rows = a.normalize_rows;
    cfg.seed = a.seed.unwrap_or(DEFAULT_SEED);
    cfg.d_model = a.d_model.unwrap_or(cfg.d_model);
    cfg.d_ff = a.d_ff.unwrap_or(cfg.d_ff);
    cfg.options.noise_scale = a.noise.unwrap_or(cfg.options.noise_scale);
    cfg.options.private_rank = a.private_rank;
    cfg.options.activation = activation.unwrap_or(cfg.options.activation);
    cfg.options.cca_noise_scaling = a.cca_noise_scaling;

    let outcome = run_plan(&b, &cfg).map_err(from_pipeline)?;
    use Provenance::{Published, ToolDefault};
    let settings = vec![
        setting("seed", cfg.seed, a.seed.is_some(), Published),
        setting("thresholds", [cfg.thresholds.low, cfg.thresholds.high], a.thresholds.is_some(), Published),
        setting("ratios", cfg.thresholds.ratios, false, Published),
        setting("k_groups", cfg.k_groups, a.k_groups.is_some(), ToolDefault),
        setting("top_k", cfg.subspace.top_k, a.top_k.is_some(), ToolDefault),
        setting("lambda", cfg.subspace.lambda, a.lambda.is_some(), ToolDefault),
        setting("normalize_rows", cfg.subspace.normalize_rows, a.normalize_rows, ToolDefault),
        setting("centered", cfg.subspace.center, false, ToolDefault),
        setting("sample_cap", cfg.conflict.sample_cap, false, ToolDefault),
        setting("layer", &outcome.layer, a.layer.is_some(), ToolDefault),
        setting("candidates", &outcome.conflict.candidate_layers, !a.layers.is_empty(), ToolDefault),
        setting("d_model", cfg.d_model, a.d_model.is_some(), ToolDefault),
        setting("d_ff", cfg.d_ff, a.d_ff.is_some(), ToolDefault),
        setting("rank_divisor", cfg.options.rank_divisor, false, Published),
        setting("private_rank", outcome.plan.private_rank, a.private_rank.is_some(), ToolDefault),
        setting("noise", cfg.options.noise_scale, a.noise.is_some(), ToolDefault),
        setting("activation", cfg.options.activation, activation.is_some(), ToolDefault),
        setting("cca_noise_scaling", cfg.options.cca_noise_scaling, a.cca_noise_scaling, ToolDefault),
    ];
    let mut report = PipelineReport::new(&b, echoed_flags(), settings, outcome);
    report.generated_at = Some(timestamp());
    write(&a.out.join("plan.json"), &(report.outcome.plan.to_json() + "\n"))?;
    write(&a.out.join("report.json"), &(report.to_json() + "\n"))?;
    write(&a.out.join("report.md"), &report.to_markdown())?;
    let p = &report.outcome.plan;
    println!(
        "plan: {} groups {:?}, delta {:.6} -> shared ratio {:.2}, d_s {}, d_p {} (report hash {})",
        p.n_groups(),
        p.grouping.groups,
        report.outcome.conflict.delta,
        p.shared_ratio,
        p.d_s,
        p.d_p,
        report.content_hash()
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

fn decompose_failure(e: DecomposeError) -> Failure {
    match e {
        DecomposeError::Bundle(_) | DecomposeError::Format(_) | DecomposeError::Plan(_) => input(e),
        _ => analysis(e),
    }
}

fn cmd_decompose(a: DecomposeArgs) -> CliResult<()> {
    let bytes = fs::read(&a.plan)
        .with_context(|| format!("reading plan {}", a.plan.display()))
        .map_err(input)?;
    let mut plan = DecompositionPlan::from_json(&bytes)
        .with_context(|| format!("plan {}", a.plan.display()))
        .map_err(input)?;
    if let Some(n) = a.noise {
        plan.noise_scale = n;
    }
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    if let Some(r) = a.private_rank {
        plan.private_rank = r;
    }
    if let Some(act) = parse_activation(a.activation.as_deref())? {
        plan.activation = act;
    }
    plan.validate().map_err(input)?;
    let w = UnifiedFfnWeights::load(&a.w1, &a.w2).map_err(|e| match e {
        DecomposeError::Shape(_) => analysis(e),
        _ => input(e),
    })?;
    let sub = match &a.report {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display())).map_err(input)?;
            let r: PipelineReport = serde_json::from_slice(&bytes)
                .with_context(|| format!("report {}", p.display()))
                .map_err(input)?;
            Some(r.outcome.subspace)
        }
        None => None,
    };
    let (ffn, diag) = decomposer::assemble(&w, &plan, sub.as_ref()).map_err(decompose_failure)?;
    decomposer::save_ffn(&ffn, Some(&plan), &a.out).map_err(input)?;
    println!(
        "shared: up {}x{}, down {}x{}",
        ffn.shared.up.nrows(),
        ffn.shared.up.ncols(),
        ffn.shared.down.nrows(),
        ffn.shared.down.ncols()
    );
    for (g, b) in ffn.private.iter().enumerate() {
        println!(
            "private {g}: up {}x{}, down {}x{}, product norm {:.6e}",
            b.up.nrows(),
            b.up.ncols(),
            b.down.nrows(),
            b.down.ncols(),
            diag.private_product_norms[g]
        );
    }
    println!(
        "residual norm {:.6e}, tail norm {:.6e}, shared equivalent norm {:.6e}",
        diag.residual_norm, diag.tail_norm, diag.shared_equiv_norm
    );
    for w in &diag.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let total: usize = a.groups.iter().sum();
    if let Some(t) = a.tasks {
        if t != total {
            return Err(input(anyhow!("--tasks {t} does not match group sizes {:?} (sum {total})", a.groups)));
        }
    }
    let activation = parse_activation(Some(&a.activation))?.expect("given");
    let mut cfg = SimConfig {
        group_sizes: a.groups.clone(),
        theta_deg: a.theta,
        spread_deg: a.spread,
        noise: a.target_noise,
        activation,
        seeds: a.seeds.clone(),
        modes: match a.mode {
            ModeArg::Unified => ModeSelect::Unified,
            ModeArg::Specialized => ModeSelect::Specialized,
            ModeArg::Both => ModeSelect::Both,
        },
        pretrain_steps: a.pretrain_steps,
        ..SimConfig::default()
    };
    cfg.train.steps = a.steps;
    cfg.train.lr = a.lr;
    cfg.train.private_lr_mult = a.private_lr_mult;
    cfg.plan.thresholds = parse_thresholds(a.thresholds.as_deref())?;
    cfg.plan.k_groups = a.k_groups.unwrap_or(cfg.plan.k_groups);
    cfg.plan.options.noise_scale = a.noise.unwrap_or(cfg.plan.options.noise_scale);

    let summary = synthbench::simulate(&cfg).map_err(from_synth)?;
    for r in &summary.runs {
        for (tag, log) in [("unified", &r.unified), ("specialized", &r.specialized)] {
            if let Some(l) = log {
                write(&a.out.join(format!("seed{}_{tag}.csv", r.seed)), &l.to_csv())?;
            }
        }
        if let Some(p) = &r.plan {
            write(&a.out.join(format!("seed{}_plan.json", r.seed)), &(p.to_json() + "\n"))?;
        }
        for e in &r.errors {
            eprintln!("seed {}: {e}", r.seed);
        }
    }
    let mut js = serde_json::to_value(&summary).expect("serializable");
    js["flags"] = json!(echoed_flags());
    js["tool_version"] = json!(env!("CARGO_PKG_VERSION"));
    write(&a.out.join("summary.json"), &to_json(&js))?;
    write(&a.out.join("summary.md"), &summary.to_markdown())?;
    write(&a.out.join("summary.csv"), &summary.to_csv())?;
    if let Some(dir) = &a.export {
        export_first_seed(&cfg, dir)?;
    }
    print!("{}", summary.to_markdown());
    Ok(())
}

/// Writes the gradient bundle and probe weights of the first seed so the
/// analysis commands can be run on them directly.
fn export_first_seed(cfg: &SimConfig, dir: &Path) -> CliResult<()> {
    let seed = cfg.seeds[0];
    let suite = synthbench::make_suite(cfg.suite_spec(seed)).map_err(from_synth)?;
    let model = synthbench::ToyModel::new(cfg.dims, cfg.activation, seed).map_err(from_synth)?;
    let bundle = synthbench::collect_bundle(&model, &suite, cfg.gradient_samples, seed).map_err(from_synth)?;
    let bundle_dir = dir.join("bundle");
    gradbundle::write_bundle(&bundle, &bundle_dir).map_err(input)?;
    model
        .probe
        .save(&dir.join("w1.gdm"), &dir.join("w2.gdm"))
        .map_err(input)?;
    Ok(())
}
