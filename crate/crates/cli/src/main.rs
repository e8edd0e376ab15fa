use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::warn;
use serde::Serialize;

use frod_core::adapter::{count_params, load_frod_checkpoint, AdapterError, FrodSidecar, Scheme};
use frod_core::analysis::{
    angular_identity_residual, hessian_comparison, orthogonality_residual, pdof_vote, split_update,
    verify_decomposition, weyl_check, AnalysisError, AnalysisReport, HessianScheme, PdofScheme,
};
use frod_core::decomp::{
    hjd_decompose, AggregationMode, DecompError, JointDecomposition, LayerError,
};
use frod_core::landscape::{run_landscape, LandscapeConfig, LandscapeError};
use frod_core::linalg::{LinalgError, Matrix};
use frod_core::rng::{derive_seed, SplitMix64};
use frod_core::tensorio::{
    generate_synthetic_stack, read_container, stack_from_container, stack_to_container,
    write_container, StackDistribution, TensorError,
};
use frod_core::train::{
    ablation_sweep, train_run_full, write_run_outputs, SweepConfig, TrainConfig, TrainError,
};

/// Tolerance for `decompose`: reconstruction error relative to `max|W|`.
const DECOMPOSE_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(
    name = "frod",
    version,
    about = "Joint latent-basis decomposition and sparse rotational adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic weight stack.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        cats: usize,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "gaussian")]
        dist: StackDistribution,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose a stack into a shared basis and per-layer factors.
    Decompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = frod_core::decomp::DEFAULT_PI)]
        pi: f64,
        #[arg(long, default_value = "blockwise")]
        mode: AggregationMode,
        /// JSON report (default: OUT with a .json extension).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Audit spectral bounds and update geometry on a decomposition.
    Verify {
        #[arg(long)]
        dec: PathBuf,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// FRoD adapter checkpoint to audit as well (needs --side).
        #[arg(long, requires = "side")]
        adapter: Option<PathBuf>,
        #[arg(long, requires = "adapter")]
        side: Option<PathBuf>,
        /// JSON report (default: DEC with a .verify.json extension).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Warm-start, attach adapters and train on a synthetic task.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides out_dir in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid over density and learning rates, several seeds each.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// CSV path; a JSON copy goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss surface around a trained adapter.
    Landscape {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for landscape.csv and landscape.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form parameter and optimizer-state counts.
    Params {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long = "L", default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        r: usize,
        #[arg(long, default_value_t = 0.0)]
        s: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Numerical rank of the update Jacobian (majority over seeds).
    Pdof {
        #[arg(long)]
        scheme: PdofScheme,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        r: usize,
        /// Number of seeds to vote over.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference vs block-form Hessian of the quadratic adapter model.
    Hessian {
        #[arg(long)]
        scheme: HessianScheme,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Rescale A to this squared Frobenius norm.
        #[arg(long)]
        a_frob2: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Exit code plus diagnostic.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn validation(msg: impl Into<String>) -> Self {
        Self {
            code: 1,
            msg: msg.into(),
        }
    }

    fn numerical(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 3,
            msg: format!("{}: {e}", path.display()),
        }
    }
}

fn linalg_code(e: &LinalgError) -> u8 {
    match e {
        LinalgError::Dimension(_) => 1,
        _ => 2,
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::Io { .. } => 3,
        _ => 1,
    }
}

fn decomp_code(e: &DecompError) -> u8 {
    match e {
        DecompError::Shape(_) | DecompError::NonPositivePi(_) | DecompError::Index(_) => 1,
        DecompError::ZeroColumn { .. } => 2,
        DecompError::Linalg(e) => linalg_code(e),
        DecompError::Tensor(e) => tensor_code(e),
    }
}

fn adapter_code(e: &AdapterError) -> u8 {
    match e {
        AdapterError::NonFinite
        | AdapterError::DiagonalSupport(_)
        | AdapterError::InvalidSupport(_) => 2,
        AdapterError::Linalg(e) => linalg_code(e),
        AdapterError::Tensor(e) => tensor_code(e),
        AdapterError::Decomp(e) => decomp_code(e),
        _ => 1,
    }
}

fn csv_code(e: &csv::Error) -> u8 {
    if matches!(e.kind(), csv::ErrorKind::Io(_)) {
        3
    } else {
        1
    }
}

fn analysis_code(e: &AnalysisError) -> u8 {
    match e {
        AnalysisError::BoundExceeded { .. }
        | AnalysisError::ZeroUpdate
        | AnalysisError::ZeroOnAxis
        | AnalysisError::NonFiniteLoss(_) => 2,
        AnalysisError::UndefinedProxy | AnalysisError::TooLarge(_) | AnalysisError::Invalid(_) => 1,
        AnalysisError::Linalg(e) => linalg_code(e),
        AnalysisError::Adapter(e) => adapter_code(e),
        AnalysisError::Decomp(e) => decomp_code(e),
        AnalysisError::Csv(e) => csv_code(e),
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) | TrainError::StepOutOfRange { .. } | TrainError::Json(_) => 1,
        TrainError::NonFiniteGradient => 2,
        TrainError::Io { .. } => 3,
        TrainError::Adapter(e) => adapter_code(e),
        TrainError::Decomp(e) => decomp_code(e),
        TrainError::Tensor(e) => tensor_code(e),
        TrainError::Csv(e) => csv_code(e),
    }
}

fn landscape_code(e: &LandscapeError) -> u8 {
    match e {
        LandscapeError::TooFewCheckpoints(_)
        | LandscapeError::Ragged { .. }
        | LandscapeError::Grid(_)
        | LandscapeError::Blocks { .. } => 1,
        LandscapeError::Degenerate | LandscapeError::Eval(_) => 2,
        LandscapeError::Linalg(e) => linalg_code(e),
        LandscapeError::Csv(e) => csv_code(e),
        LandscapeError::Train(e) => train_code(e),
    }
}

macro_rules! classify {
    ($($ty:ty => $f:ident),* $(,)?) => {
        $(impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Self { code: $f(&e), msg: e.to_string() }
            }
        })*
    };
}

classify! {
    LinalgError => linalg_code,
    TensorError => tensor_code,
    DecompError => decomp_code,
    AdapterError => adapter_code,
    AnalysisError => analysis_code,
    TrainError => train_code,
    LandscapeError => landscape_code,
}

type CmdResult = Result<String, Failure>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Failure::numerical(e.to_string()))?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::io(path, e))
}

fn cmd_gen(
    seed: u64,
    cats: usize,
    layers: usize,
    m: usize,
    n: usize,
    dist: StackDistribution,
    out: &Path,
) -> CmdResult {
    let stack = generate_synthetic_stack(seed, cats, layers, m, n, dist)?;
    write_container(out, &stack_to_container(&stack)?)?;
    Ok(format!(
        "wrote {} ({cats} categories x {layers} layers, {m}x{n})",
        out.display()
    ))
}

#[derive(Serialize)]
struct DecomposeReport {
    pi: f64,
    mode: AggregationMode,
    categories: Vec<String>,
    layers_per_category: usize,
    m: usize,
    n: usize,
    max_abs_weight: f64,
    max_error: f64,
    relative_error: f64,
    tolerance: f64,
    pass: bool,
    degenerate: bool,
    z_orthogonality_error: f64,
    eigenvalues: Vec<f64>,
    layers: Vec<LayerError>,
}

fn cmd_decompose(
    input: &Path,
    out: &Path,
    pi: f64,
    mode: AggregationMode,
    report: Option<PathBuf>,
) -> CmdResult {
    if !(pi > 0.0 && pi.is_finite()) {
        return Err(Failure::validation(format!(
            "--pi must be positive and finite, got {pi}"
        )));
    }
    let stack = stack_from_container(&read_container(input)?)?;
    let (m, n) = stack.validate()?;
    let dec = hjd_decompose(&stack, pi, mode)?;
    let errors = dec.reconstruction_errors(&stack)?;
    let max_error = errors.iter().fold(0.0f64, |a, e| a.max(e.max_abs_error));
    let wmax = stack.max_abs();
    let relative = if wmax > 0.0 {
        max_error / wmax
    } else {
        max_error
    };
    let degenerate = dec.is_degenerate();
    if degenerate {
        warn!("aggregated matrix is a multiple of the identity; the shared basis is arbitrary");
    }
    let rep = DecomposeReport {
        pi,
        mode,
        categories: stack.categories.iter().map(|c| c.label.clone()).collect(),
        layers_per_category: stack.categories[0].layers.len(),
        m,
        n,
        max_abs_weight: wmax,
        max_error,
        relative_error: relative,
        tolerance: DECOMPOSE_TOL,
        pass: relative <= DECOMPOSE_TOL,
        degenerate,
        z_orthogonality_error: dec.z_orthogonality_error(),
        eigenvalues: dec.eigvals.clone(),
        layers: errors,
    };
    let report = report.unwrap_or_else(|| out.with_extension("json"));
    write_container(out, &dec.to_container()?)?;
    write_json(&report, &rep)?;
    let line = format!(
        "max_error={:.3e} relative={:.3e} degenerate={} report={}",
        max_error,
        relative,
        degenerate,
        report.display()
    );
    if !rep.pass {
        return Err(Failure::numerical(format!(
            "reconstruction error {relative:.3e} exceeds {DECOMPOSE_TOL:e} of max|W|; {line}"
        )));
    }
    Ok(line)
}

#[derive(Serialize)]
struct AdapterLayerAudit {
    name: String,
    nnz: usize,
    weyl_max_dev: f64,
    spec_norm_s: f64,
    sparse_bound: f64,
    weyl_pass: bool,
    latent_residual: f64,
    ambient_residual: f64,
    angular_residual: Option<f64>,
    alpha: f64,
}

#[derive(Serialize)]
struct VerifyReport {
    trials: usize,
    seed: u64,
    decomposition: AnalysisReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    adapter: Option<Vec<AdapterLayerAudit>>,
    pass: bool,
}

fn audit_adapter(ckpt: &Path, side: &Path) -> Result<Vec<AdapterLayerAudit>, Failure> {
    let container = read_container(ckpt)?;
    let side: FrodSidecar = serde_json::from_str(&read_text(side)?)
        .map_err(|e| Failure::validation(format!("{}: {e}", side.display())))?;
    let layers = load_frod_checkpoint(&container, &side).map_err(|e| match e {
        AdapterError::DiagonalSupport(i) => Failure::numerical(format!(
            "diagonal support: entry ({i}, {i}) in the sparse rotation"
        )),
        e => e.into(),
    })?;
    layers
        .iter()
        .map(|(name, l)| {
            let w = weyl_check(&l.sigma, &l.s, l.s.max_abs())?;
            let split = split_update(l);
            let orth = orthogonality_residual(&split, &l.u, &l.vt);
            Ok(AdapterLayerAudit {
                name: name.clone(),
                nnz: l.s.nnz(),
                weyl_max_dev: w.max_dev,
                spec_norm_s: w.spec_norm_s,
                sparse_bound: w.sparse_bound,
                weyl_pass: w.pass,
                latent_residual: orth.latent,
                ambient_residual: orth.ambient,
                angular_residual: angular_identity_residual(&split).ok(),
                alpha: split.alpha,
            })
        })
        .collect()
}

fn cmd_verify(
    dec_path: &Path,
    trials: usize,
    seed: u64,
    adapter: Option<(PathBuf, PathBuf)>,
    report: Option<PathBuf>,
) -> CmdResult {
    if trials == 0 {
        return Err(Failure::validation("--trials must be at least 1"));
    }
    let dec = JointDecomposition::from_container(&read_container(dec_path)?)?;
    let decomposition = verify_decomposition(&dec, trials, seed)?;
    let adapter = adapter.map(|(c, s)| audit_adapter(&c, &s)).transpose()?;
    let adapter_ok = adapter.as_ref().is_none_or(|layers| {
        layers.iter().all(|l| {
            l.weyl_pass && l.latent_residual == 0.0 && l.angular_residual.is_none_or(|r| r <= 1e-10)
        })
    });
    let rep = VerifyReport {
        trials,
        seed,
        pass: decomposition.pass && adapter_ok,
        decomposition,
        adapter,
    };
    let report = report.unwrap_or_else(|| dec_path.with_extension("verify.json"));
    write_json(&report, &rep)?;
    let line = format!(
        "trials={} violations={} pass={} report={}",
        rep.decomposition.weyl.trials,
        rep.decomposition.weyl.violations,
        rep.pass,
        report.display()
    );
    if !rep.pass {
        let mut why = rep.decomposition.failures.join("; ");
        if !adapter_ok {
            why.push_str(" adapter invariants failed");
        }
        return Err(Failure::numerical(format!(
            "verification failed: {why}; {line}"
        )));
    }
    Ok(line)
}

fn cmd_train(config: &Path, out: Option<PathBuf>) -> CmdResult {
    let cfg = TrainConfig::from_json(&read_text(config)?)?;
    let dir = out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Failure::validation("no output directory: pass --out or set out_dir"))?;
    let outcome = train_run_full(&cfg)?;
    create_dir(&dir)?;
    write_run_outputs(&dir, &outcome)?;
    let r = &outcome.report;
    let last = r.final_epoch();
    let line = format!(
        "scheme={} trainable={} epochs={} loss={:.6} acc={:.4} report={}",
        r.scheme,
        r.trainable,
        last.epoch,
        last.train_loss,
        last.eval_acc,
        dir.join("report.json").display()
    );
    if r.diverged {
        return Err(Failure::numerical(format!(
            "training diverged (non-finite loss); {line}"
        )));
    }
    Ok(line)
}

fn cmd_sweep(config: &Path, out: &Path) -> CmdResult {
    let cfg = SweepConfig::from_json(&read_text(config)?)?;
    let result = ablation_sweep(&cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let file = fs::File::create(out).map_err(|e| Failure::io(out, e))?;
    result.write_csv(file)?;
    write_json(&out.with_extension("json"), &result)?;
    let line = format!(
        "runs={} configs={} diverged={} csv={}",
        result.rows.len(),
        result.medians.len(),
        result.diverged_runs,
        out.display()
    );
    if result.diverged_runs > 0 {
        return Err(Failure::numerical(format!(
            "{} runs diverged; {line}",
            result.diverged_runs
        )));
    }
    Ok(line)
}

fn cmd_landscape(config: &Path, out: &Path) -> CmdResult {
    let cfg = LandscapeConfig::from_json(&read_text(config)?)?;
    let run = run_landscape(&cfg)?;
    create_dir(out)?;
    let csv_path = out.join("landscape.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Failure::io(&csv_path, e))?;
    run.grid.write_csv(file)?;
    write_json(&out.join("landscape.json"), &run.summary)?;
    Ok(format!(
        "directions={} center_loss={:.6} curvature=({:.4}, {:.4}) nonfinite={} csv={}",
        run.summary.directions,
        run.summary.center_loss,
        run.summary.curvature.alpha,
        run.summary.curvature.beta,
        run.summary.nonfinite_cells,
        csv_path.display()
    ))
}

fn cmd_params(
    scheme: Scheme,
    m: usize,
    n: usize,
    layers: usize,
    r: usize,
    s: f64,
    report: Option<PathBuf>,
) -> CmdResult {
    let c = count_params(scheme, m, n, layers, r, s)?;
    if let Some(p) = report {
        write_json(&p, &c)?;
    }
    Ok(format!(
        "weights={} trainable={} states={}",
        c.weights_total, c.trainable, c.optimizer_states
    ))
}

fn cmd_pdof(
    scheme: PdofScheme,
    m: usize,
    n: usize,
    r: usize,
    seeds: usize,
    seed: u64,
    report: Option<PathBuf>,
) -> CmdResult {
    if seeds == 0 {
        return Err(Failure::validation("--seeds must be at least 1"));
    }
    let list: Vec<u64> = (0..seeds as u64).map(|i| derive_seed(seed, i)).collect();
    let rep = pdof_vote(scheme, m, n, r, &list)?;
    if !rep.matches_formula {
        warn!(
            "measured rank {} differs from the hypothesis {} (ranks per seed: {:?})",
            rep.majority, rep.formula, rep.ranks
        );
    }
    if let Some(p) = report {
        write_json(&p, &rep)?;
    }
    Ok(rep.majority.to_string())
}

#[allow(clippy::too_many_arguments)]
fn cmd_hessian(
    scheme: HessianScheme,
    m: usize,
    n: usize,
    r: usize,
    lambda: f64,
    eps: f64,
    a_frob2: Option<f64>,
    seed: u64,
    report: Option<PathBuf>,
) -> CmdResult {
    if m == 0 || n == 0 {
        return Err(Failure::validation("--m and --n must be positive"));
    }
    let mut rng = SplitMix64::new(derive_seed(seed, 0));
    let w = Matrix::from_fn(m, n, |_, _| rng.normal());
    let rep = hessian_comparison(scheme, &w, r, lambda, eps, seed, a_frob2)?;
    if let Some(p) = report {
        write_json(&p, &rep)?;
    }
    Ok(format!(
        "tau_dot={} tau_fd={} block_rel_error={:.3e}",
        rep.tau_analytic, rep.tau_fd, rep.block_rel_error
    ))
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Gen {
            seed,
            cats,
            layers,
            m,
            n,
            dist,
            out,
        } => cmd_gen(seed, cats, layers, m, n, dist, &out),
        Command::Decompose {
            input,
            out,
            pi,
            mode,
            report,
        } => cmd_decompose(&input, &out, pi, mode, report),
        Command::Verify {
            dec,
            trials,
            seed,
            adapter,
            side,
            report,
        } => cmd_verify(&dec, trials, seed, adapter.zip(side), report),
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Sweep { config, out } => cmd_sweep(&config, &out),
        Command::Landscape { config, out } => cmd_landscape(&config, &out),
        Command::Params {
            scheme,
            m,
            n,
            layers,
            r,
            s,
            report,
        } => cmd_params(scheme, m, n, layers, r, s, report),
        Command::Pdof {
            scheme,
            m,
            n,
            r,
            seeds,
            seed,
            report,
        } => cmd_pdof(scheme, m, n, r, seeds, seed, report),
        Command::Hessian {
            scheme,
            m,
            n,
            r,
            lambda,
            eps,
            a_frob2,
            seed,
            report,
        } => cmd_hessian(scheme, m, n, r, lambda, eps, a_frob2, seed, report),
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("FROD_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| {
            Failure::validation(format!(
                "FROD_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::validation(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| run(cli));
    match result {
        Ok(line) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{line}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
