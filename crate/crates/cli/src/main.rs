//! `vsp`: command-line harness for the visual spatial projector.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vsp_core::bench::{self, prefill_flops, prefill_ratio};
use vsp_core::config::{self, ConfigError};
use vsp_core::dfi::export_attention;
use vsp_core::gradcheck::{self, GradCheckOptions};
use vsp_core::params::{self, CheckpointError};
use vsp_core::projector::{param_group, ProjectorError};
use vsp_core::suite::{run_invariant_suite, SuiteOptions, GRAD_TOL};
use vsp_core::synth::{gen_synthetic_features, SynthKind};
use vsp_core::train::{toy_train, ToyTask, TrainError};
use vsp_core::vspf::{self, FormatError};
use vsp_core::{Element, PatchGrid, Projector, ProjectorConfig, Tensor, Variant};

#[derive(Debug, Parser)]
#[command(name = "vsp", version, about = "Visual spatial projector harness")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Start from the small test dimensions (8x8x8 grid, 8 spatial, 16 LLM) instead of the defaults.
    #[arg(long, global = true)]
    desk: bool,
    #[arg(long, global = true, value_name = "cropping|pooling")]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[arg(long, global = true)]
    enc_dim: Option<usize>,
    #[arg(long, global = true)]
    spatial_dim: Option<usize>,
    #[arg(long, global = true)]
    llm_dim: Option<usize>,
    #[arg(long, global = true)]
    crop_stride: Option<usize>,
    #[arg(long, global = true)]
    big_kernel: Option<usize>,
    /// Skip detail fusion; spatial tokens go straight to the spatial MLP.
    #[arg(long, global = true)]
    no_dfi: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (stdout when omitted, where text output makes sense).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Compute in 64-bit floats.
    #[arg(long = "f64", global = true)]
    f64: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the invariant suite; exits 1 if any check fails.
    Check {
        /// Random instances per operator oracle.
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
    /// Finite-difference check of every projector parameter (64-bit).
    Gradcheck {
        /// Coordinates probed per parameter (0 probes all).
        #[arg(long, default_value_t = 32)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
    /// Print token accounting for the config.
    Tokens {
        /// Language tokens appended after the visual ones.
        #[arg(long, default_value_t = 0)]
        language: usize,
    },
    /// Run the projector on a VSPF feature file and write the visual tokens.
    Fuse {
        input: PathBuf,
        /// Checkpoint to load instead of seeded initialization.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Toy alignment training; prints `step,loss`.
    TrainToy {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Write the trained parameters as a checkpoint.
        #[arg(long, value_name = "PATH")]
        save_params: Option<PathBuf>,
    },
    /// Write the detail-fusion attention map as CSV.
    DumpAttn {
        /// VSPF feature file; a synthetic grid is used when omitted.
        input: Option<PathBuf>,
        #[arg(long, default_value = "noise")]
        kind: SynthKind,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Prefill cost model and projector wall time.
    Bench {
        #[arg(long, default_value_t = 32)]
        layers: usize,
        /// Token count the config's visual tokens are compared against.
        #[arg(long, default_value_t = 576)]
        baseline: usize,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Only print the analytic model.
        #[arg(long)]
        no_timing: bool,
    },
    /// Write a synthetic feature grid as VSPF.
    ExportSynth {
        #[arg(long, default_value = "noise")]
        kind: SynthKind,
    },
}

/// Error message plus the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

const CHECK: u8 = 1;
const USAGE: u8 = 2;
const IO: u8 = 3;

impl Failure {
    fn usage(error: impl fmt::Display) -> Self {
        Self {
            code: USAGE,
            message: error.to_string(),
        }
    }

    fn io(error: impl fmt::Display) -> Self {
        Self {
            code: IO,
            message: error.to_string(),
        }
    }

    fn check(error: impl fmt::Display) -> Self {
        Self {
            code: CHECK,
            message: error.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::usage(e)
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Self::io(e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Self::io(e)
    }
}

impl From<ProjectorError> for Failure {
    fn from(e: ProjectorError) -> Self {
        match e {
            ProjectorError::Config(_) => Self::usage(e),
            // mismatched feature files or checkpoints
            _ => Self::io(e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NoSteps | TrainError::BadLearningRate(_) | TrainError::EmptyTask => Self::usage(e),
            TrainError::Projector(p) => p.into(),
            _ => Self::check(e),
        }
    }
}

type Result<T, E = Failure> = std::result::Result<T, E>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.config)?;
    let out = cli.config.out.as_deref();
    let wide = cli.config.f64;
    match cli.command {
        Command::Check { cases } => check(&cfg, cases, out),
        Command::Gradcheck { coords, step } => grad_check(&cfg, coords, step, out),
        Command::Tokens { language } => emit(out, &tokens(&cfg, language)),
        Command::Fuse { input, params } => {
            if wide {
                fuse::<f64>(&cfg, &input, params.as_deref(), out)
            } else {
                fuse::<f32>(&cfg, &input, params.as_deref(), out)
            }
        }
        Command::TrainToy {
            steps,
            lr,
            samples,
            save_params,
        } => {
            if wide {
                train::<f64>(&cfg, steps, lr, samples, save_params.as_deref(), out)
            } else {
                train::<f32>(&cfg, steps, lr, samples, save_params.as_deref(), out)
            }
        }
        Command::DumpAttn { input, kind, params } => {
            if wide {
                dump_attn::<f64>(&cfg, input.as_deref(), kind, params.as_deref(), out)
            } else {
                dump_attn::<f32>(&cfg, input.as_deref(), kind, params.as_deref(), out)
            }
        }
        Command::Bench {
            layers,
            baseline,
            iterations,
            warmup,
            no_timing,
        } => {
            let timing = (!no_timing).then_some((warmup, iterations));
            if wide {
                run_bench::<f64>(&cfg, layers, baseline, timing, out)
            } else {
                run_bench::<f32>(&cfg, layers, baseline, timing, out)
            }
        }
        Command::ExportSynth { kind } => {
            let out = out.ok_or_else(|| Failure::usage("export-synth needs --out".to_string()))?;
            if wide {
                export_synth::<f64>(&cfg, kind, out)
            } else {
                export_synth::<f32>(&cfg, kind, out)
            }
        }
    }
}

/// Defaults (or the desk preset), then the config file, then explicit flags.
fn build_config(args: &ConfigArgs) -> Result<ProjectorConfig> {
    let mut cfg = if args.desk {
        ProjectorConfig::desk()
    } else {
        ProjectorConfig::default()
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("reading config {}: {e}", path.display())))?;
        for (k, v) in config::parse_pairs(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    let dims = [
        (&mut cfg.grid, args.grid),
        (&mut cfg.enc_dim, args.enc_dim),
        (&mut cfg.spatial_dim, args.spatial_dim),
        (&mut cfg.llm_dim, args.llm_dim),
        (&mut cfg.crop_stride, args.crop_stride),
        (&mut cfg.big_kernel, args.big_kernel),
    ];
    for (slot, value) in dims {
        if let Some(v) = value {
            *slot = v;
        }
    }
    if args.no_dfi {
        cfg.dfi_enabled = false;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::io(format!("writing {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(Failure::io)
        }
    }
}

fn check(cfg: &ProjectorConfig, cases: usize, out: Option<&Path>) -> Result<()> {
    let opts = SuiteOptions {
        seed: cfg.seed,
        oracle_cases: cases,
        ..SuiteOptions::default()
    };
    let report = run_invariant_suite(cfg, &opts);
    emit(out, &report.to_string())?;
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name).collect();
        Err(Failure::check(format!("failed checks: {}", names.join(", "))))
    }
}

fn grad_check(cfg: &ProjectorConfig, coords: usize, step: f64, out: Option<&Path>) -> Result<()> {
    let proj = Projector::<f64>::init(cfg)?;
    let zp = gen_synthetic_features(SynthKind::Noise, cfg.grid, cfg.enc_dim, cfg.seed).map_err(Failure::usage)?;
    let target = vsp_core::rng::normal(
        &[cfg.visual_token_count(), cfg.llm_dim],
        &mut vsp_core::rng::stream(cfg.seed, "gradcheck.target"),
    )
    .map_err(Failure::usage)?;
    let opts = GradCheckOptions {
        step,
        max_coords: (coords > 0).then_some(coords),
        seed: cfg.seed,
    };
    let report = gradcheck::check_projector(&proj, &zp, &target, opts).map_err(|e| match e {
        gradcheck::GradCheckError::BadStep(_) => Failure::usage(e),
        _ => Failure::check(e),
    })?;
    let mut text = String::from("param\tgroup\tcoords\tmax_rel_error\n");
    for p in &report.params {
        writeln!(text, "{}\t{}\t{}\t{:.6e}", p.name, param_group(&p.name), p.coords, p.max_rel_error).expect("String");
    }
    writeln!(text, "max\t-\t-\t{:.6e}", report.max_rel_error()).expect("String");
    emit(out, &text)?;
    if report.max_rel_error() <= GRAD_TOL {
        Ok(())
    } else {
        Err(Failure::check(format!(
            "max relative error {:.3e} exceeds {GRAD_TOL:e}",
            report.max_rel_error()
        )))
    }
}

fn tokens(cfg: &ProjectorConfig, language: usize) -> String {
    let sizes: Vec<String> = cfg.scale_sizes().iter().map(usize::to_string).collect();
    let mut text = String::new();
    let mut row = |k: &str, v: String| writeln!(text, "{k}\t{v}").expect("String");
    row("variant", cfg.variant.to_string());
    row("scale_sizes", sizes.join(","));
    row("spatial_tokens", cfg.scale_count().to_string());
    row("patch_tokens", cfg.patch_count().to_string());
    row("visual_tokens", cfg.visual_token_count().to_string());
    if cfg.dfi_enabled {
        let side = cfg.big_side();
        row("big_map", format!("{side}x{side}"));
        row("big_tokens", (side * side).to_string());
    }
    row("language_tokens", language.to_string());
    row("sequence_length", (cfg.visual_token_count() + language).to_string());
    text
}

fn load_grid<T: Element>(path: &Path) -> Result<PatchGrid<T>> {
    let t: Tensor<T> =
        vspf::load_features(path).map_err(|e| Failure::io(format!("loading {}: {e} [{}]", path.display(), e.code())))?;
    PatchGrid::from_tensor(t).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn load_projector<T: Element>(cfg: &ProjectorConfig, params: Option<&Path>) -> Result<Projector<T>> {
    match params {
        Some(path) => {
            let store = params::load_checkpoint::<T>(path)?;
            Ok(Projector::with_params(cfg, store)?)
        }
        None => Ok(Projector::init(cfg)?),
    }
}

fn fuse<T: Element>(cfg: &ProjectorConfig, input: &Path, params: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let zp = load_grid::<T>(input)?;
    let proj = load_projector::<T>(cfg, params)?;
    let output = proj.forward(&zp)?;
    let seq = &output.sequence;
    let mut text = format!(
        "spatial_tokens\t{}\npatch_tokens\t{}\nvisual_tokens\t{}\nllm_dim\t{}\n",
        seq.spatial_len(),
        seq.patch_len(),
        seq.visual_len(),
        cfg.llm_dim
    );
    match out {
        Some(path) => {
            vspf::save_features(path, &seq.to_tensor())?;
            writeln!(text, "written\t{}", path.display()).expect("String");
        }
        None => text.push_str("written\t-\n"),
    }
    emit(None, &text)
}

fn train<T: Element>(
    cfg: &ProjectorConfig,
    steps: usize,
    lr: f64,
    samples: usize,
    save_params: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let task = ToyTask::<T>::generate(cfg, samples, cfg.seed)?;
    let (report, proj) = toy_train(cfg, &task, steps, lr)?;
    let mut text = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(text, "{i},{l}").expect("String");
    }
    emit(out, &text)?;
    if let Some(path) = save_params {
        params::save_checkpoint(path, proj.params())?;
    }
    eprintln!(
        "initial {:.6e} final {:.6e} ratio {:.4} rejected {} lr {}",
        report.initial(),
        report.last(),
        report.last() / report.initial(),
        report.rejected,
        report.final_lr
    );
    Ok(())
}

fn dump_attn<T: Element>(
    cfg: &ProjectorConfig,
    input: Option<&Path>,
    kind: SynthKind,
    params: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    if !cfg.dfi_enabled {
        return Err(Failure::usage("attention export needs detail fusion; drop --no-dfi".to_string()));
    }
    let zp = match input {
        Some(path) => load_grid::<T>(path)?,
        None => gen_synthetic_features(kind, cfg.grid, cfg.enc_dim, cfg.seed).map_err(Failure::usage)?,
    };
    let proj = load_projector::<T>(cfg, params)?;
    let output = proj.forward(&zp)?;
    let fusion = output.fusion.expect("fusion enabled");
    emit(out, &export_attention(&fusion).to_csv())
}

fn run_bench<T: Element>(
    cfg: &ProjectorConfig,
    layers: usize,
    baseline: usize,
    timing: Option<(usize, usize)>,
    out: Option<&Path>,
) -> Result<()> {
    if layers == 0 || baseline == 0 {
        return Err(Failure::usage("--layers and --baseline must be positive".to_string()));
    }
    let tokens = cfg.visual_token_count();
    let cost = prefill_flops(tokens, cfg.llm_dim, layers);
    let base = prefill_flops(baseline, cfg.llm_dim, layers);
    let ratio = prefill_ratio(tokens, baseline, cfg.llm_dim, layers);
    let mut text = String::new();
    let mut row = |k: &str, v: String| writeln!(text, "{k}\t{v}").expect("String");
    row("tokens", tokens.to_string());
    row("baseline_tokens", baseline.to_string());
    row("flops", format!("{:.6e}", cost.total()));
    row("baseline_flops", format!("{:.6e}", base.total()));
    row("ratio_linear", format!("{:.6}", ratio.linear));
    row("ratio_quadratic", format!("{:.6}", ratio.quadratic));
    row("ratio_total", format!("{:.6}", ratio.total));
    if let Some((warmup, iterations)) = timing {
        let proj = Projector::<T>::init(cfg)?;
        let zp = gen_synthetic_features(SynthKind::Noise, cfg.grid, cfg.enc_dim, cfg.seed).map_err(Failure::usage)?;
        let t = bench::time_projector(&proj, &zp, warmup, iterations)?;
        row("dtype", T::NAME.to_string());
        row("iterations", t.iterations.to_string());
        row("forward_ms", format!("{:.3}", t.full.as_secs_f64() * 1e3));
        row("spatial_ms", format!("{:.3}", t.spatial.as_secs_f64() * 1e3));
        row("patch_ms", format!("{:.3}", t.patch.as_secs_f64() * 1e3));
        row("spatial_share", format!("{:.4}", t.spatial_share()));
    }
    emit(out, &text)
}

fn export_synth<T: Element>(cfg: &ProjectorConfig, kind: SynthKind, out: &Path) -> Result<()> {
    let zp = gen_synthetic_features::<T>(kind, cfg.grid, cfg.enc_dim, cfg.seed).map_err(Failure::usage)?;
    vspf::save_features(out, zp.tensor())?;
    Ok(())
}
