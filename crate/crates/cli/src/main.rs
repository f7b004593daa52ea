//! `vmq`: generate toy models and data, calibrate, evaluate, analyze and
//! benchmark quantized models.
//!
//! Every command prints `key value` report lines on stdout. On failure a
//! single line `error kind=<kind> message=<text>` goes to stderr and the
//! process exits with status 1 (2 for usage errors).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vmq::exec::{export_recipe, import_recipe_for, Ablation, ExecOptions, QuantizedModel};
use vmq::insight::{
    analyze_layers, bench_latency, fidelity_metrics, reports_csv, BenchConfig, BenchMode, BENCH_CSV_HEADER,
    DEFAULT_OUTLIER_K, FIDELITY_CSV_HEADER,
};
use vmq::jlss::{calibrate, Bits, Hyper, Method};
use vmq::model::{
    gen_calibration_set, linear_paths, load_model, load_samples, make_pathological_model, random_model, save_model,
    save_samples, ModelSpec, PathologySpec, CALIB_SEED, DEFAULT_CALIB_COUNT, DEFAULT_EVAL_COUNT, EVAL_SEED,
    SHIPPED_MODEL_SEED,
};
use vmq::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "vmq", version, about = "Post-training quantization for toy selective state-space vision models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model plus calibration and evaluation sets.
    Gen(GenArgs),
    /// Calibrate a quantization recipe.
    Calibrate(CalibrateArgs),
    /// Compare quantized logits against the float model.
    Eval(EvalArgs),
    /// Activation-distribution reports for linear-layer inputs.
    Analyze(AnalyzeArgs),
    /// Median latency of whole-model forwards over a batch.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Tiny,
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathologyKind {
    Shipped,
    Benign,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = SHIPPED_MODEL_SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value = "tiny")]
    size: Size,
    #[arg(long, value_enum, default_value = "shipped")]
    pathology: PathologyKind,
    #[arg(long, default_value_t = DEFAULT_CALIB_COUNT)]
    calib_count: usize,
    #[arg(long, default_value_t = CALIB_SEED)]
    calib_seed: u64,
    #[arg(long, default_value_t = DEFAULT_EVAL_COUNT)]
    eval_count: usize,
    #[arg(long, default_value_t = EVAL_SEED)]
    eval_seed: u64,
    /// Output directory; receives model.vmq (+ model.toml), calib.vmq and eval.vmq.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Minmax,
    Smoothquant,
    #[value(name = "pts_grid")]
    PtsGrid,
    Ptq4vm,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Minmax => Method::Minmax,
            MethodArg::Smoothquant => Method::Smoothquant,
            MethodArg::PtsGrid => Method::PtsGrid,
            MethodArg::Ptq4vm => Method::Ptq4vm,
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// fp, w8a8, w6a6 or w4a4.
    #[arg(long)]
    bits: String,
    #[arg(long, value_enum, default_value = "ptq4vm")]
    method: MethodArg,
    /// TOML file with any of the hyperparameter fields; flags below win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr_s: Option<f32>,
    #[arg(long)]
    lr_q: Option<f32>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    None,
    Hstate,
    Clsfp,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    recipe: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    ablate: AblateArg,
    /// Also write the metrics as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Layer path such as blocks.0.out_proj; repeat for several, omit for all.
    #[arg(long)]
    layer: Vec<String>,
    /// Outlier threshold as a multiple of the median channel magnitude.
    #[arg(long, default_value_t = DEFAULT_OUTLIER_K)]
    k: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Required for quantized modes; a recipe calibrated in another
    /// activation mode is converted.
    #[arg(long)]
    recipe: Option<PathBuf>,
    /// fp, per_tensor_static, pts or per_token_dynamic.
    #[arg(long, default_value = "pts")]
    mode: String,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Inputs to draw the batch from; synthetic images when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn patches(path: &Path) -> Result<Vec<Tensor<f32>>> {
    Ok(load_samples(path)?.into_iter().map(|s| s.patches).collect())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = match a.size {
        Size::Tiny => ModelSpec::tiny(),
        Size::Small => ModelSpec::small(),
    };
    let model = match a.pathology {
        PathologyKind::Shipped => make_pathological_model(&spec, &PathologySpec::shipped(spec.seq_len()), a.seed)?,
        PathologyKind::Benign => random_model(&spec, a.seed)?,
    };
    fs::create_dir_all(&a.out)?;
    let model_path = a.out.join("model.vmq");
    save_model(&model, &model_path)?;
    save_samples(&gen_calibration_set(a.calib_seed, a.calib_count, &spec)?, a.out.join("calib.vmq"))?;
    save_samples(&gen_calibration_set(a.eval_seed, a.eval_count, &spec)?, a.out.join("eval.vmq"))?;
    println!("model {}", model_path.display());
    println!("calib {} samples {}", a.out.join("calib.vmq").display(), a.calib_count);
    println!("eval {} samples {}", a.out.join("eval.vmq").display(), a.eval_count);
    Ok(())
}

fn hyper(a: &CalibrateArgs) -> Result<Hyper> {
    let mut h = match &a.config {
        Some(p) => Hyper::from_toml(&fs::read_to_string(p)?)?,
        None => Hyper::default(),
    };
    if let Some(v) = a.lr_s {
        h.lr_s = v;
    }
    if let Some(v) = a.lr_q {
        h.lr_q = v;
    }
    if let Some(v) = a.alpha {
        h.alpha = v;
    }
    if let Some(v) = a.epochs {
        h.epochs = Some(v);
    }
    if let Some(v) = a.batch_size {
        h.batch_size = v;
    }
    if let Some(v) = a.seed {
        h.seed = v;
    }
    h.validate()?;
    Ok(h)
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let bits = Bits::parse(&a.bits)?;
    if !matches!(bits.w, 4 | 6 | 8 | 32) || bits.w != bits.a {
        return Err(Error::Config(format!("--bits must be fp, w8a8, w6a6 or w4a4, got `{}`", a.bits)));
    }
    let h = hyper(&a)?;
    let model = load_model(&a.model)?;
    let calib = patches(&a.calib)?;
    let (recipe, report) = calibrate(&model, &calib, bits, &h, a.method.into())?;
    export_recipe(&recipe, &a.out)?;
    println!("recipe {}", a.out.display());
    println!("method {} bits {} mode {}", Method::from(a.method).name(), bits.label(), recipe.mode.name());
    for (i, b) in report.blocks.iter().enumerate() {
        println!(
            "block {i} initial_loss {:.6e} final_loss {:.6e} best_epoch {}",
            b.initial_loss,
            b.final_loss,
            b.best_epoch.map_or_else(|| "none".to_string(), |e| e.to_string())
        );
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let recipe = import_recipe_for(&a.recipe, &model)?;
    let data = patches(&a.data)?;
    let ablation = match a.ablate {
        AblateArg::None => Ablation::None,
        AblateArg::Hstate => Ablation::HiddenStateOnly,
        AblateArg::Clsfp => Ablation::ClsFp,
    };
    let fp = data.iter().map(|x| model.forward(x)).collect::<Result<Vec<_>>>()?;
    let qm = QuantizedModel::new(&model, &recipe, ExecOptions::from_recipe(&recipe, ablation))?;
    let f = fidelity_metrics(&fp, &qm.forward_batch(&data)?)?;
    println!("{}", f.to_text());
    if let Some(out) = &a.out {
        write(out, &format!("{FIDELITY_CSV_HEADER}\n{}\n", f.to_csv_row()))?;
    }
    Ok(())
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = patches(&a.data)?;
    let layers = if a.layer.is_empty() { linear_paths(&model) } else { a.layer.clone() };
    let reports = analyze_layers(&model, &data, &layers, a.k)?;
    for r in &reports {
        print!("{}", r.to_text());
    }
    if let Some(out) = &a.out {
        write(out, &reports_csv(&reports))?;
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let mode = BenchMode::parse(&a.mode).ok_or_else(|| {
        Error::Config(format!("--mode must be fp, per_tensor_static, pts or per_token_dynamic, got `{}`", a.mode))
    })?;
    if a.batch == 0 {
        return Err(Error::Config("--batch must be >= 1".into()));
    }
    let model = load_model(&a.model)?;
    let recipe = match (&a.recipe, mode) {
        (Some(p), BenchMode::Quant(m)) => {
            let r = import_recipe_for(p, &model)?;
            if r.mode == m || r.is_float() {
                r
            } else {
                r.with_mode(m)?
            }
        }
        (Some(p), BenchMode::Fp) => import_recipe_for(p, &model)?,
        (None, BenchMode::Fp) => {
            let calib = gen_calibration_set(CALIB_SEED, 1, &model.spec)?.into_iter().map(|s| s.patches).collect::<Vec<_>>();
            calibrate(&model, &calib, Bits::FLOAT, &Hyper::default(), Method::Minmax)?.0
        }
        (None, BenchMode::Quant(_)) => return Err(Error::Config("quantized modes need --recipe".into())),
    };
    let pool = match &a.data {
        Some(p) => patches(p)?,
        None => gen_calibration_set(EVAL_SEED, a.batch, &model.spec)?.into_iter().map(|s| s.patches).collect(),
    };
    let batch: Vec<_> = pool.iter().cycle().take(a.batch).cloned().collect();
    let cfg = BenchConfig {
        warmup: a.warmup,
        reps: a.reps,
        threads: a.threads,
        ..BenchConfig::default()
    };
    let res = bench_latency(&model, &recipe, mode, &batch, &cfg)?;
    println!("{}", res.to_text());
    if let Some(out) = &a.out {
        write(out, &format!("{BENCH_CSV_HEADER}\n{}\n", res.to_csv_row()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    vmq::init_threads()?;
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage message={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
