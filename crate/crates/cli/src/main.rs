use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dclscam::cam::{self, Method, Target, DEFAULT_THRESHOLD};
use dclscam::datakit::{self, Sample};
use dclscam::dcls::Interpolation;
use dclscam::eval::{self, ClassSource, ReportRow, ScoreOptions};
use dclscam::zoo::{self, Arch, Example, Trainer, TrainConfig, ZooError};
use dclscam::Exec;

#[derive(Parser)]
#[command(name = "dclscam", version, about = "DCLS models, Grad-CAM explanations and alignment scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    Gen(GenArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Write a heatmap and overlay for one image.
    Explain(ExplainArgs),
    /// Score heatmap alignment against reference maps.
    Score(ScoreArgs),
    /// Merge score CSVs into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(16..))]
    size: u32,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(2..=5))]
    classes: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Baseline,
    Dcls,
    Starrelu,
    #[value(name = "starrelu_dcls")]
    StarreluDcls,
    Dilated,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Baseline => Arch::Baseline,
            ArchArg::Dcls => Arch::Dcls,
            ArchArg::Starrelu => Arch::StarRelu,
            ArchArg::StarreluDcls => Arch::StarReluDcls,
            ArchArg::Dilated => Arch::Dilated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InterpArg {
    Bilinear,
    Gaussian,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON TrainConfig; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    pos_lr_mult: Option<f32>,
    #[arg(long, value_enum)]
    interp: Option<InterpArg>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    dcls_elements: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of the manifest, taken from its end, held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    /// Per-epoch log; defaults to the checkpoint path with `.train.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gradcam,
    Tgradcam,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gradcam => Method::GradCam,
            MethodArg::Tgradcam => Method::ThresholdGradCam,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Logit,
    Probability,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Logit => Target::Logit,
            TargetArg::Probability => Target::Probability,
        }
    }
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    class: usize,
    #[arg(long, value_enum, default_value = "gradcam")]
    method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    #[arg(long, value_enum, default_value = "logit")]
    target: TargetArg,
    /// Heatmap opacity in the overlay.
    #[arg(long, default_value_t = 0.5)]
    alpha: f32,
    /// Output path stem; `.pgm` and `.png` are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreMethodArg {
    Gradcam,
    Tgradcam,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Label,
    Predicted,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    method: ScoreMethodArg,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    #[arg(long, value_enum, default_value = "all")]
    split: Split,
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    /// Model id in the report; defaults to the checkpoint file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_enum, default_value = "label")]
    class_source: ClassArg,
    #[arg(long, value_enum, default_value = "logit")]
    target: TargetArg,
    /// Gaussian blur sigma for model heatmaps before scoring; 0 is off.
    #[arg(long, default_value_t = 0.0)]
    blur: f64,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Table destination; stderr when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the merged rows as one CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Input and usage problems exit with 2, numerical failures with 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    let diverged = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<ZooError>(), Some(ZooError::Divergence { .. })));
    if diverged {
        3
    } else {
        2
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Head/tail split; the tail `val_frac` of the file order is held out.
fn split(samples: Vec<Sample>, val_frac: f64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&val_frac) {
        bail!("--val-frac {val_frac} outside [0, 1)");
    }
    let n_val = (samples.len() as f64 * val_frac).round() as usize;
    let mut train = samples;
    let val = train.split_off(train.len() - n_val);
    Ok((train, val))
}

fn gen(a: GenArgs) -> Result<()> {
    let summary = datakit::generate_shapes(a.n, a.size as usize, a.classes as usize, a.seed, &a.out)?;
    println!("manifest={}", summary.manifest.display());
    println!("samples={}", a.n);
    let counts: Vec<String> = summary.class_counts.iter().map(usize::to_string).collect();
    println!("class_counts={}", counts.join(","));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.arch {
        cfg.arch = v.into();
    }
    if let Some(v) = a.interp {
        cfg.interp = match v {
            InterpArg::Bilinear => Interpolation::Bilinear,
            InterpArg::Gaussian => Interpolation::Gaussian,
        };
    }
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = a.$f { cfg.$f = v; })*};
    }
    set!(epochs, batch_size, lr, momentum, pos_lr_mult, kernel_size, dcls_elements, seed);

    let samples = datakit::load_dataset(&a.data)?;
    if samples.is_empty() {
        bail!("{} lists no samples", a.data.display());
    }
    let max_label = samples.iter().map(|s| s.label).max().unwrap_or(0);
    if a.config.is_none() {
        cfg.classes = (max_label + 1).max(2);
    } else if max_label >= cfg.classes {
        bail!("label {max_label} does not fit {} configured classes", cfg.classes);
    }
    let (train_set, val_set) = split(samples, a.val_frac)?;
    let train_ex: Vec<Example> = train_set.iter().map(Sample::to_example).collect();
    let val_ex: Vec<Example> = val_set.iter().map(Sample::to_example).collect();

    let exec = exec(a.sequential);
    let mut model = zoo::build(&cfg)?;
    let log = Trainer::new(&mut model, &cfg, exec)?.fit(&train_ex)?;

    zoo::save(&model, Some(&cfg), &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("train.csv"));
    write(&log_path, log.to_csv())?;

    println!("checkpoint={}", a.out.display());
    println!("log={}", log_path.display());
    println!("arch={}", cfg.arch);
    println!("params={}", model.param_count());
    if let Some(last) = log.last() {
        println!("final_loss={:.6}", last.loss);
    }
    println!("train_top1={:.4}", zoo::top1(&model, &train_ex, exec)?);
    if !val_ex.is_empty() {
        println!("val_top1={:.4}", zoo::top1(&model, &val_ex, exec)?);
    }
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let (model, _) = zoo::load(&a.ckpt)?;
    let image = datakit::read_image(&a.image)?;
    let method: Method = a.method.into();
    let result = cam::explain(&model, &image.to_tensor(), a.class, method, a.threshold, a.target.into())?;
    let pgm = a.out.with_extension("pgm");
    let png = a.out.with_extension("png");
    write(&pgm, datakit::write_pgm16(&result.heatmap))?;
    let blended = cam::overlay(&image, &result.heatmap, a.alpha)?;
    write(&png, datakit::encode_png(&blended)?)?;
    println!("heatmap={}", pgm.display());
    println!("overlay={}", png.display());
    println!("method={method}");
    println!("class={}", a.class);
    if method == Method::ThresholdGradCam {
        println!("threshold={}", a.threshold);
    }
    println!("degenerate={}", result.degenerate);
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let (model, _) = zoo::load(&a.ckpt)?;
    let samples = datakit::load_dataset(&a.data)?;
    let samples = match a.split {
        Split::All => samples,
        Split::Train => split(samples, a.val_frac)?.0,
        Split::Val => split(samples, a.val_frac)?.1,
    };
    let name = match a.name {
        Some(n) => n,
        None => a.ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    if name.is_empty() || name.contains([',', '\n']) {
        bail!("model name {name:?} must be non-empty and free of commas");
    }
    let methods = match a.method {
        ScoreMethodArg::Gradcam => vec![Method::GradCam],
        ScoreMethodArg::Tgradcam => vec![Method::ThresholdGradCam],
        ScoreMethodArg::Both => Method::BOTH.to_vec(),
    };
    let opts = ScoreOptions {
        threshold: a.threshold,
        class_source: match a.class_source {
            ClassArg::Label => ClassSource::Label,
            ClassArg::Predicted => ClassSource::Predicted,
        },
        target: a.target.into(),
        blur_sigma: a.blur,
    };
    let reports = eval::score_methods(&model, &name, &samples, &methods, &opts, exec(a.sequential))?;
    let rows: Vec<ReportRow> = reports.iter().map(|r| r.row()).collect();
    write(&a.out, eval::emit_csv(&rows))?;
    for r in &rows {
        println!(
            "model={} method={} top1={:.4} mean_score={:.4} n_images={} n_degenerate={} params={}",
            r.model, r.method, r.top1, r.mean_score, r.n_images, r.n_degenerate, r.params
        );
    }
    println!("csv={}", a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        rows.extend(eval::parse_csv(&text).with_context(|| format!("merging {}", p.display()))?);
    }
    let table = eval::format_table(&rows);
    match &a.out {
        Some(p) => {
            write(p, &table)?;
            println!("table={}", p.display());
        }
        None => eprint!("{table}"),
    }
    if let Some(p) = &a.csv {
        write(p, eval::emit_csv(&rows))?;
        println!("csv={}", p.display());
    }
    println!("rows={}", rows.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Explain(a) => explain(a),
        Command::Score(a) => score(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
