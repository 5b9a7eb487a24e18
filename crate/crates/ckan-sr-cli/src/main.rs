//! `ckan-sr`: one entry point for the whole pipeline — dataset synthesis
//! and degradation, both training stages, inference, evaluation, cost
//! benchmarking, and the runtime oracle suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

mod settings;

use ckan_sr::bench::{report_table, run_bench, BenchConfig};
use ckan_sr::ckan::CkanError;
use ckan_sr::data::{
    bicubic_resample, degrade, load_manifest, load_ppm, save_ppm, synthetic_image, write_manifest,
    DataError, DegradeConfig, ImageBuffer, ManifestEntry,
};
use ckan_sr::metrics::{evaluate_set, report_to_csv, MetricError, MetricRow};
use ckan_sr::models::ModelError;
use ckan_sr::objectives::PerceptualExtractor;
use ckan_sr::selftest::{run_selftest, SelftestOptions};
use ckan_sr::tensor::no_grad;
use ckan_sr::train::{
    adversarial_train, checkpoint_load, log_to_jsonl, pretrain, Checkpoint, Dataset, Stage,
    TrainError, TrainRun,
};
use clap::{Args, Parser, Subcommand};
use settings::Settings;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys, or values: exit 2.
    Usage(String),
    /// Failures after a valid invocation (I/O, training aborts): exit 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(DataError, TrainError, ModelError, MetricError, CkanError, std::io::Error);

#[derive(Parser)]
#[command(
    name = "ckan-sr",
    version,
    about = "Super-resolution with spline-based patch operators"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic HR dataset plus manifest
    Synth(SynthArgs),
    /// Downscale every manifest image and write an hr/lr manifest
    Degrade(DegradeArgs),
    /// Content pretraining stage
    Pretrain(TrainArgs),
    /// Adversarial fine-tuning stage (requires a pretrained checkpoint)
    Gan(GanArgs),
    /// Upscale images with a trained checkpoint
    Infer(InferArgs),
    /// Evaluate image pairs or compare checkpoints on a manifest
    Eval(EvalArgs),
    /// Measure operator cost counters against the closed-form model
    Bench(BenchArgs),
    /// Run the named runtime oracle checks
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of images
    #[arg(long, default_value_t = 8)]
    n: u64,
    /// Square image side in pixels
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DegradeArgs {
    /// Manifest of HR images
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for LR images and the new manifest
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Gaussian blur sigma before downsampling
    #[arg(long)]
    blur_sigma: Option<f64>,
    /// Additive Gaussian noise sigma after downsampling
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of training HR images
    #[arg(long)]
    manifest: PathBuf,
    /// Manifest of held-out validation HR images
    #[arg(long)]
    val_manifest: PathBuf,
    /// Output directory for checkpoints and the JSONL log
    #[arg(long)]
    out: PathBuf,
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue a previous run of this stage from its checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GanArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Pretrained checkpoint to initialize from
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input LR image (PPM)
    #[arg(long, value_name = "PPM")]
    input: PathBuf,
    /// Output SR image (PPM)
    #[arg(long, value_name = "PPM")]
    out: PathBuf,
    /// Band size in output pixels for the memory-bounded forward pass
    #[arg(long)]
    chunk: Option<usize>,
    /// Also write the bicubic upscale next to the output
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest: `hr<TAB>candidate` pairs, or HR-only when comparing models
    #[arg(long)]
    manifest: PathBuf,
    /// Compare a checkpoint, repeatable; NAME=CKPT
    #[arg(long = "model", value_name = "NAME=CKPT")]
    models: Vec<String>,
    /// Add a bicubic-upscale comparison row (model mode)
    #[arg(long)]
    baseline: bool,
    /// Upscale factor for the baseline row when no model is given
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Write the per-image CSV here (suffixed per model in model mode)
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    chunk: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Kernel sizes to sweep, comma-separated
    #[arg(long, default_value = "1,3,5")]
    kernels: String,
    /// Output channel counts to sweep, comma-separated
    #[arg(long, default_value = "4,8")]
    channels: String,
    /// Square input side
    #[arg(long, default_value_t = 24)]
    size: usize,
    /// Band sizes to sweep, comma-separated
    #[arg(long, default_value = "1,4,16,64,256,1024")]
    chunks: String,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct SelftestArgs {
    /// Run only checks whose name contains this substring
    #[arg(long)]
    filter: Option<String>,
    /// Corrupt the operator output inside the convolution check (negative
    /// control: the run must fail)
    #[arg(long)]
    break_fold: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Degrade(a) => cmd_degrade(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Gan(a) => cmd_gan(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Selftest(a) => cmd_selftest(a),
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&a.out)?;
    let mut entries = Vec::with_capacity(a.n as usize);
    for i in 0..a.n {
        let img = synthetic_image(i, a.size, a.size, a.seed);
        let path = a.out.join(format!("synth-{i:03}.ppm"));
        save_ppm(&path, &img)?;
        entries.push(ManifestEntry { hr: path, lr: None });
    }
    let manifest = a.out.join("manifest.txt");
    std::fs::write(&manifest, write_manifest(&entries))?;
    println!("wrote {} images and {}", a.n, manifest.display());
    Ok(())
}

fn cmd_degrade(a: DegradeArgs) -> Result<(), CliError> {
    if a.scale < 2 {
        return Err(CliError::Usage(format!("scale {} must be at least 2", a.scale)));
    }
    let entries = load_manifest(&a.manifest)?;
    std::fs::create_dir_all(&a.out)?;
    let mut out_entries = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let hr = load_ppm(&e.hr)?;
        if hr.height % a.scale != 0 || hr.width % a.scale != 0 {
            return Err(CliError::Usage(format!(
                "{}: {}x{} is not divisible by scale {}",
                e.hr.display(),
                hr.height,
                hr.width,
                a.scale
            )));
        }
        let cfg = DegradeConfig {
            scale: a.scale,
            blur_sigma: a.blur_sigma,
            noise_std: a.noise_std,
            seed: a.seed.wrapping_add(i as u64),
        };
        let lr = degrade(&hr, &cfg)?;
        let lr_path = a.out.join(format!("{}-x{}.ppm", file_stem(&e.hr), a.scale));
        save_ppm(&lr_path, &lr)?;
        out_entries.push(ManifestEntry {
            hr: e.hr.clone(),
            lr: Some(lr_path),
        });
    }
    let manifest = a.out.join("manifest.txt");
    std::fs::write(&manifest, write_manifest(&out_entries))?;
    println!("wrote {} LR images and {}", out_entries.len(), manifest.display());
    Ok(())
}

fn load_hr_set(manifest: &Path) -> Result<Vec<ImageBuffer>, CliError> {
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: manifest lists no images",
            manifest.display()
        )));
    }
    entries.iter().map(|e| Ok(load_ppm(&e.hr)?)).collect()
}

fn finish_stage(
    out_dir: &Path,
    log_name: &str,
    run: &TrainRun,
    echo: &[String],
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(log_name);
    std::fs::write(&log_path, log_to_jsonl(&run.log))?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    for line in echo {
        println!("config: {line}");
    }
    let last_val = run.log.iter().rev().find(|r| r.step.is_none());
    if let Some(v) = last_val {
        println!(
            "final validation: psnr_y = {:.4}, msssim_y = {:.4}, perc_dist = {:.6}",
            v.psnr_y.unwrap_or(f64::NAN),
            v.msssim_y.unwrap_or(f64::NAN),
            v.perc_dist.unwrap_or(f64::NAN)
        );
    }
    println!(
        "log: {}; checkpoints: {} and {}",
        log_path.display(),
        out_dir.join("latest.ckpt").display(),
        out_dir.join("best.ckpt").display()
    );
    Ok(())
}

fn stage_setup(
    a: &TrainArgs,
    stage: Stage,
) -> Result<(ckan_sr::train::TrainConfig, Dataset, Vec<String>), CliError> {
    let settings = Settings::load(a.config.as_deref(), &a.sets, a.seed)?;
    let mut cfg = settings.train_config(stage)?;
    cfg.checkpoint_dir = Some(a.out.clone());
    let degrade_cfg = settings.degrade_config(cfg.generator.upscale_factor, cfg.seed)?;
    let data = Dataset {
        train_hr: load_hr_set(&a.manifest)?,
        val_hr: load_hr_set(&a.val_manifest)?,
        degrade_cfg,
    };
    let echo = settings.echo_effective(&cfg, &data.degrade_cfg);
    Ok((cfg, data, echo))
}

fn map_config_err(e: TrainError) -> CliError {
    match e {
        TrainError::BadConfig(m) => CliError::Usage(m),
        TrainError::HashMismatch { .. } => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn cmd_pretrain(a: TrainArgs) -> Result<(), CliError> {
    let (cfg, data, echo) = stage_setup(&a, Stage::Pretrain)?;
    let resume = match &a.resume {
        Some(p) => Some(checkpoint_load(p)?),
        None => None,
    };
    let run = pretrain(&cfg, &data, resume).map_err(map_config_err)?;
    finish_stage(&a.out, "pretrain.log.jsonl", &run, &echo)
}

fn cmd_gan(a: GanArgs) -> Result<(), CliError> {
    let init_path = match (&a.from, &a.train.resume) {
        (Some(p), None) | (None, Some(p)) => p.clone(),
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--from and --resume are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "the adversarial stage needs a pretrained checkpoint: pass --from <ckpt> (or --resume <ckpt> to continue)".into(),
            ))
        }
    };
    let (cfg, data, echo) = stage_setup(&a.train, Stage::Adversarial)?;
    let init = checkpoint_load(&init_path)?;
    let run = adversarial_train(&cfg, init, &data).map_err(map_config_err)?;
    finish_stage(&a.train.out, "gan.log.jsonl", &run, &echo)
}

fn load_generator(ckpt_path: &Path, chunk: Option<usize>) -> Result<(Checkpoint, ckan_sr::models::Generator), CliError> {
    let ckpt = checkpoint_load(ckpt_path)?;
    let mut gen = ckpt.build_generator()?;
    if let Some(c) = chunk {
        gen.set_chunk_pixels(c);
    }
    Ok((ckpt, gen))
}

fn upscale(gen: &ckan_sr::models::Generator, lr: &ImageBuffer) -> Result<ImageBuffer, CliError> {
    let sr = no_grad(|| gen.forward_chunked(&lr.to_tensor()))?;
    Ok(ImageBuffer::from_tensor(&sr)?)
}

fn cmd_infer(a: InferArgs) -> Result<(), CliError> {
    let (ckpt, gen) = load_generator(&a.ckpt, a.chunk)?;
    let lr = load_ppm(&a.input)?;
    let sr = upscale(&gen, &lr)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_ppm(&a.out, &sr)?;
    println!("wrote {} ({}x{})", a.out.display(), sr.height, sr.width);
    if a.baseline {
        let s = ckpt.gen_config.upscale_factor;
        let up = bicubic_resample(&lr, lr.height * s, lr.width * s)?;
        let path = a.out.with_extension("baseline.ppm");
        save_ppm(&path, &up)?;
        println!("wrote {} (bicubic baseline)", path.display());
    }
    Ok(())
}

fn crop_to_scale(hr: &ImageBuffer, s: usize) -> Result<ImageBuffer, CliError> {
    Ok(hr.crop(0, 0, hr.height - hr.height % s, hr.width - hr.width % s)?)
}

fn markdown_table(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    out.push_str("| model | psnr_y (dB) | ssim_y | msssim_y | perc_dist |\n");
    out.push_str("|:--|--:|--:|--:|--:|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.6} |\n",
            r.name, r.psnr_y, r.ssim_y, r.msssim_y, r.perc_dist
        ));
    }
    out
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let entries = load_manifest(&a.manifest)?;
    if entries.is_empty() {
        return Err(CliError::Usage("manifest lists no images".into()));
    }
    let extractor = PerceptualExtractor::default_eval();

    if a.models.is_empty() && !a.baseline {
        // direct mode: each line is hr<TAB>candidate at equal size
        let mut pairs = Vec::with_capacity(entries.len());
        for e in &entries {
            let cand = e.lr.as_ref().ok_or_else(|| {
                CliError::Usage(format!(
                    "{}: direct eval needs hr<TAB>candidate lines",
                    e.hr.display()
                ))
            })?;
            pairs.push((file_stem(&e.hr), load_ppm(cand)?, load_ppm(&e.hr)?));
        }
        let report = evaluate_set(&extractor, &pairs)?;
        let mut rows = report.rows.clone();
        rows.push(report.mean.clone());
        print!("{}", markdown_table(&rows));
        if let Some(csv) = &a.csv {
            std::fs::write(csv, report_to_csv(&report))?;
            println!("csv: {}", csv.display());
        }
        return Ok(());
    }

    // comparison mode: one summary row per model (plus optional baseline)
    let mut summary = Vec::new();
    let mut scale_for_baseline = a.scale;
    for spec in &a.models {
        let (name, path) = spec.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--model {spec}: expected NAME=CKPT"))
        })?;
        let (ckpt, gen) = load_generator(Path::new(path), a.chunk)?;
        let s = ckpt.gen_config.upscale_factor;
        scale_for_baseline = s;
        let mut pairs = Vec::with_capacity(entries.len());
        for e in &entries {
            let hr = crop_to_scale(&load_ppm(&e.hr)?, s)?;
            let lr = match &e.lr {
                Some(p) => load_ppm(p)?,
                None => degrade(&hr, &DegradeConfig::clean(s))?,
            };
            pairs.push((file_stem(&e.hr), upscale(&gen, &lr)?, hr));
        }
        let report = evaluate_set(&extractor, &pairs)?;
        let mut mean = report.mean.clone();
        mean.name = name.to_string();
        summary.push(mean);
        if let Some(csv) = &a.csv {
            let path = csv.with_file_name(format!(
                "{}-{name}.csv",
                file_stem(csv)
            ));
            std::fs::write(&path, report_to_csv(&report))?;
            println!("csv: {}", path.display());
        }
    }
    if a.baseline {
        let s = scale_for_baseline;
        let mut pairs = Vec::with_capacity(entries.len());
        for e in &entries {
            let hr = crop_to_scale(&load_ppm(&e.hr)?, s)?;
            let lr = match &e.lr {
                Some(p) => load_ppm(p)?,
                None => degrade(&hr, &DegradeConfig::clean(s))?,
            };
            pairs.push((
                file_stem(&e.hr),
                bicubic_resample(&lr, hr.height, hr.width)?,
                hr,
            ));
        }
        let report = evaluate_set(&extractor, &pairs)?;
        let mut mean = report.mean.clone();
        mean.name = "bicubic".to_string();
        summary.push(mean);
    }
    print!("{}", markdown_table(&summary));
    Ok(())
}

fn parse_usize_list(raw: &str, what: &str) -> Result<Vec<usize>, CliError> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("{what}: bad entry {s:?}")))
        })
        .collect()
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let kernels = parse_usize_list(&a.kernels, "--kernels")?;
    let channels = parse_usize_list(&a.channels, "--channels")?;
    let chunks = parse_usize_list(&a.chunks, "--chunks")?;
    if kernels.is_empty() || channels.is_empty() || chunks.is_empty() {
        return Err(CliError::Usage("empty sweep list".into()));
    }
    let mut all_ok = true;
    for &k in &kernels {
        for &c in &channels {
            let rep = run_bench(&BenchConfig {
                batch: a.batch,
                c_in: 3,
                c_out: c,
                kernel: k,
                height: a.size,
                width: a.size,
                chunks: chunks.clone(),
                seed: a.seed,
            })?;
            println!("## kernel {k}, c_out {c}\n");
            println!("{}", report_table(&rep));
            all_ok &= rep.rows.iter().all(|r| r.exact()) && rep.r2 > 0.999;
        }
    }
    if !all_ok {
        return Err(CliError::Runtime(
            "measured counters deviate from the cost model".into(),
        ));
    }
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<(), CliError> {
    let outcomes = run_selftest(&SelftestOptions {
        filter: a.filter,
        break_fold: a.break_fold,
    });
    if outcomes.is_empty() {
        return Err(CliError::Usage("filter matched no checks".into()));
    }
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<26} {}", o.name, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{}/{} checks passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} checks failed")));
    }
    Ok(())
}
