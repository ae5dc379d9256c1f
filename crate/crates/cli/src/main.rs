use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use p3d_core::augment::{augment_global, augment_local};
use p3d_core::bench::{run_bench, BenchCase};
use p3d_core::dataset::{export_epoch, scan_corpus, KindRules};
use p3d_core::io::{is_image_path, read_gray_image, read_tensor, write_tensor, AnyTensor};
use p3d_core::p3d::{to_pseudo3d, P3DConfig};
use p3d_core::tensor::{crop, resize_trilinear, shape_str};
use p3d_core::verify::run_suite;
use p3d_core::{AugmentSpec, BatchPlan, CorpusManifest, Error, Result, Scalar, Tensor};

#[derive(Debug, Parser, Serialize)]
#[command(name = "p3d", version, about = "Pseudo-3D transform and joint 2D/3D data tooling")]
struct Cli {
    /// Master seed; overrides seeds in spec and plan files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "P3D_THREADS")]
    threads: Option<usize>,

    #[arg(long, global = true)]
    quiet: bool,

    /// JSON file with defaults for the global flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
enum Command {
    /// Turn a 2D image into a pseudo-3D volume.
    Transform(TransformArgs),
    /// Apply the global and local augmentation stages to one volume.
    Augment(AugmentArgs),
    /// Build a corpus manifest from a directory tree.
    Scan(ScanArgs),
    /// Materialize one epoch of joint 2D/3D batches.
    Batch(BatchArgs),
    /// Run the built-in oracle and gradient-check suite.
    Verify(VerifyArgs),
    /// Time the lowering paths after cross-checking them.
    Bench(BenchArgs),
}

#[derive(Debug, Args, Serialize)]
struct TransformArgs {
    /// Raw tensor (stem, .bin or .json) or a PGM/PNG image.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Resize the volume to H,W,D.
    #[arg(long, value_parser = parse_target)]
    target: Option<[usize; 3]>,
    /// Center-crop the image to the largest extent the stride tiles.
    #[arg(long)]
    auto_crop: bool,
}

#[derive(Debug, Args, Serialize)]
struct AugmentArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    item_index: u64,
}

#[derive(Debug, Args, Serialize)]
struct ScanArgs {
    #[arg(long)]
    root: PathBuf,
    /// Manifest path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BatchArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Batch plan JSON; may also carry `augment` and `pseudo3d` sections.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    /// JSON list of cases; defaults to the built-in set.
    #[arg(long)]
    cases: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    /// Report path; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    threads: Option<usize>,
    quiet: Option<bool>,
}

#[derive(Debug, Deserialize, Serialize)]
struct PlanFile {
    #[serde(flatten)]
    plan: BatchPlan,
    #[serde(default)]
    augment: Option<AugmentSpec>,
    #[serde(default)]
    pseudo3d: P3DConfig,
}

#[derive(Debug, Serialize)]
struct Resolved<'a> {
    seed: u64,
    threads: usize,
    quiet: bool,
    #[serde(flatten)]
    command: &'a Command,
}

fn parse_target(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [h, w, d] if h > 0 && w > 0 && d > 0 => Ok([h, w, d]),
        _ => Err("expected three positive extents H,W,D".into()),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn transform<T: Scalar>(img: Tensor<T>, args: &TransformArgs) -> Result<Tensor<T>> {
    let cfg = P3DConfig::new(args.window, args.stride)?;
    let img = match img.rank() {
        2 => img,
        3 if img.shape()[2] == 1 => {
            let (h, w) = (img.shape()[0], img.shape()[1]);
            img.reshape(&[h, w])?
        }
        _ => {
            return Err(Error::dim(format!(
                "transform expects a single-channel H×W image, got {}",
                shape_str(img.shape())
            )))
        }
    };
    let img = if args.auto_crop {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let fit = |n: usize| {
            cfg.compatible_extent(n).ok_or_else(|| {
                Error::dim(format!("window {} exceeds image extent {n}", cfg.window))
            })
        };
        let (ch, cw) = (fit(h)?, fit(w)?);
        if (ch, cw) != (h, w) {
            info!("auto-crop {h}×{w} → {ch}×{cw}");
        }
        crop(&img, &[(h - ch) / 2, (w - cw) / 2], &[ch, cw])?
    } else {
        img
    };
    let vol = to_pseudo3d(&img, &cfg)?;
    match args.target {
        Some(t) => resize_trilinear(&vol, t),
        None => Ok(vol),
    }
}

fn run_transform(args: &TransformArgs) -> Result<()> {
    let input = if is_image_path(&args.input) {
        AnyTensor::F32(read_gray_image(&args.input)?)
    } else {
        read_tensor(&args.input)?
    };
    let shape = match input {
        AnyTensor::F32(t) => {
            let v = transform(t, args)?;
            write_tensor(&args.output, &v)?;
            v.shape().to_vec()
        }
        AnyTensor::F64(t) => {
            let v = transform(t, args)?;
            write_tensor(&args.output, &v)?;
            v.shape().to_vec()
        }
    };
    info!("wrote {} volume to {}", shape_str(&shape), args.output.display());
    Ok(())
}

fn run_augment(args: &AugmentArgs, seed: Option<u64>) -> Result<()> {
    let mut spec: AugmentSpec = read_json(&args.spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let v = read_tensor(&args.input)?.to_f32();
    let out = augment_global(&v, &spec, args.item_index)?;
    let out = augment_local(&out, &spec, args.item_index)?;
    write_tensor(&args.output, &out)
}

fn run_scan(args: &ScanArgs) -> Result<()> {
    let manifest = scan_corpus(&args.root, &KindRules::default())?;
    info!(
        "{} 2D, {} 3D, {} rejected",
        manifest.n_2d,
        manifest.n_3d,
        manifest.rejects.len()
    );
    manifest.save(&args.out)
}

fn run_batch(args: &BatchArgs, seed: Option<u64>) -> Result<()> {
    let manifest = CorpusManifest::load(&args.manifest)?;
    let mut file: PlanFile = read_json(&args.plan)?;
    if let Some(s) = seed {
        file.plan.seed = s;
    }
    let aug = file
        .augment
        .take()
        .unwrap_or_else(|| AugmentSpec {
            seed: file.plan.seed,
            ..AugmentSpec::default()
        });
    let log = export_epoch(&manifest, &file.plan, &aug, &file.pseudo3d, &args.out_dir)?;
    info!(
        "{} batches, {} samples skipped",
        log.batches.len(),
        log.skipped
    );
    Ok(())
}

fn run_verify(args: &VerifyArgs, seed: u64) -> Result<bool> {
    let outcomes = run_suite(args.instances, seed);
    println!(
        "{:<44} {:>6} {:>12} {:>10} {:>8}  result",
        "check", "cases", "worst", "tolerance", "seconds"
    );
    for o in &outcomes {
        println!(
            "{:<44} {:>6} {:>12.3e} {:>10.0e} {:>8.3}  {}",
            o.name,
            o.cases,
            o.worst,
            o.tolerance,
            o.seconds,
            if o.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {} failed", outcomes.len(), failed);
    Ok(failed == 0)
}

fn run_bench_cmd(args: &BenchArgs, seed: u64) -> Result<()> {
    let cases = match &args.cases {
        Some(p) => read_json(p)?,
        None => BenchCase::default_set(),
    };
    let report = run_bench(&cases, args.repetitions, seed)?;
    match &args.output {
        Some(p) => write_json(p, &report),
        None => {
            // A closed pipe downstream is not an error for a report.
            let text = serde_json::to_string_pretty(&report).expect("serializable");
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn execute(cli: &Cli, seed: u64) -> Result<ExitCode> {
    match &cli.command {
        Command::Transform(a) => run_transform(a)?,
        Command::Augment(a) => run_augment(a, cli.seed)?,
        Command::Scan(a) => run_scan(a)?,
        Command::Batch(a) => run_batch(a, cli.seed)?,
        Command::Verify(a) => {
            if !run_verify(a, seed)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bench(a) => run_bench_cmd(a, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error[{}]: {}", e.reason_code(), e.to_string().replace('\n', " "));
    ExitCode::from(if e.is_validation() { 1 } else { 2 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let file = match &cli.config {
        Some(p) => match read_json::<ConfigFile>(p) {
            Ok(f) => f,
            Err(e) => return fail(&e),
        },
        None => ConfigFile::default(),
    };
    let quiet = cli.quiet || file.quiet.unwrap_or(false);
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let threads = cli.threads.or(file.threads).unwrap_or(0);

    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if quiet { "error" } else { "info" }),
    )
    .format_timestamp(None)
    .init();

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => return fail(&Error::config(format!("thread pool: {e}"))),
    };
    let resolved = Resolved {
        seed,
        threads: pool.current_num_threads(),
        quiet,
        command: &cli.command,
    };
    eprintln!("{}", serde_json::to_string(&resolved).expect("serializable"));

    let cli = Cli { seed: cli.seed.or(file.seed), ..cli };
    match pool.install(|| execute(&cli, seed)) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}
