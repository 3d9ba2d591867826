//! `bgg`: dataset generation, training, evaluation and diagnostics.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bgg_core::checkpoint::file_hash;
use bgg_core::config::Settings;
use bgg_core::data::{build_dataset, read_ppm, MANIFEST_FILE};
use bgg_core::gradsuite::run_gradient_suite;
use bgg_core::heatmap::write_heatmap;
use bgg_core::retrieval::{evaluate, reports_csv, DirectionSel, Summary};
use bgg_core::train::{train, CHECKPOINT_FILE, LOSS_FILE, METRICS_FILE};
use bgg_core::{BggError, BggModel, Checkpoint, DatasetManifest, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "bgg",
    version,
    about = "Adapter-tuned frozen ViT for cross-view image retrieval"
)]
struct Cli {
    /// Seed for data generation and trainable initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Settings file of `key = value` lines; `#` starts a comment.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with a manifest.
    GenData(GenData),
    /// Train adapters, aggregator and temperature on a dataset.
    Train(Train),
    /// Retrieval metrics on the test split.
    Eval(Eval),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(Gradcheck),
    /// Aggregation weights of one image as a grayscale PGM.
    ExportHeatmap(ExportHeatmap),
    /// Trainable and frozen parameter counts.
    ParamReport(ParamReport),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    locations: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
}

#[derive(Args, Debug)]
struct Train {
    /// Dataset directory.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train without adapters.
    #[arg(long)]
    no_adapters: bool,
    /// Extra `key=value` setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Trained checkpoint; required unless `--baseline`.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// `both`, `query_to_reference` or `reference_to_query`.
    #[arg(long, default_value = "both")]
    direction: String,
    /// Evaluate the untrained model without adapters.
    #[arg(long, conflicts_with = "checkpoint")]
    baseline: bool,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// Coordinates probed per tensor in the module checks.
    #[arg(long, default_value_t = 8)]
    coords: usize,
    /// Coordinates probed per tensor in the full describe-to-loss chain.
    #[arg(long, default_value_t = 1)]
    chain_coords: usize,
}

#[derive(Args, Debug)]
struct ExportHeatmap {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Binary PPM image.
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
}

#[derive(Args, Debug)]
struct ParamReport {
    /// Report a checkpoint's model instead of the configured one.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                BggError::Usage(_) => 1,
                _ => 2,
            })
        }
    }
}

/// Defaults, then the settings file, then `--seed`.
fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    if let Some(seed) = cli.seed {
        s.set("seed", &seed.to_string())?;
    }
    Ok(s)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(BggError::Usage(format!(
            "no dataset at {}; run `bgg gen-data --out {}` first",
            dir.display(),
            dir.display()
        )));
    }
    DatasetManifest::load(dir)
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| BggError::io(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| BggError::io(path, e))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut s = settings(&cli)?;
    match &cli.command {
        Command::GenData(a) => {
            if let Some(n) = a.locations {
                s.data.locations = n;
            }
            if let Some(n) = a.queries {
                s.data.queries = n;
            }
            let out = out_dir(&cli, "data");
            let started = Instant::now();
            let m = build_dataset(&out, &s.data)?;
            println!(
                "wrote {} images for {} locations to {} in {:.1}s (config_hash={})",
                m.entries.len(),
                s.data.locations,
                out.display(),
                started.elapsed().as_secs_f64(),
                m.config_hash
            );
        }
        Command::Train(a) => {
            if let Some(v) = a.steps {
                s.train.steps = v;
            }
            if let Some(v) = a.batch {
                s.train.batch = v;
            }
            if let Some(v) = a.lr {
                s.train.optim.lr = v;
            }
            if a.no_adapters {
                s.train.model.adapters = false;
            }
            for kv in &a.sets {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| BggError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
                s.set(k.trim(), v.trim())?;
            }
            s.train.validate()?;
            let manifest = load_manifest(&a.data)?;
            let out = out_dir(&cli, "run");
            let steps = s.train.steps;
            let every = (steps / 20).max(1);
            let started = Instant::now();
            let art = train(&s.train, &manifest, &out, |r| {
                if (r.step as usize).is_multiple_of(every) || r.step == 1 {
                    eprintln!("step {:>5}/{steps}  loss {:.5}  tau {:.4}", r.step, r.loss, r.tau);
                }
            })?;
            eprintln!("trained in {:.1}s", started.elapsed().as_secs_f64());
            print!("{}", Summary(&art.reports));
            println!("backbone hash before {}", art.backbone_hash_before);
            println!("backbone hash after  {}", art.backbone_hash_after);
            println!(
                "checkpoint {} sha256={}",
                art.checkpoint_path.display(),
                file_hash(&art.checkpoint_path)?
            );
            println!("wrote {}, {}, {}", LOSS_FILE, METRICS_FILE, CHECKPOINT_FILE);
            if art.backbone_hash_before != art.backbone_hash_after {
                return Err(BggError::Format {
                    what: "backbone",
                    detail: "parameters changed during training".into(),
                });
            }
        }
        Command::Eval(a) => {
            let sel = DirectionSel::parse(&a.direction)?;
            let model = match (&a.checkpoint, a.baseline) {
                (Some(p), _) => Checkpoint::load(p)?.model,
                (None, true) => {
                    let mut cfg = s.train.model.clone();
                    cfg.adapters = false;
                    BggModel::new(&cfg, s.train.seed)?
                }
                (None, false) => return Err(BggError::Usage("eval needs --checkpoint or --baseline".into())),
            };
            let manifest = load_manifest(&a.data)?;
            let reports = evaluate(&model, &manifest, sel)?;
            let csv = reports_csv(&reports);
            print!("{csv}");
            eprint!("{}", Summary(&reports));
            if let Some(out) = &cli.out {
                write_file(&out.join(METRICS_FILE), csv.as_bytes())?;
            }
        }
        Command::Gradcheck(a) => {
            let seed = cli.seed.unwrap_or(7);
            let started = Instant::now();
            let suite = run_gradient_suite(seed, a.coords, a.chain_coords)?;
            print!("{}", suite.table());
            for r in suite.rows.iter().filter(|r| !r.passes()) {
                println!(
                    "failed: {}.{} error {:.3e} ({:?})",
                    r.module, r.tensor, r.error, r.metric
                );
            }
            eprintln!("gradient suite took {:.1}s", started.elapsed().as_secs_f64());
            if !suite.passes() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::ExportHeatmap(a) => {
            let model = Checkpoint::load(&a.checkpoint)?.model;
            let image = read_ppm(&a.image)?;
            let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
            let out = out_dir(&cli, ".").join(format!("{stem}.pgm"));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).map_err(|e| BggError::io(parent, e))?;
            }
            write_heatmap(&out, &model, &image)?;
            println!("{}", out.display());
        }
        Command::ParamReport(a) => {
            let model = match &a.checkpoint {
                Some(p) => Checkpoint::load(p)?.model,
                None => BggModel::new(&s.train.model, s.train.seed)?,
            };
            let report = model.param_report();
            println!("{report}");
            if let Some(out) = &cli.out {
                let mut csv = String::from("module,name,shape,count,trainable\n");
                for e in &report.entries {
                    let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        e.module,
                        e.name,
                        shape.join("x"),
                        e.count,
                        e.trainable
                    ));
                }
                write_file(&out.join("params.csv"), csv.as_bytes())?;
            }
        }
    }
    std::io::stdout()
        .flush()
        .map_err(|e| BggError::io(Path::new("<stdout>"), e))?;
    Ok(ExitCode::SUCCESS)
}
