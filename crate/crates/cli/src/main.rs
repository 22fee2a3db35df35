use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use af_core::experiment::{self, Axis, ExperimentConfig, Model, Trainer, ABLATION_HEADER};
use af_core::metrics::{MaskGrid, CSV_HEADER};
use af_core::synthdata::{self, SynthDataset};
use af_core::AfError;
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

const CONFIG_FILE: &str = "config.json";
const LOG_FILE: &str = "log.jsonl";
const CHECKPOINT_FILE: &str = "checkpoint.afck";

#[derive(Parser)]
#[command(name = "af", version, about = "Attention-focused generalized category discovery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config; missing keys take the profile defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, default_value = "desk")]
    profile: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write config, log and checkpoint to the output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster the unlabeled samples and report matched accuracy and pruning statistics.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Saved dataset; regenerated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every variant along one axis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// strategy, tau, k, view_policy, query_training, pooling or multiscale.
        #[arg(long)]
        axis: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Write the CSV here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render attention and TAP masks for chosen samples.
    Mask {
        /// Defaults to config.json next to the checkpoint.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
        /// Defaults to a masks/ directory next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write upscaled PNG copies.
        #[arg(long)]
        png: bool,
    },
    /// FLOPs and parameter counts with and without AF.
    Cost {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the synthetic dataset described by the config.
    Data {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully resolved config as JSON.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::profile(&args.profile)?,
    };
    apply_seed_override(&mut cfg)?;
    Ok(cfg)
}

fn apply_seed_override(cfg: &mut ExperimentConfig) -> Result<()> {
    if let Ok(raw) = std::env::var("AF_SEED") {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| AfError::Config(format!("AF_SEED must be an unsigned integer, got {raw:?}")))?;
    }
    Ok(())
}

fn threads() -> Result<usize> {
    match std::env::var("AF_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(AfError::Config(format!("AF_THREADS must be a positive integer, got {raw:?}")).into()),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn dataset(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<SynthDataset> {
    let Some(path) = path else {
        return Ok(synthdata::generate(&cfg.data)?);
    };
    let data = SynthDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let (s, b) = (&data.spec, &cfg.backbone);
    if s.image_side != b.image_side || s.patch_side != b.patch_side || s.num_classes != b.num_total_classes {
        return Err(AfError::Config(format!(
            "dataset {} ({}px, patch {}, {} classes) does not match the config ({}px, patch {}, {} classes)",
            path.display(),
            s.image_side,
            s.patch_side,
            s.num_classes,
            b.image_side,
            b.patch_side,
            b.num_total_classes
        ))
        .into());
    }
    Ok(data)
}

fn train(cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)?)?;
    let data = synthdata::generate(&cfg.data)?;
    let mut log = BufWriter::new(File::create(dir.join(LOG_FILE))?);
    writeln!(log, "{}", experiment::log_header(&cfg)?)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let mut trainer = Trainer::new(&cfg, &data)?;
    for _ in 0..cfg.optim.epochs {
        match trainer.run_epoch() {
            Ok(entry) => {
                log::info!(
                    "epoch {} total {:.4} rep {:.4} cls {:.4} ce {:.4} retained {:.2}",
                    entry.epoch,
                    entry.total,
                    entry.l_rep,
                    entry.l_cls,
                    entry.l_ce_sum,
                    entry.mean_retained
                );
                writeln!(log, "{}", serde_json::to_string(&entry)?)?;
                log.flush()?;
            }
            Err(e) => {
                log.flush()?;
                trainer.model.save(&ckpt)?;
                return Err(e).context(format!("training stopped; last finite weights saved to {}", ckpt.display()));
            }
        }
    }
    trainer.model.save(&ckpt)?;
    out!("{}", ckpt.display());
    Ok(())
}

fn eval(cfg: ExperimentConfig, ckpt: &Path, data: Option<&Path>) -> Result<()> {
    let model = Model::load(&cfg, ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let data = dataset(&cfg, data)?;
    let report = experiment::evaluate(&cfg, &model, &data)?;
    out!("{CSV_HEADER}");
    out!("{}", report.acc.csv_row(&cfg.run_id, cfg.seed, cfg.prune.strategy.as_str(), cfg.prune.tau));
    eprintln!(
        "mean retained {:.4} of {} patches, mean pruned {:.4}, pruning precision {:.4} (per-sample mean {:.4})",
        report.mean_retained, report.num_patches, report.mean_pruned, report.pruning_precision, report.mean_sample_precision
    );
    Ok(())
}

fn ablate(cfg: ExperimentConfig, axis: &str, seeds: Vec<u64>, out: Option<PathBuf>) -> Result<()> {
    let axis: Axis = axis.parse()?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
    let rows = experiment::ablate(&cfg, axis, &seeds, threads()?)?;
    let mut text = format!("{ABLATION_HEADER}\n");
    for row in &rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    write!(std::io::stdout().lock(), "{text}")?;
    if let Some(out) = out {
        std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn write_png(path: &Path, grid: &MaskGrid, scale: u32) -> Result<()> {
    let (w, h) = (grid.width as u32, grid.height as u32);
    let img = image::GrayImage::from_fn(w * scale, h * scale, |x, y| {
        let cell = (y / scale) as usize * grid.width + (x / scale) as usize;
        image::Luma([if grid.cells[cell] { 255 } else { 0 }])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn mask(config: Option<PathBuf>, ckpt: &Path, ids: &[usize], threshold: f64, out: Option<PathBuf>, png: bool) -> Result<()> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let config = config.unwrap_or_else(|| dir.join(CONFIG_FILE));
    let mut cfg = ExperimentConfig::load(&config)?;
    apply_seed_override(&mut cfg)?;
    let model = Model::load(&cfg, ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let data = synthdata::generate(&cfg.data)?;
    let masks = experiment::render_masks(&cfg, &model, &data, ids, threshold)?;
    let out = out.unwrap_or_else(|| dir.join("masks"));
    for path in experiment::write_masks(&out, &cfg.run_id, threshold, &masks)? {
        out!("{}", path.display());
    }
    if png {
        for m in &masks {
            for (grid, tag) in [(&m.attention, threshold.to_string()), (&m.retained, "tap".to_string())] {
                let path = out.join(format!("{}_{}_{tag}.png", cfg.run_id, m.sample));
                write_png(&path, grid, 16)?;
                out!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn cost(cfg: ExperimentConfig) -> Result<()> {
    out!("{:<24} {:>8} {:>14} {:>14} {:>14}", "model", "tokens", "GFLOPs", "params_train", "params_test");
    let rows = experiment::cost_report(&cfg);
    for r in &rows {
        out!(
            "{:<24} {:>8} {:>14.4} {:>14} {:>14}",
            r.label,
            r.seq_len,
            r.flops / 1e9,
            r.params_train,
            r.params_test
        );
    }
    for pair in rows.chunks(2) {
        if let [base, af] = pair {
            out!(
                "{:<24} AF test-time params +{} ({:.2}M -> {:.2}M), train-time +{}",
                base.label.trim_end_matches(" baseline"),
                af.params_test - base.params_test,
                base.params_test as f64 / 1e6,
                af.params_test as f64 / 1e6,
                af.params_train - base.params_train
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => train(resolve(&cfg)?, out),
        Command::Eval { cfg, ckpt, data } => eval(resolve(&cfg)?, &ckpt, data.as_deref()),
        Command::Ablate { cfg, axis, seeds, out } => ablate(resolve(&cfg)?, &axis, seeds, out),
        Command::Mask { config, ckpt, ids, threshold, out, png } => mask(config, &ckpt, &ids, threshold, out, png),
        Command::Cost { cfg } => cost(resolve(&cfg)?),
        Command::Data { cfg, out } => {
            let cfg = resolve(&cfg)?;
            synthdata::generate(&cfg.data)?.save(&out)?;
            out!("{}", out.display());
            Ok(())
        }
        Command::Config { cfg } => {
            out!("{}", serde_json::to_string_pretty(&resolve(&cfg)?)?);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<AfError>() {
        Some(AfError::Config(_)) => 2,
        Some(AfError::Numerical(_)) | Some(AfError::DegenerateNorm(_)) => 3,
        _ => 1,
    }
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .filter_map(|e| e.downcast_ref::<std::io::Error>())
        .any(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
