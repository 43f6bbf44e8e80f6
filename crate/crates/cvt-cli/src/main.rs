//! `cvt` command line: static analysis, shape tracing, toy training,
//! evaluation, and search-space enumeration.
//!
//! Exit codes: 0 success, 2 bad configuration, 3 geometry error,
//! 4 unwritable path / IO, 5 checkpoint error.

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use config::{ConfigFile, DEFAULT_DATA_SEED, DEFAULT_IMAGE_SIZE, DEFAULT_NOISE};
use cvt::analysis::{
    count_flops, enumerate_search_space, format_flops, format_params, CostReport,
};
use cvt::error::CvtError;
use cvt::model::{
    build_model, file_checksum, load_checkpoint, load_checkpoint_expect, save_checkpoint,
    CvtModel, ModelConfig,
};
use cvt::train::{evaluate, train, SyntheticDataset};

#[derive(Parser)]
#[command(
    name = "cvt",
    about = "Convolutional vision Transformer: analyzer, trainer, and search-space tools",
    long_about = None,
    after_help = "The CVT_THREADS environment variable caps intra-op parallelism (default 1,\n\
                  fully deterministic)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Records,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP analysis for a model config.
    Analyze {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Per-layer output-shape trace.
    Trace {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
    },
    /// Train on the synthetic task and write a checkpoint.
    Train {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the synthetic task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional config the checkpoint must match.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        samples: usize,
    },
    /// Enumerate the per-block stride/MLP-ratio search space.
    Search {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
    },
}

type CmdResult = Result<(), (i32, String)>;

fn exit_code(e: &CvtError) -> i32 {
    match e {
        CvtError::Config(_) | CvtError::Parse(_) => 2,
        CvtError::Geometry { .. } => 3,
        CvtError::Io(_) => 4,
        CvtError::CheckpointMagic
        | CvtError::CheckpointVersion { .. }
        | CvtError::CheckpointChecksum
        | CvtError::CheckpointTruncated { .. }
        | CvtError::ConfigMismatch(_) => 5,
        _ => 1,
    }
}

fn fail(e: CvtError) -> (i32, String) {
    (exit_code(&e), e.to_string())
}

fn load_config_file(path: &Path) -> Result<ConfigFile, (i32, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| (2, format!("cannot read config {}: {e}", path.display())))?;
    ConfigFile::parse(&text).map_err(fail)
}

fn resolve_model(
    preset: &Option<String>,
    config: &Option<PathBuf>,
) -> Result<(ModelConfig, Option<ConfigFile>), (i32, String)> {
    match (preset, config) {
        (Some(name), None) => {
            let model = ModelConfig::preset(name)
                .ok_or_else(|| (2, format!("unknown preset '{name}'")))?;
            Ok((model, None))
        }
        (None, Some(path)) => {
            let file = load_config_file(path)?;
            let model = file.model_config().map_err(fail)?;
            Ok((model, Some(file)))
        }
        (None, None) => Err((2, "need either --preset or --config".to_string())),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    }
}

fn cmd_analyze(
    preset: Option<String>,
    config: Option<PathBuf>,
    input_size: usize,
    format: Format,
) -> CmdResult {
    let (model, _) = resolve_model(&preset, &config)?;
    let report = count_flops(&model, input_size).map_err(fail)?;
    match format {
        Format::Table => print!("{}", report.to_table_string()),
        Format::Records => print!("{}", report.to_records_string()),
    }
    Ok(())
}

fn stage_of(path: &str) -> &str {
    path.split('.').next().unwrap_or(path)
}

fn cmd_trace(preset: Option<String>, config: Option<PathBuf>, input_size: usize) -> CmdResult {
    let (model, _) = resolve_model(&preset, &config)?;
    let report: CostReport = count_flops(&model, input_size).map_err(fail)?;
    let mut current = "";
    for r in &report.records {
        let stage = stage_of(&r.path);
        if stage != current {
            println!("== {stage} ==");
            current = stage;
        }
        let shape = r
            .output_shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        println!("{:<44} {:<16} {shape}", r.path, r.kind);
    }
    Ok(())
}

fn cmd_train(
    preset: Option<String>,
    config: Option<PathBuf>,
    steps: Option<usize>,
    seed: u64,
    out: PathBuf,
    log_path: Option<PathBuf>,
) -> CmdResult {
    let (model_cfg, file) = resolve_model(&preset, &config)?;
    let mut hyper = file.as_ref().map(|f| f.hyper()).unwrap_or_default();
    if let Some(s) = steps {
        hyper.steps = s;
    }
    let image_size = file.as_ref().map_or(DEFAULT_IMAGE_SIZE, |f| f.image_size());
    let noise = file.as_ref().map_or(DEFAULT_NOISE, |f| f.noise());
    let data_seed = file.as_ref().map_or(DEFAULT_DATA_SEED, |f| f.data_seed());
    let dataset = SyntheticDataset::<f32>::new(data_seed, model_cfg.num_classes, image_size, noise)
        .map_err(fail)?;
    let mut model: CvtModel<f32> = build_model(model_cfg, seed).map_err(fail)?;
    let log = train(&mut model, &dataset, &hyper, seed).map_err(fail)?;
    println!(
        "trained {} for {} steps (final loss {:.4})",
        model.config.name,
        hyper.steps,
        log.final_loss().unwrap_or(f64::NAN)
    );
    save_checkpoint(&model, &out).map_err(fail)?;
    println!(
        "checkpoint written to {} (checksum {:#018x})",
        out.display(),
        file_checksum(&out).map_err(fail)?
    );
    if let Some(path) = log_path {
        log.write_to(&path).map_err(fail)?;
        println!("log written to {}", path.display());
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: PathBuf,
    seed: u64,
    preset: Option<String>,
    config: Option<PathBuf>,
    samples: usize,
) -> CmdResult {
    let expected = match (&preset, &config) {
        (None, None) => None,
        _ => Some(resolve_model(&preset, &config)?),
    };
    let model = match &expected {
        Some((cfg, _)) => load_checkpoint_expect(&checkpoint, cfg),
        None => load_checkpoint(&checkpoint),
    }
    .map_err(|e| (5, e.to_string()))?;
    let file = expected.and_then(|(_, f)| f);
    let image_size = file.as_ref().map_or(DEFAULT_IMAGE_SIZE, |f| f.image_size());
    let noise = file.as_ref().map_or(DEFAULT_NOISE, |f| f.noise());
    let data_seed = file.as_ref().map_or(DEFAULT_DATA_SEED, |f| f.data_seed());
    let dataset =
        SyntheticDataset::<f32>::new(data_seed, model.config.num_classes, image_size, noise)
            .map_err(fail)?;
    let (accuracy, mean_loss) = evaluate(&model, &dataset, samples, seed).map_err(fail)?;
    println!("accuracy {accuracy:.4} mean_loss {mean_loss:.4} over {samples} samples");
    Ok(())
}

fn cmd_search(
    preset: Option<String>,
    config: Option<PathBuf>,
    samples: usize,
    seed: u64,
    input_size: usize,
) -> CmdResult {
    let (model, _) = resolve_model(&preset, &config)?;
    let results = enumerate_search_space(&model, samples, seed, input_size).map_err(fail)?;
    let digits = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<String>();
    let mut p_min = u64::MAX;
    let mut p_max = 0u64;
    let mut f_min = u64::MAX;
    let mut f_max = 0u64;
    for (i, (cand, cost)) in results.iter().enumerate() {
        let tag = match i {
            0 => "all-min ",
            1 => "all-max ",
            _ => "sampled ",
        };
        println!(
            "{tag}strides={} ratios={} params={} flops={}",
            digits(&cand.stride_kv),
            digits(&cand.mlp_ratio),
            cost.total_params,
            cost.total_flops
        );
        p_min = p_min.min(cost.total_params);
        p_max = p_max.max(cost.total_params);
        f_min = f_min.min(cost.total_flops);
        f_max = f_max.max(cost.total_flops);
    }
    println!(
        "observed params [{p_min}, {p_max}] ({} to {}) flops [{f_min}, {f_max}] ({} to {})",
        format_params(p_min),
        format_params(p_max),
        format_flops(f_min),
        format_flops(f_max)
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Analyze {
            preset,
            config,
            input_size,
            format,
        } => cmd_analyze(preset, config, input_size, format),
        Command::Trace {
            preset,
            config,
            input_size,
        } => cmd_trace(preset, config, input_size),
        Command::Train {
            preset,
            config,
            steps,
            seed,
            out,
            log,
        } => cmd_train(preset, config, steps, seed, out, log),
        Command::Eval {
            checkpoint,
            seed,
            preset,
            config,
            samples,
        } => cmd_eval(checkpoint, seed, preset, config, samples),
        Command::Search {
            preset,
            config,
            samples,
            seed,
            input_size,
        } => cmd_search(preset, config, samples, seed, input_size),
    };
    if let Err((code, msg)) = result {
        eprintln!("error: {msg}");
        std::process::exit(code);
    }
}
