use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use osic_core::ablation::{self, layer_sweep, module_grid, run_variant};
use osic_core::backbone::load_features;
use osic_core::config::{run_scst, run_xe, RunConfig};
use osic_core::data::synth_dataset;
use osic_core::ddr::RefineMode;
use osic_core::gradcheck::GradCheckOptions;
use osic_core::gradsuite::{check_block, BLOCKS};
use osic_core::metrics::{evaluate, ScoreReport};
use osic_core::training::{decode_best, Checkpoint, TrainLog};
use osic_core::{heatmap, Error, Result};

mod artifacts;

use artifacts::OutDir;

/// Largest relative error the gradient check accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "osic", version, about = "Train, caption and evaluate one-stage image captioners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-entropy training from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Self-critical fine-tuning of a checkpoint.
    FinetuneScst {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Prints the caption for one feature file and its length-normalized log-probability.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 2)]
        beam: usize,
    },
    /// Scores predictions against references.
    Eval {
        /// JSON object of image id to caption.
        #[arg(long)]
        predictions: PathBuf,
        /// JSON object of image id to a list of captions.
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Trains and scores the module grid, or a refining-layer sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Sweep 0..=6 layers of this refining mode on top of the gate.
        #[arg(long)]
        sweep: Option<RefineMode>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable block in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        configs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Writes gate, similarity and attention maps for one feature file.
    DumpHeatmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Writes a synthetic dataset as a manifest plus feature files.
    Synth {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        items: usize,
        #[arg(long, default_value_t = 8)]
        grammar: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out_dir } => train(&config, out_dir),
        Command::FinetuneScst {
            config,
            checkpoint,
            out_dir,
        } => finetune(&config, &checkpoint, out_dir),
        Command::Caption {
            checkpoint,
            features,
            beam,
        } => caption(&checkpoint, &features, beam),
        Command::Eval {
            predictions,
            references,
            out_dir,
        } => eval(&predictions, &references, out_dir),
        Command::Ablate { config, sweep, out_dir } => ablate(&config, sweep, out_dir),
        Command::Gradcheck {
            configs,
            seed,
            out_dir,
            corrupt,
        } => gradcheck(configs, seed, out_dir, corrupt),
        Command::DumpHeatmaps {
            checkpoint,
            features,
            out_dir,
        } => dump_heatmaps(&checkpoint, &features, &out_dir),
        Command::Synth {
            seed,
            items,
            grammar,
            out_dir,
        } => {
            let path = synth_dataset(seed, items, grammar)?.write(&out_dir)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn load_config(path: &Path, out_dir: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    Ok(cfg)
}

fn save_run(out: &mut OutDir, stage: &str, ckpt: &Checkpoint, log: &TrainLog) -> Result<()> {
    out.write(&format!("{stage}.ckpt"), &ckpt.to_bytes())?;
    out.write(&format!("{stage}_log.csv"), log.to_csv().as_bytes())?;
    info!("wrote {}", out.path(&format!("{stage}.ckpt")).display());
    Ok(())
}

fn train(config: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out_dir)?;
    let prepared = cfg.prepare()?;
    info!(
        "{} train / {} eval images, vocabulary {}",
        prepared.train.len(),
        prepared.eval.len(),
        prepared.vocab.len()
    );
    let mut out = OutDir::create(&cfg.out_dir, "train")?;
    let (ckpt, log) = run_xe(&cfg, &prepared)?;
    save_run(&mut out, "xe", &ckpt, &log)?;
    out.finish()
}

fn finetune(config: &Path, checkpoint: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out_dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let prepared = cfg.prepare()?;
    let mut out = OutDir::create(&cfg.out_dir, "finetune-scst")?;
    let (ckpt, log) = run_scst(&cfg, &prepared, ckpt)?;
    save_run(&mut out, "scst", &ckpt, &log)?;
    out.finish()
}

fn caption(checkpoint: &Path, features: &Path, beam: usize) -> Result<()> {
    if beam == 0 {
        return Err(Error::Config("--beam must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let feats = load_features(features)?;
    let model = ckpt.model()?;
    let best = decode_best(&model, &ckpt.state.store, &feats, beam)?;
    let words = ckpt.vocabulary().decode(&best.tokens);
    println!("{}\t{:.6}", words.join(" "), best.score);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn eval(predictions: &Path, references: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    let preds: BTreeMap<String, String> = read_json(predictions)?;
    let refs: BTreeMap<String, Vec<String>> = read_json(references)?;
    let report = evaluate(&preds, &refs)?;
    let csv = format!("{}\n{}\n", ScoreReport::CSV_HEADER, report.csv_row());
    print!("{csv}");
    if let Some(dir) = out_dir {
        let mut out = OutDir::create(&dir, "eval")?;
        out.write("scores.csv", csv.as_bytes())?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        out.write("scores.json", (json + "\n").as_bytes())?;
        out.finish()?;
    }
    Ok(())
}

fn ablate(config: &Path, sweep: Option<RefineMode>, out_dir: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out_dir)?;
    let (variants, name) = match sweep {
        Some(RefineMode::None) => {
            return Err(Error::Config("--sweep needs a refining mode other than none".into()));
        }
        Some(mode) => (layer_sweep(&cfg.model, mode), format!("sweep_{mode}.csv")),
        None => (module_grid(&cfg.model), "ablation.csv".to_string()),
    };
    let prepared = cfg.prepare()?;
    let mut out = OutDir::create(&cfg.out_dir, "ablate")?;
    let mut csv = format!("{}\n", ablation::CSV_HEADER);
    let mut failure = None;
    for (i, v) in variants.iter().enumerate() {
        info!("[{}/{}] {}", i + 1, variants.len(), v.name);
        match run_variant(&cfg, &prepared, v) {
            Ok(row) => {
                let line = row.csv_row();
                println!("{line}");
                csv.push_str(&line);
                csv.push('\n');
            }
            Err(e) => {
                error!("{} failed: {e}", v.name);
                failure = Some(e);
                break;
            }
        }
    }
    out.write(&name, csv.as_bytes())?;
    out.finish()?;
    failure.map_or(Ok(()), Err)
}

fn gradcheck(configs: usize, seed: u64, out_dir: Option<PathBuf>, corrupt: Option<f64>) -> Result<()> {
    if configs == 0 {
        return Err(Error::Config("--configs must be at least 1".into()));
    }
    let opts = GradCheckOptions {
        corrupt_scale: corrupt,
        ..Default::default()
    };
    let mut csv = String::from("block,configs,elements,max_rel_error,worst_param,status\n");
    let mut failed = Vec::new();
    for block in BLOCKS {
        let r = check_block(block, configs, seed, &opts)?;
        let ok = r.max_rel_error < GRAD_TOLERANCE;
        let status = if ok { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<24} max rel err {:.3e}  ({} elements, worst {})",
            r.block, r.max_rel_error, r.elements, r.worst_param
        );
        csv.push_str(&format!(
            "{},{},{},{:e},{},{status}\n",
            r.block, r.configs, r.elements, r.max_rel_error, r.worst_param
        ));
        if !ok {
            failed.push(r.block);
        }
    }
    if let Some(dir) = out_dir {
        let mut out = OutDir::create(&dir, "gradcheck")?;
        out.write("gradcheck.csv", csv.as_bytes())?;
        out.finish()?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed for {} (tolerance {GRAD_TOLERANCE:e})",
            failed.join(", ")
        )))
    }
}

fn dump_heatmaps(checkpoint: &Path, features: &Path, out_dir: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let feats = load_features(features)?;
    let model = ckpt.model()?;
    let maps = heatmap::collect(&model, &ckpt.state.store, &feats)?;
    let mut out = OutDir::create(out_dir, "dump-heatmaps")?;
    for p in heatmap::write(out_dir, &maps)? {
        out.record(p);
    }
    out.finish()?;
    info!("wrote {} maps to {}", maps.len(), out_dir.display());
    Ok(())
}
