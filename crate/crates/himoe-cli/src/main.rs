use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use himoe_core::synth::{build_dataset, default_embodiments};
use himoe_core::train::{
    evaluate, grid_cells, heatmap_csv, routing_heatmap, run_sweep, standard_cells, sweep_table,
    EvalOptions, SweepCell, TrainConfig, Trainer,
};
use std::path::{Path, PathBuf};

/// Train and evaluate the hierarchical mixture-of-experts flow-matching
/// policy on synthetic multi-embodiment manipulation data.
#[derive(Parser)]
#[command(name = "himoe", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy; writes metrics.jsonl and checkpoint.bin to --out.
    Train {
        /// TOML file mirroring TrainConfig field-for-field.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's total step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Single-threaded batches (results are bitwise identical either way).
        #[arg(long)]
        deterministic: bool,
        /// Resume exactly from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: per-embodiment flow loss, action MSE, success.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Closed-loop trials per embodiment.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export routing frequencies as CSV (layer,layer_kind,expert,group,frequency).
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Forward passes per (embodiment × action-space) group.
        #[arg(long, default_value_t = 16)]
        per_group: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the ablation grid; one independent train+evaluate per cell.
    Sweep {
        /// Base TrainConfig; cells are derived from it.
        #[arg(long)]
        config: PathBuf,
        /// Directory for the comparison table and raw results.
        #[arg(long)]
        out: PathBuf,
        /// Override total steps for every cell.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Rollout trials per embodiment per cell (0 skips rollouts).
        #[arg(long, default_value_t = 0)]
        trials: usize,
        /// Expert counts for an N×K grid; with --grid-k, replaces the
        /// standard architecture variants.
        #[arg(long, value_delimiter = ',')]
        grid_n: Vec<usize>,
        /// Routed-expert counts for the N×K grid.
        #[arg(long, value_delimiter = ',')]
        grid_k: Vec<usize>,
    },
    /// Generate the dataset a config describes and save it to a file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = TrainConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg.total_steps = n;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, seed, out, steps, deterministic, resume } => {
            let mut trainer = match &resume {
                Some(ckpt) => Trainer::from_checkpoint(ckpt)?,
                None => {
                    let mut cfg = load_config(&config, seed, steps)?;
                    cfg.deterministic |= deterministic;
                    Trainer::new(cfg)?
                }
            };
            if resume.is_some() {
                if let Some(n) = steps {
                    trainer.cfg.total_steps = n;
                }
                trainer.cfg.deterministic |= deterministic;
            }
            let rows = trainer.run(Some(&out))?;
            if let Some(last) = rows.last() {
                println!(
                    "step {} lr {:.3e} flow {:.6} as {:.6} hb {:.6} total {:.6}",
                    last.step, last.lr, last.l_flow, last.l_as, last.l_hb, last.total
                );
            }
            println!("checkpoint: {}", out.join("checkpoint.bin").display());
            Ok(())
        }
        Cmd::Eval { checkpoint, out, trials, seed } => {
            let trainer = Trainer::from_checkpoint(&checkpoint)?;
            let opts = EvalOptions { rollout_trials: trials, seed, ..EvalOptions::default() };
            let report = evaluate(&trainer.model, &trainer.dataset, &opts)?;
            let text = report.to_text();
            if let Some(p) = out {
                std::fs::write(&p, &text)?;
            }
            println!("{text}");
            Ok(())
        }
        Cmd::Heatmap { checkpoint, out, per_group, seed } => {
            let trainer = Trainer::from_checkpoint(&checkpoint)?;
            let rows = routing_heatmap(&trainer.model, &trainer.dataset, per_group, seed)?;
            let csv = heatmap_csv(&rows);
            match out {
                Some(p) => std::fs::write(&p, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Sweep { config, out, steps, seed, trials, grid_n, grid_k } => {
            let base = load_config(&config, seed, steps)?;
            let cells: Vec<SweepCell> = if !grid_n.is_empty() && !grid_k.is_empty() {
                grid_cells(&base, &grid_n, &grid_k)
            } else {
                standard_cells(&base)
            };
            let results = run_sweep(&cells, trials)?;
            let table = sweep_table(&results);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.txt"), &table)?;
            std::fs::write(
                out.join("sweep.json"),
                serde_json_string(&results).context("encoding sweep results")?,
            )?;
            println!("{table}");
            Ok(())
        }
        Cmd::GenData { config, out, seed } => {
            let cfg = load_config(&config, seed, None)?;
            let manifest = cfg
                .manifest
                .clone()
                .context("config has no inline dataset manifest")?;
            let ds = build_dataset(&manifest, &default_embodiments())?;
            ds.save(&out)?;
            println!(
                "wrote {} episodes ({} steps) to {}",
                ds.episodes.len(),
                ds.total_steps(),
                out.display()
            );
            Ok(())
        }
    }
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}
