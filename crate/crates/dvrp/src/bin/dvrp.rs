//! Command-line interface: dataset generation, perturbation preview,
//! training, evaluation, blind experiments, robustness sweeps and the
//! perturbation ablation grid.

use clap::{Parser, Subcommand};
use dvrp::env::{self, BlindMode, GeneratorKind};
use dvrp::error::Result;
use dvrp::experiments::{self, write_jsonl};
use dvrp::train::{self, SamplingConfig, TrainConfig};
use dvrp::views::{make_triplet, ImageGrid, PerturbConfig};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "dvrp", about = "Differential visual reasoning policy lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate N tasks from a named generator into a dataset file.
    GenData {
        #[arg(long, default_value = "count")]
        generator: String,
        #[arg(long, short = 'n', default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        difficulty: u8,
        /// Output directory; tasks land in <out>/tasks.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a .grid image and write its masked/noised views plus the mask
    /// bitmap as a text matrix.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        p_mask: f64,
        #[arg(long, default_value_t = 14)]
        patch_size: usize,
        /// Explicit noise intensity; overrides the schedule when set.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 500.0)]
        t_init: f64,
        #[arg(long, default_value_t = 1000.0)]
        t_max: f64,
        #[arg(long, default_value_t = 10.0)]
        gamma: f64,
        /// Schedule position k of K when --beta is not given.
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long, default_value_t = 1)]
        total_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train per a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Resume from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Emit a default training config as JSON (a starting point to edit).
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// avg@k accuracy of a checkpoint on a dataset under one mode.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, short = 'k', default_value_t = 8)]
        k: usize,
        #[arg(long, default_value = "original")]
        mode: String,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        #[arg(long, default_value_t = 1)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Blind experiment: original vs black/white/text-only on paired seeds.
    BlindEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, short = 'k', default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        #[arg(long, default_value_t = 1)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        /// Also write per-mode records to this JSONL file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Robustness sweep over evaluation-time noise and masking levels.
    RobustSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        /// Comma-separated noise intensities.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
        betas: Vec<f64>,
        /// Comma-separated mask probabilities.
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6")]
        p_masks: Vec<f64>,
        #[arg(long, default_value_t = 14)]
        patch_size: usize,
        #[arg(long, short = 'k', default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        #[arg(long, default_value_t = 1)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        /// Emit (x, y, stderr) triples per curve for external plotting.
        #[arg(long, default_value_t = false)]
        plot_data: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per (p_mask, t_init) grid cell and tabulate avg@k.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        eval_tasks: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6")]
        p_masks: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "100,300,500")]
        t_inits: Vec<f64>,
        #[arg(long, short = 'k', default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[arg(long)]
        work_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { generator, n, seed, difficulty, out } => {
            let kind = GeneratorKind::from_str(&generator)?;
            fs::create_dir_all(&out)?;
            let tasks: Vec<_> = (0..n)
                .map(|i| env::gen_task(kind, dvrp::rng::derive(seed, i as u64), difficulty))
                .collect();
            let path = out.join("tasks.jsonl");
            env::write_dataset(&path, &tasks)?;
            println!("wrote {} tasks to {}", tasks.len(), path.display());
        }
        Command::Perturb {
            input,
            p_mask,
            patch_size,
            beta,
            t_init,
            t_max,
            gamma,
            step,
            total_steps,
            seed,
            out_dir,
        } => {
            let image = ImageGrid::load(&input)?;
            let cfg = PerturbConfig { p_mask, patch_size, t_init, t_max, gamma, mask_fill: 0.0 };
            cfg.validate()?;
            if cfg.beta_overflow() {
                eprintln!(
                    "warning: t_init {} exceeds t_max {}; beta clamps at 1 for early steps",
                    cfg.t_init, cfg.t_max
                );
            }
            fs::create_dir_all(&out_dir)?;
            let mut triplet = make_triplet(&image, &cfg, step, total_steps.max(1), seed)?;
            if let Some(b) = beta {
                triplet.noised =
                    dvrp::views::diffuse_noise(&image, b, dvrp::rng::derive(seed, 1))?;
                triplet.beta = b;
            }
            triplet.masked.save(&out_dir.join("masked.grid"))?;
            triplet.noised.save(&out_dir.join("noised.grid"))?;
            fs::write(out_dir.join("mask_bitmap.txt"), triplet.mask_bitmap.to_text())?;
            println!(
                "masked {} of {} patches; beta = {:.6}",
                triplet.mask_bitmap.count(),
                triplet.mask_bitmap.mask.len(),
                triplet.beta
            );
        }
        Command::Train { config, out_dir, resume } => {
            let cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(&config)?)?;
            if cfg.perturb.beta_overflow() {
                eprintln!("warning: t_init exceeds t_max; beta clamps at 1 for early steps");
            }
            let out = train::train(&cfg, &out_dir, resume.as_deref())?;
            println!(
                "ran {} steps ({} skipped); final checkpoint {}",
                out.steps_run,
                out.skipped_steps,
                out.final_checkpoint.display()
            );
        }
        Command::InitConfig { out } => {
            let cfg = TrainConfig::default();
            fs::write(&out, serde_json::to_string_pretty(&cfg)?)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            tasks,
            k,
            mode,
            temperature,
            top_p,
            max_tokens,
            eval_seed,
        } => {
            let (spec, params) = train::load_policy_params(&checkpoint)?;
            let tasks = env::read_dataset(&tasks)?;
            let mode = BlindMode::from_str(&mode)?;
            let sampling = SamplingConfig { temperature, top_p, max_tokens };
            let acc =
                train::eval_avg_at_k(&params, &spec, &tasks, k, mode, &sampling, eval_seed);
            println!("avg@{k} accuracy ({}) over {} tasks: {:.4}", mode.name(), tasks.len(), acc);
        }
        Command::BlindEval {
            checkpoint,
            tasks,
            k,
            temperature,
            top_p,
            max_tokens,
            eval_seed,
            out,
        } => {
            let (spec, params) = train::load_policy_params(&checkpoint)?;
            let tasks = env::read_dataset(&tasks)?;
            let sampling = SamplingConfig { temperature, top_p, max_tokens };
            let report =
                experiments::blind_experiment(&params, &spec, &tasks, k, &sampling, eval_seed);
            print!("{}", report.render_table());
            if let Some(path) = out {
                write_jsonl(&path, &[&report])?;
                println!("report written to {}", path.display());
            }
        }
        Command::RobustSweep {
            checkpoint,
            tasks,
            betas,
            p_masks,
            patch_size,
            k,
            temperature,
            top_p,
            max_tokens,
            eval_seed,
            plot_data,
            out,
        } => {
            let (spec, params) = train::load_policy_params(&checkpoint)?;
            let tasks = env::read_dataset(&tasks)?;
            let sampling = SamplingConfig { temperature, top_p, max_tokens };
            let report = experiments::robustness_sweep(
                &params, &spec, &tasks, &betas, &p_masks, patch_size, k, &sampling, eval_seed,
            )?;
            print!("{}", report.render_table());
            if plot_data {
                print!("{}", report.plot_data());
            }
            if let Some(path) = out {
                write_jsonl(&path, &report.cells)?;
                println!("cells written to {}", path.display());
            }
        }
        Command::Ablate { config, eval_tasks, p_masks, t_inits, k, eval_seed, work_dir, out } => {
            let cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(&config)?)?;
            let tasks = env::read_dataset(&eval_tasks)?;
            let sampling = SamplingConfig {
                temperature: cfg.temperature,
                top_p: 0.9,
                max_tokens: cfg.max_tokens,
            };
            let report = experiments::ablation_sweep(
                &cfg, &p_masks, &t_inits, &tasks, k, &sampling, eval_seed, &work_dir,
            )?;
            print!("{}", report.render_table());
            if let Some(path) = out {
                write_jsonl(&path, &report.cells)?;
                println!("cells written to {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
