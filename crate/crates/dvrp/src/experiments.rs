//! Evaluation methodology: blind experiments (black/white/text-only image
//! replacement), robustness and sensitivity sweeps over evaluation-time
//! perturbations, and the perturbation-parameter training ablation.
//!
//! Sampling seeds derive from (eval seed, task index, repeat) only, never
//! from the mode or cell, so comparisons across modes and cells are paired:
//! deltas reflect the intervention alone. Cells at zero perturbation
//! reproduce the unperturbed baseline exactly.

use crate::autodiff::ParamVector;
use crate::env::{BlindMode, Task};
use crate::error::Result;
use crate::policy::PolicySpec;
use crate::rng;
use crate::train::{self, eval_avg_at_k, SamplingConfig, TrainConfig};
use crate::views::{diffuse_noise, mask_patches, PerturbConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Binomial standard error of an accuracy estimate over `n` draws.
fn binomial_stderr(acc: f64, n: usize) -> f64 {
    (acc * (1.0 - acc) / n as f64).sqrt()
}

/// Accuracies under each image-replacement mode, with deltas against the
/// original view.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlindReport {
    pub accuracies: Vec<(BlindMode, f64)>,
    pub deltas: Vec<(BlindMode, f64)>,
    pub black_white_mean: f64,
    pub task_count: usize,
    pub repeats: usize,
    pub eval_seed: u64,
    pub sampling: SamplingConfig,
}

impl BlindReport {
    pub fn accuracy(&self, mode: BlindMode) -> f64 {
        self.accuracies.iter().find(|(m, _)| *m == mode).map(|&(_, a)| a).unwrap()
    }

    pub fn delta(&self, mode: BlindMode) -> f64 {
        self.deltas.iter().find(|(m, _)| *m == mode).map(|&(_, d)| d).unwrap()
    }

    /// Original accuracy minus the mean of the three blind modes: how much
    /// of the policy's performance actually depends on seeing the image.
    pub fn blind_drop(&self) -> f64 {
        let blind = (self.accuracy(BlindMode::Black)
            + self.accuracy(BlindMode::White)
            + self.accuracy(BlindMode::TextOnly))
            / 3.0;
        self.accuracy(BlindMode::Original) - blind
    }

    pub fn stderr(&self) -> f64 {
        binomial_stderr(self.accuracy(BlindMode::Original), self.task_count * self.repeats)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let n = self.task_count * self.repeats;
        writeln!(s, "{:<12} {:>10} {:>10} {:>10}", "mode", "acc", "delta", "stderr").unwrap();
        for &(mode, acc) in &self.accuracies {
            writeln!(
                s,
                "{:<12} {:>10.4} {:>+10.4} {:>10.4}",
                mode.name(),
                acc,
                self.delta(mode),
                binomial_stderr(acc, n)
            )
            .unwrap();
        }
        writeln!(s, "{:<12} {:>10.4}", "black/white", self.black_white_mean).unwrap();
        writeln!(s, "{:<12} {:>10.4}", "blind drop", self.blind_drop()).unwrap();
        writeln!(s, "tasks={} repeats={} eval_seed={}", self.task_count, self.repeats, self.eval_seed)
            .unwrap();
        s
    }
}

/// Evaluate all four modes on identical task sets and sampling seeds.
pub fn blind_experiment(
    params: &ParamVector,
    spec: &PolicySpec,
    tasks: &[Task],
    repeats: usize,
    sampling: &SamplingConfig,
    eval_seed: u64,
) -> BlindReport {
    let accuracies: Vec<(BlindMode, f64)> = BlindMode::ALL
        .iter()
        .map(|&mode| (mode, eval_avg_at_k(params, spec, tasks, repeats, mode, sampling, eval_seed)))
        .collect();
    let original = accuracies[0].1;
    let deltas = accuracies.iter().map(|&(m, a)| (m, a - original)).collect();
    let black = accuracies.iter().find(|(m, _)| *m == BlindMode::Black).unwrap().1;
    let white = accuracies.iter().find(|(m, _)| *m == BlindMode::White).unwrap().1;
    BlindReport {
        accuracies,
        deltas,
        black_white_mean: (black + white) / 2.0,
        task_count: tasks.len(),
        repeats,
        eval_seed,
        sampling: *sampling,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Baseline,
    Beta,
    PMask,
}

/// One perturbation level of the robustness sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub kind: SweepKind,
    pub value: f64,
    pub patch_size: usize,
    pub accuracy: f64,
    pub stderr: f64,
    pub task_count: usize,
    pub repeats: usize,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub sampling: SamplingConfig,
}

impl SweepReport {
    pub fn baseline(&self) -> &SweepCell {
        self.cells.iter().find(|c| c.kind == SweepKind::Baseline).unwrap()
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>8} {:>10} {:>10}", "kind", "value", "acc", "stderr").unwrap();
        for c in &self.cells {
            let kind = match c.kind {
                SweepKind::Baseline => "baseline",
                SweepKind::Beta => "beta",
                SweepKind::PMask => "p_mask",
            };
            writeln!(s, "{:<10} {:>8.3} {:>10.4} {:>10.4}", kind, c.value, c.accuracy, c.stderr)
                .unwrap();
        }
        s
    }

    /// `(x, y, stderr)` triples, one block per curve, for external plotting.
    pub fn plot_data(&self) -> String {
        let mut s = String::new();
        for kind in [SweepKind::Beta, SweepKind::PMask] {
            let label = if kind == SweepKind::Beta { "beta" } else { "p_mask" };
            writeln!(s, "# curve {label}").unwrap();
            for c in self.cells.iter().filter(|c| c.kind == kind) {
                writeln!(s, "{} {} {}", c.value, c.accuracy, c.stderr).unwrap();
            }
        }
        s
    }
}

/// Accuracy under evaluation-time perturbations at explicit fixed levels:
/// a baseline row, one row per noise intensity, one row per mask
/// probability. Perturbation draws are seeded per task (not per cell), so
/// cells differ only in the perturbation level itself.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    params: &ParamVector,
    spec: &PolicySpec,
    tasks: &[Task],
    betas: &[f64],
    p_masks: &[f64],
    patch_size: usize,
    repeats: usize,
    sampling: &SamplingConfig,
    eval_seed: u64,
) -> Result<SweepReport> {
    assert!(!betas.is_empty() || !p_masks.is_empty(), "sweep needs at least one level");
    let n = tasks.len() * repeats;
    let mut cells = Vec::new();

    let acc0 = eval_avg_at_k(params, spec, tasks, repeats, BlindMode::Original, sampling, eval_seed);
    cells.push(SweepCell {
        kind: SweepKind::Baseline,
        value: 0.0,
        patch_size,
        accuracy: acc0,
        stderr: binomial_stderr(acc0, n),
        task_count: tasks.len(),
        repeats,
        eval_seed,
    });

    let perturb_stream = rng::derive(eval_seed, rng::stream::NOISE);
    for &beta in betas {
        let perturbed: Vec<Task> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let img = t.image.as_ref().expect("sweep task lacks an image");
                let noised = diffuse_noise(img, beta, rng::derive(perturb_stream, i as u64))?;
                Ok(Task { image: Some(noised), ..t.clone() })
            })
            .collect::<Result<_>>()?;
        let acc =
            eval_avg_at_k(params, spec, &perturbed, repeats, BlindMode::Original, sampling, eval_seed);
        cells.push(SweepCell {
            kind: SweepKind::Beta,
            value: beta,
            patch_size,
            accuracy: acc,
            stderr: binomial_stderr(acc, n),
            task_count: tasks.len(),
            repeats,
            eval_seed,
        });
    }

    let mask_stream = rng::derive(eval_seed, rng::stream::MASK);
    for &p_mask in p_masks {
        let cfg = PerturbConfig { p_mask, patch_size, ..PerturbConfig::math() };
        let perturbed: Vec<Task> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let img = t.image.as_ref().expect("sweep task lacks an image");
                let (masked, _) = mask_patches(img, &cfg, rng::derive(mask_stream, i as u64));
                Task { image: Some(masked), ..t.clone() }
            })
            .collect();
        let acc =
            eval_avg_at_k(params, spec, &perturbed, repeats, BlindMode::Original, sampling, eval_seed);
        cells.push(SweepCell {
            kind: SweepKind::PMask,
            value: p_mask,
            patch_size,
            accuracy: acc,
            stderr: binomial_stderr(acc, n),
            task_count: tasks.len(),
            repeats,
            eval_seed,
        });
    }

    Ok(SweepReport { cells, sampling: *sampling })
}

/// One trained cell of the perturbation-parameter ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub p_mask: f64,
    pub t_init: f64,
    pub accuracy: f64,
    pub stderr: f64,
    pub train_seed: u64,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub task_count: usize,
    pub repeats: usize,
    pub sampling: SamplingConfig,
}

impl AblationReport {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>8} {:>8} {:>10} {:>10}", "p_mask", "t_init", "acc", "stderr").unwrap();
        for c in &self.cells {
            writeln!(s, "{:>8.2} {:>8.0} {:>10.4} {:>10.4}", c.p_mask, c.t_init, c.accuracy, c.stderr)
                .unwrap();
        }
        s
    }
}

/// Train one seeded run per (p_mask, t_init) cell of the grid and evaluate
/// each on the shared task set with shared eval seeds. Default grid:
/// p_mask in {0.2, 0.4, 0.6} x t_init in {100, 300, 500}.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sweep(
    base: &TrainConfig,
    p_masks: &[f64],
    t_inits: &[f64],
    eval_tasks: &[Task],
    repeats: usize,
    sampling: &SamplingConfig,
    eval_seed: u64,
    work_dir: &Path,
) -> Result<AblationReport> {
    assert!(!p_masks.is_empty() && !t_inits.is_empty());
    let n = eval_tasks.len() * repeats;
    let mut cells = Vec::new();
    for &p_mask in p_masks {
        for &t_init in t_inits {
            let cfg = TrainConfig {
                perturb: PerturbConfig { p_mask, t_init, ..base.perturb.clone() },
                ..base.clone()
            };
            let cell_dir =
                work_dir.join(format!("cell_p{:.2}_t{:.0}", p_mask, t_init));
            let out = train::train(&cfg, &cell_dir, None)?;
            let acc = eval_avg_at_k(
                &out.params,
                &cfg.policy,
                eval_tasks,
                repeats,
                BlindMode::Original,
                sampling,
                eval_seed,
            );
            cells.push(AblationCell {
                p_mask,
                t_init,
                accuracy: acc,
                stderr: binomial_stderr(acc, n),
                train_seed: cfg.seed,
                eval_seed,
            });
        }
    }
    Ok(AblationReport { cells, task_count: eval_tasks.len(), repeats, sampling: *sampling })
}

/// Write any serializable report rows as line-delimited JSON.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gen_task, GeneratorKind};
    use crate::policy::init_params;

    fn micro_spec() -> PolicySpec {
        PolicySpec {
            vocab_size: crate::env::vocab::SIZE,
            embed_dim: 4,
            hidden_dim: 8,
            patch_size: 14,
            channels: 3,
            max_tokens: 1,
        }
    }

    fn some_tasks(n: u64) -> Vec<Task> {
        (0..n).map(|i| gen_task(GeneratorKind::Count, 900 + i, 0)).collect()
    }

    #[test]
    fn blind_report_delta_arithmetic() {
        let spec = micro_spec();
        let params = init_params(&spec, 1);
        let tasks = some_tasks(20);
        let report = blind_experiment(&params, &spec, &tasks, 2, &SamplingConfig::default(), 5);
        assert_eq!(report.delta(BlindMode::Original), 0.0);
        for &mode in &BlindMode::ALL {
            let expect = report.accuracy(mode) - report.accuracy(BlindMode::Original);
            assert_eq!(report.delta(mode), expect);
        }
        let bw = (report.accuracy(BlindMode::Black) + report.accuracy(BlindMode::White)) / 2.0;
        assert_eq!(report.black_white_mean, bw);
        assert!(!report.render_table().is_empty());
    }

    #[test]
    fn zero_perturbation_cells_equal_baseline_exactly() {
        let spec = micro_spec();
        let params = init_params(&spec, 2);
        let tasks = some_tasks(15);
        let report = robustness_sweep(
            &params,
            &spec,
            &tasks,
            &[0.0, 0.5],
            &[0.0, 1.0],
            14,
            2,
            &SamplingConfig::default(),
            11,
        )
        .unwrap();
        let base = report.baseline().accuracy;
        let beta0 = report
            .cells
            .iter()
            .find(|c| c.kind == SweepKind::Beta && c.value == 0.0)
            .unwrap()
            .accuracy;
        let mask0 = report
            .cells
            .iter()
            .find(|c| c.kind == SweepKind::PMask && c.value == 0.0)
            .unwrap()
            .accuracy;
        assert_eq!(beta0, base);
        assert_eq!(mask0, base);
        assert_eq!(report.cells.len(), 5);
        assert!(report.plot_data().contains("# curve beta"));
    }

    #[test]
    fn sweep_cells_share_eval_seed() {
        let spec = micro_spec();
        let params = init_params(&spec, 3);
        let tasks = some_tasks(6);
        let report = robustness_sweep(
            &params,
            &spec,
            &tasks,
            &[0.3],
            &[0.6],
            14,
            1,
            &SamplingConfig::default(),
            77,
        )
        .unwrap();
        assert!(report.cells.iter().all(|c| c.eval_seed == 77));
    }
}
