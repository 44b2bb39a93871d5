//! Train GRPO and the differential variant side by side on the counting
//! task, then compare how much each policy actually depends on the image:
//! blind-evaluation accuracy drop (original minus the mean of black, white
//! and text-only) for both, across seeds.
//!
//! Usage: cargo run --release --example blind_gap [steps] [lr] [seeds] [eval_tasks]

use dvrp::env::{gen_task, BlindMode, GeneratorKind};
use dvrp::experiments::blind_experiment;
use dvrp::objective::DvrpConfig;
use dvrp::policy::PolicySpec;
use dvrp::train::{train, SamplingConfig, TrainConfig};
use dvrp::views::PerturbConfig;

fn base_config(steps: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        policy: PolicySpec {
            vocab_size: dvrp::env::vocab::SIZE,
            embed_dim: 8,
            hidden_dim: 16,
            patch_size: 14,
            channels: 3,
            max_tokens: 1,
        },
        dvrp: DvrpConfig::grpo(),
        perturb: PerturbConfig::math(),
        generator: GeneratorKind::Count,
        difficulty: 0,
        learning_rate: lr,
        rollout_batch: 8,
        global_batch: 8,
        epochs: 1,
        total_steps: steps,
        seed,
        temperature: 1.0,
        top_p: 0.99,
        max_tokens: 1,
        checkpoint_every: 0,
        deterministic: true,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(3000, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(3e-3, |s| s.parse().unwrap());
    let n_seeds: u64 = args.get(3).map_or(3, |s| s.parse().unwrap());
    let n_eval: u64 = args.get(4).map_or(500, |s| s.parse().unwrap());
    let variant = args.get(5).map_or("default", |s| s.as_str());
    let repeats = 8;

    let eval_tasks: Vec<_> =
        (0..n_eval).map(|i| gen_task(GeneratorKind::Count, 7_000_000 + i, 0)).collect();
    let sampling = SamplingConfig { temperature: 1.0, top_p: 0.9, max_tokens: 1 };
    let tmp = std::env::temp_dir().join("dvrp_blind_gap");

    println!("steps={steps} lr={lr} seeds={n_seeds} eval_tasks={n_eval} repeats={repeats}");
    println!(
        "{:<6} {:<6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "seed", "algo", "orig", "black", "white", "text", "bw_mean", "drop"
    );

    let dvrp_variant = match variant {
        "default" | "ppo3" => DvrpConfig::dvrp_g(),
        "ent02" => DvrpConfig { lambda_ent: 0.02, ..DvrpConfig::dvrp_g() },
        "stopgrad" => DvrpConfig { stop_grad_ori: true, ..DvrpConfig::dvrp_g() },
        "cap" => DvrpConfig { kl_cap: Some(2.0), ..DvrpConfig::dvrp_g() },
        other => panic!("unknown variant {other}"),
    };
    println!("variant={variant}: {dvrp_variant:?}");

    for seed in 1..=n_seeds {
        for (name, dvrp_cfg) in
            [("grpo", DvrpConfig::grpo()), ("dvrp_g", dvrp_variant.clone())]
        {
            let mut cfg = base_config(steps, lr, seed);
            cfg.dvrp = dvrp_cfg;
            if variant == "ppo3" {
                cfg.rollout_batch = 24;
                cfg.global_batch = 8;
                cfg.epochs = 3;
            }
            let dir = tmp.join(format!("s{seed}_{name}"));
            let started = std::time::Instant::now();
            let out = train(&cfg, &dir, None).expect("training failed");
            let report =
                blind_experiment(&out.params, &cfg.policy, &eval_tasks, repeats, &sampling, 99);
            println!(
                "{:<6} {:<6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}   ({:.1}s)",
                seed,
                name,
                report.accuracy(BlindMode::Original),
                report.accuracy(BlindMode::Black),
                report.accuracy(BlindMode::White),
                report.accuracy(BlindMode::TextOnly),
                report.black_white_mean,
                report.blind_drop(),
                started.elapsed().as_secs_f64()
            );
        }
    }
}
