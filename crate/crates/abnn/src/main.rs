use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use abnn::attack::{pgd_attack, roa_attack, AbnnWhiteBox, AttackSpec, evaluate_under_attack};
use abnn::config::ExperimentConfig;
use abnn::data::{DatasetContainer, DatasetMeta};
use abnn::experiment::{
    gradient_integrity_suite, load_run_data, run_experiment, train_all, GRADCHECK_TOLERANCE,
};
use abnn::net::SubGrad;
use abnn::report::write_json;
use abnn::tensor::Tensor;
use abnn::train::{cost_abnn, cost_no_defense, cost_oudefend, cost_pgd_at, cost_ratio, PassCounter};

/// Adaptive-BN defense workbench: train the defended model, attack it, and
/// account for the training cost.
#[derive(Parser)]
#[command(name = "abnn", version, about)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the substitute on its disjoint dataset and freeze it.
    Pretrain,
    /// Pre-train (if needed) and train the defended model; write checkpoints.
    Train,
    /// Generate adversarial batches against the defended model and export
    /// them in the dataset container format.
    Attack,
    /// Evaluate the defended model under no attack, PGD, and the occlusion
    /// attack.
    Eval,
    /// Full pipeline over all seeds: pretrain, train all methods, attack,
    /// evaluate, verify pass counts, emit report.json and results.csv.
    Run,
    /// Finite-difference gradient checks over every operation and the
    /// end-to-end composite.
    Gradcheck {
        /// Random cases per check.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Print the closed-form training-cost table for a given iteration
    /// budget (accepts `t_max=<k>`).
    Costmodel {
        /// Iteration budget, written as `t_max=<k>` or a bare integer.
        #[arg(default_value = "t_max=5")]
        t_max: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf), AnyError> {
    let path = cli
        .config
        .as_ref()
        .ok_or("--config <file.json> is required for this command")?;
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    cfg.out_dir = out.clone();
    Ok((cfg, out))
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    *cfg.seeds.first().expect("validated: seeds nonempty")
}

fn dispatch(cli: Cli) -> Result<ExitCode, AnyError> {
    match cli.command {
        Command::Costmodel { ref t_max } => {
            let t = parse_t_max(t_max)?;
            println!("training cost per step (N = one network pass), t_max = {t}:");
            println!("  no-defense  {:>4}N", cost_no_defense());
            println!("  pgd-at      {:>4}N", cost_pgd_at(t));
            println!("  oudefend    {:>4}N", cost_oudefend(t));
            println!("  abnn        {:>4}N", cost_abnn());
            println!("  pgd-at / abnn ratio: {:.4}", cost_ratio(t));
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { cases } => {
            println!("gradient integrity, {cases} cases per check, tolerance {GRADCHECK_TOLERANCE:.0e}:");
            let outcomes = gradient_integrity_suite(cases, cli.seed.unwrap_or(0));
            let mut all_pass = true;
            for o in &outcomes {
                println!(
                    "  {:<28} max rel err {:>12.3e}  {}",
                    o.name,
                    o.max_rel_err,
                    if o.pass { "PASS" } else { "FAIL" }
                );
                all_pass &= o.pass;
            }
            Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Run => {
            let (cfg, out) = load_config(&cli)?;
            let report = run_experiment(&cfg, &out)?;
            println!("report: {}", out.join("report.json").display());
            println!("results: {}", out.join("results.csv").display());
            for m in &report.median {
                println!(
                    "  {:<11} clean {:>6.3}  pgd {:>6.3}  roa {:>6.3}  cost {}N/step",
                    m.method, m.clean_acc, m.pgd_acc, m.roa_acc, m.passes_per_step
                );
            }
            let ok = report.all_cost_checks_passed;
            if !ok {
                eprintln!("cost-model verification FAILED");
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Pretrain => {
            let (cfg, out) = load_config(&cli)?;
            let seed = first_seed(&cfg);
            std::fs::create_dir_all(&out)?;
            let data = load_run_data(&cfg, seed)?;
            let mut substitute = abnn::net::ConvNet::build(
                &cfg.substitute_blocks,
                data.pretrain.image_dims().0,
                data.pretrain.num_classes,
                abnn::train::NetKind::Substitute,
                seed,
            )?;
            let outcome = abnn::train::pretrain_substitute(
                &data.pretrain,
                &mut substitute,
                &cfg.pretrain,
                seed,
            )?;
            let ckpt = out.join("substitute.ckpt");
            substitute.save(&ckpt)?;
            write_json(
                &out.join("pretrain_manifest.json"),
                &serde_json::json!({
                    "seed": seed,
                    "steps": outcome.steps,
                    "epoch_losses": outcome.epoch_losses,
                    "forward_passes": outcome.counter.total_forward(),
                    "backward_passes": outcome.counter.total_backward(),
                    "digest": substitute.digest(),
                    "checkpoint": ckpt,
                    "config": serde_json::to_value(&cfg)?,
                }),
            )?;
            println!("substitute pre-trained and frozen: {}", ckpt.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train => {
            let (cfg, out) = load_config(&cli)?;
            let seed = first_seed(&cfg);
            std::fs::create_dir_all(&out)?;
            let data = load_run_data(&cfg, seed)?;
            let models = train_all(&cfg, &data, seed)?;
            models.abnn.target.save(&out.join("target.ckpt"))?;
            models.abnn.substitute.save(&out.join("substitute.ckpt"))?;
            models.no_defense.save(&out.join("no_defense.ckpt"))?;
            models.pgd_at.save(&out.join("pgd_at.ckpt"))?;
            write_json(
                &out.join("train_manifest.json"),
                &serde_json::json!({
                    "seed": seed,
                    "abnn": {
                        "steps": models.abnn_outcome.steps,
                        "passes": models.abnn_outcome.counter.total_passes(),
                        "epoch_losses": models.abnn_outcome.epoch_losses,
                    },
                    "no_defense": {
                        "steps": models.no_defense_outcome.steps,
                        "passes": models.no_defense_outcome.counter.total_passes(),
                    },
                    "pgd_at": {
                        "steps": models.pgd_at_outcome.steps,
                        "passes": models.pgd_at_outcome.counter.total_passes(),
                    },
                    "substitute_digest": models.abnn.substitute.digest(),
                    "config": serde_json::to_value(&cfg)?,
                }),
            )?;
            println!("checkpoints written under {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack => {
            let (cfg, out) = load_config(&cli)?;
            let seed = first_seed(&cfg);
            std::fs::create_dir_all(&out)?;
            let data = load_run_data(&cfg, seed)?;
            let models = train_all(&cfg, &data, seed)?;
            let view = AbnnWhiteBox { model: &models.abnn, surface: SubGrad::Full };
            let subset = data.test.take(cfg.eval_batch_size.max(16));
            let indices: Vec<usize> = (0..subset.len()).collect();
            let (x, y) = subset.batch(&indices);
            let mut counter = PassCounter::default();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let pgd = pgd_attack(&view, &x, &y, &cfg.pgd, &mut rng, &mut counter)?;
            let roa = roa_attack(&view, &x, &y, &cfg.roa, &mut counter)?;
            let export = |name: &str, images: &Tensor| -> Result<PathBuf, AnyError> {
                let path = out.join(name);
                DatasetContainer::new(
                    images.clone(),
                    y.clone(),
                    subset.num_classes,
                    DatasetMeta { source: name.into(), class_subset: None },
                )?
                .save(&path)?;
                Ok(path)
            };
            let p1 = export("adv_pgd.abnd", &pgd.x_adv)?;
            let p2 = export("adv_roa.abnd", &roa.x_adv)?;
            println!(
                "pgd:  loss {:.4} -> {:.4}, success {}/{} -> {}",
                pgd.loss_before,
                pgd.loss_after,
                pgd.success.iter().filter(|s| **s).count(),
                y.len(),
                p1.display()
            );
            println!(
                "roa:  loss {:.4} -> {:.4}, success {}/{} -> {}",
                roa.loss_before,
                roa.loss_after,
                roa.success.iter().filter(|s| **s).count(),
                y.len(),
                p2.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval => {
            let (cfg, out) = load_config(&cli)?;
            let seed = first_seed(&cfg);
            std::fs::create_dir_all(&out)?;
            let data = load_run_data(&cfg, seed)?;
            let models = train_all(&cfg, &data, seed)?;
            let view = AbnnWhiteBox { model: &models.abnn, surface: SubGrad::Full };
            let mut counter = PassCounter::default();
            let clean = evaluate_under_attack(
                &view, &data.test, &AttackSpec::None, cfg.eval_batch_size, seed, &mut counter,
            )?;
            let pgd_set = data.test.take(cfg.pgd_eval_samples);
            let pgd = evaluate_under_attack(
                &view, &pgd_set, &AttackSpec::Pgd(cfg.pgd), cfg.eval_batch_size, seed, &mut counter,
            )?;
            let roa_set = data.test.take(cfg.roa_eval_samples);
            let roa = evaluate_under_attack(
                &view, &roa_set, &AttackSpec::Roa(cfg.roa), cfg.eval_batch_size, seed, &mut counter,
            )?;
            write_json(
                &out.join("eval.json"),
                &serde_json::json!({
                    "seed": seed, "clean_acc": clean, "pgd_acc": pgd, "roa_acc": roa,
                }),
            )?;
            println!("clean {clean:.4}  pgd {pgd:.4}  roa {roa:.4}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_t_max(arg: &str) -> Result<usize, AnyError> {
    let raw = arg.strip_prefix("t_max=").unwrap_or(arg);
    let t: usize = raw
        .parse()
        .map_err(|_| format!("expected t_max=<k> or an integer, got `{arg}`"))?;
    if t == 0 {
        return Err("t_max must be at least 1".into());
    }
    Ok(t)
}
