//! End-to-end experiment pipeline: pre-train, train the three methods,
//! attack, evaluate, verify the cost model, and emit reports.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attack::{evaluate_under_attack, AbnnWhiteBox, AttackSpec, WhiteBox};
use crate::config::{ExperimentConfig, Task};
use crate::data::{gen_synthetic, load_cifar10_split, CifarSplit, DatasetContainer, SyntheticSpec};
use crate::net::{AbnnModel, ConvNet, SubGrad};
use crate::norm::{AdaptiveBatchNorm, BatchNorm, BnMode};
use crate::report::{
    median_metrics, results_csv, validate_report_json, write_json, CostTable, CostVerdict,
    MethodMetrics, Report, SeedReport,
};
use crate::tensor::{finite_diff_check, ParamStore, Tensor};
use crate::train::{
    cost_abnn, cost_no_defense, cost_oudefend, cost_pgd_at, cost_ratio, pretrain_substitute,
    train_pgd_at, train_plain, train_target, verify_cost_model, NetKind, PassCounter,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("[stage {stage}] {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

fn stage<T, E: std::fmt::Display>(name: &'static str, r: Result<T, E>) -> Result<T, RunError> {
    r.map_err(|e| RunError::Stage { stage: name, message: e.to_string() })
}

/// Seed derivation for the independent sub-streams of one run.
fn derive(seed: u64, lane: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(lane)
}

/// The three datasets a run needs: substitute pre-training (disjoint
/// classes), target-task training, and target-task test.
pub struct RunData {
    pub pretrain: DatasetContainer,
    pub train: DatasetContainer,
    pub test: DatasetContainer,
}

pub fn load_run_data(cfg: &ExperimentConfig, seed: u64) -> Result<RunData, RunError> {
    match cfg.task {
        Task::ImageToy => {
            let side = cfg.image_side;
            let mut task_a = SyntheticSpec::task_a(cfg.train_samples, side);
            let mut task_b_train = SyntheticSpec::task_b(cfg.train_samples, side);
            let mut task_b_test = SyntheticSpec::task_b(cfg.test_samples, side);
            if let Some(over) = &cfg.synthetic {
                over.apply(&mut task_a);
                over.apply(&mut task_b_train);
                over.apply(&mut task_b_test);
            }
            Ok(RunData {
                pretrain: gen_synthetic(&task_a, derive(seed, 10)),
                train: gen_synthetic(&task_b_train, derive(seed, 11)),
                test: gen_synthetic(&task_b_test, derive(seed, 12)),
            })
        }
        Task::CifarSubset => {
            let root = cfg
                .resolved_data_root()
                .expect("validated: data root present for cifar task");
            let pre = stage(
                "load-data",
                load_cifar10_split(&root, CifarSplit::Train, Some(&cfg.substitute_classes)),
            )?;
            let train = stage(
                "load-data",
                load_cifar10_split(&root, CifarSplit::Train, Some(&cfg.target_classes)),
            )?;
            let test = stage(
                "load-data",
                load_cifar10_split(&root, CifarSplit::Test, Some(&cfg.target_classes)),
            )?;
            Ok(RunData {
                pretrain: pre.take(cfg.cifar_train_limit),
                train: train.take(cfg.cifar_train_limit),
                test: test.take(cfg.cifar_test_limit),
            })
        }
    }
}

/// Models trained by one run, kept for checkpointing and reuse.
pub struct TrainedModels {
    pub abnn: AbnnModel,
    pub no_defense: ConvNet,
    pub pgd_at: ConvNet,
    pub abnn_outcome: TrainOutcome,
    pub no_defense_outcome: TrainOutcome,
    pub pgd_at_outcome: TrainOutcome,
    pub substitute_digest_before: String,
}

/// Pre-train the substitute and train all three methods on one seed.
pub fn train_all(
    cfg: &ExperimentConfig,
    data: &RunData,
    seed: u64,
) -> Result<TrainedModels, RunError> {
    let in_channels = data.train.image_dims().0;
    let classes = data.train.num_classes;

    let mut substitute = stage(
        "build-substitute",
        ConvNet::build(
            &cfg.substitute_blocks,
            in_channels,
            data.pretrain.num_classes,
            NetKind::Substitute,
            derive(seed, 1),
        ),
    )?;
    stage(
        "pretrain",
        pretrain_substitute(&data.pretrain, &mut substitute, &cfg.pretrain, derive(seed, 2)),
    )?;
    let substitute_digest_before = substitute.digest();

    let mut abnn = stage(
        "build-target",
        AbnnModel::with_substitute(&cfg.target_blocks, substitute, classes, derive(seed, 3)),
    )?;
    let abnn_outcome =
        stage("train-target", train_target(&data.train, &mut abnn, &cfg.train, derive(seed, 4)))?;

    let mut no_defense = stage(
        "build-baseline",
        ConvNet::build(&cfg.target_blocks, in_channels, classes, NetKind::Target, derive(seed, 5)),
    )?;
    let no_defense_outcome = stage(
        "train-baseline",
        train_plain(&data.train, &mut no_defense, &cfg.train, derive(seed, 6)),
    )?;

    let mut pgd_at = stage(
        "build-pgd-at",
        ConvNet::build(&cfg.target_blocks, in_channels, classes, NetKind::Target, derive(seed, 7)),
    )?;
    let pgd_at_outcome = stage(
        "train-pgd-at",
        train_pgd_at(&data.train, &mut pgd_at, &cfg.train, &cfg.pgd, derive(seed, 8)),
    )?;

    Ok(TrainedModels {
        abnn,
        no_defense,
        pgd_at,
        abnn_outcome,
        no_defense_outcome,
        pgd_at_outcome,
        substitute_digest_before,
    })
}

fn accuracy_suite(
    model: &dyn WhiteBox,
    cfg: &ExperimentConfig,
    test: &DatasetContainer,
    seed: u64,
) -> Result<(f64, f64, f64), RunError> {
    let mut counter = PassCounter::default();
    let clean = stage(
        "eval-clean",
        evaluate_under_attack(model, test, &AttackSpec::None, cfg.eval_batch_size, seed, &mut counter),
    )?;
    let pgd_set = test.take(cfg.pgd_eval_samples);
    let pgd = stage(
        "eval-pgd",
        evaluate_under_attack(
            model,
            &pgd_set,
            &AttackSpec::Pgd(cfg.pgd),
            cfg.eval_batch_size,
            derive(seed, 20),
            &mut counter,
        ),
    )?;
    let roa_set = test.take(cfg.roa_eval_samples);
    let roa = stage(
        "eval-roa",
        evaluate_under_attack(
            model,
            &roa_set,
            &AttackSpec::Roa(cfg.roa),
            cfg.eval_batch_size,
            derive(seed, 21),
            &mut counter,
        ),
    )?;
    Ok((clean, pgd, roa))
}

/// One complete seed: train everything, evaluate under all attacks, verify
/// the measured pass counts against the closed-form predictions.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &RunData,
    seed: u64,
) -> Result<(SeedReport, TrainedModels), RunError> {
    let models = train_all(cfg, data, seed)?;

    let (nd_clean, nd_pgd, nd_roa) =
        accuracy_suite(&models.no_defense, cfg, &data.test, derive(seed, 30))?;
    let (at_clean, at_pgd, at_roa) =
        accuracy_suite(&models.pgd_at, cfg, &data.test, derive(seed, 31))?;
    let abnn_view = AbnnWhiteBox { model: &models.abnn, surface: SubGrad::Full };
    let (ab_clean, ab_pgd, ab_roa) = accuracy_suite(&abnn_view, cfg, &data.test, derive(seed, 32))?;

    // Secondary surface: adversary treats substitute statistics as
    // constants.
    let target_only = AbnnWhiteBox { model: &models.abnn, surface: SubGrad::Detached };
    let mut counter = PassCounter::default();
    let pgd_set = data.test.take(cfg.pgd_eval_samples);
    let ab_pgd_detached = stage(
        "eval-pgd",
        evaluate_under_attack(
            &target_only,
            &pgd_set,
            &AttackSpec::Pgd(cfg.pgd),
            cfg.eval_batch_size,
            derive(seed, 33),
            &mut counter,
        ),
    )?;

    let methods = vec![
        MethodMetrics {
            method: "no-defense".into(),
            clean_acc: nd_clean,
            pgd_acc: nd_pgd,
            roa_acc: nd_roa,
            passes_per_step: cost_no_defense(),
        },
        MethodMetrics {
            method: "pgd-at".into(),
            clean_acc: at_clean,
            pgd_acc: at_pgd,
            roa_acc: at_roa,
            passes_per_step: cost_pgd_at(cfg.pgd.t_max),
        },
        MethodMetrics {
            method: "abnn".into(),
            clean_acc: ab_clean,
            pgd_acc: ab_pgd,
            roa_acc: ab_roa,
            passes_per_step: cost_abnn(),
        },
    ];

    let verdict = |method: &str, outcome: &TrainOutcome, predicted: u64| CostVerdict {
        method: method.into(),
        steps: outcome.steps,
        measured_passes: outcome.counter.total_passes(),
        predicted_per_step: predicted,
        exact: verify_cost_model(&outcome.counter, outcome.steps, predicted),
    };
    let cost_verdicts = vec![
        verdict("no-defense", &models.no_defense_outcome, cost_no_defense()),
        verdict("pgd-at", &models.pgd_at_outcome, cost_pgd_at(cfg.pgd.t_max)),
        verdict("abnn", &models.abnn_outcome, cost_abnn()),
    ];

    let report = SeedReport {
        seed,
        methods,
        cost_verdicts,
        substitute_digest_before: models.substitute_digest_before.clone(),
        substitute_digest_after: models.abnn.substitute.digest(),
        abnn_pgd_acc_target_only: ab_pgd_detached,
    };
    Ok((report, models))
}

/// Run every seed, merge deterministically (sorted by seed), write
/// `report.json`, `results.csv`, per-seed CSVs, and checkpoints.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Report, RunError> {
    stage("prepare-out", std::fs::create_dir_all(out_dir))?;
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();

    // Independent runs fan out; results are merged in seed order.
    let mut per_seed: Vec<(u64, SeedReport, TrainedModels)> = Vec::new();
    let results: Vec<Result<(u64, SeedReport, TrainedModels), RunError>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    scope.spawn(move || {
                        let data = load_run_data(cfg, seed)?;
                        let (report, models) = run_seed(cfg, &data, seed)?;
                        eprintln!("[seed {seed}] done");
                        Ok((seed, report, models))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
        });
    for r in results {
        per_seed.push(r?);
    }
    per_seed.sort_by_key(|(seed, _, _)| *seed);

    for (seed, report, models) in &per_seed {
        let seed_dir = out_dir.join(format!("seed{seed}"));
        stage("write-output", std::fs::create_dir_all(&seed_dir))?;
        stage(
            "write-output",
            std::fs::write(
                out_dir.join(format!("results_seed{seed}.csv")),
                results_csv(&report.methods),
            ),
        )?;
        stage("checkpoint", models.abnn.target.save(&seed_dir.join("target.ckpt")))?;
        stage("checkpoint", models.abnn.substitute.save(&seed_dir.join("substitute.ckpt")))?;
        stage("checkpoint", models.no_defense.save(&seed_dir.join("no_defense.ckpt")))?;
        stage("checkpoint", models.pgd_at.save(&seed_dir.join("pgd_at.ckpt")))?;
    }

    let seed_reports: Vec<SeedReport> = per_seed.iter().map(|(_, r, _)| r.clone()).collect();
    let all_cost_checks_passed = seed_reports
        .iter()
        .all(|r| r.cost_verdicts.iter().all(|v| v.exact));
    let report = Report {
        schema_version: 1,
        config: serde_json::to_value(cfg).expect("config serializes"),
        seeds: seeds.clone(),
        per_seed: seed_reports.clone(),
        median: median_metrics(&seed_reports),
        cost_model: CostTable {
            t_max: cfg.pgd.t_max,
            abnn: cost_abnn(),
            pgd_at: cost_pgd_at(cfg.pgd.t_max),
            oudefend: cost_oudefend(cfg.pgd.t_max),
            no_defense: cost_no_defense(),
            ratio_pgd_at_over_abnn: cost_ratio(cfg.pgd.t_max),
        },
        all_cost_checks_passed,
    };

    let json = serde_json::to_value(&report).expect("report serializes");
    stage("validate-report", validate_report_json(&json))?;
    stage("write-output", write_json(&out_dir.join("report.json"), &report))?;
    stage("write-output", std::fs::write(out_dir.join("results.csv"), results_csv(&report.median)))?;
    Ok(report)
}

// ── Gradient integrity suite ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference checks over every differentiable operation and the
/// end-to-end composite, `cases` random instances each.
pub fn gradient_integrity_suite(cases: usize, seed: u64) -> Vec<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();
    let mut record = |name: &'static str, worst: f64, cases: usize| {
        outcomes.push(GradCheckOutcome {
            name,
            cases,
            max_rel_err: worst,
            pass: worst < GRADCHECK_TOLERANCE,
        });
    };

    // conv2d w.r.t. input and kernel.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let x = Tensor::uniform(vec![1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(vec![3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let probe = Tensor::uniform(vec![1, 3, 5, 5], -1.0, 1.0, &mut rng);
        let (kc, pc) = (k.clone(), probe.clone());
        worst = worst.max(
            finite_diff_check(
                move |g, xv| {
                    let kv = g.constant(&kc);
                    let c = g.conv2d(xv, kv, 1, 1)?;
                    let pv = g.constant(&pc);
                    let m = g.mul(c, pv)?;
                    Ok(g.mean_all(m))
                },
                &x,
                1e-5,
            )
            .expect("conv gradcheck"),
        );
        let (xc, pc) = (x.clone(), probe.clone());
        worst = worst.max(
            finite_diff_check(
                move |g, kv| {
                    let xv = g.constant(&xc);
                    let c = g.conv2d(xv, kv, 1, 1)?;
                    let pv = g.constant(&pc);
                    let m = g.mul(c, pv)?;
                    Ok(g.mean_all(m))
                },
                &k,
                1e-5,
            )
            .expect("conv kernel gradcheck"),
        );
    }
    record("conv2d", worst, cases);

    // linear w.r.t. input, weight, bias.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(vec![3], -1.0, 1.0, &mut rng);
        let probe = Tensor::uniform(vec![3, 3], -1.0, 1.0, &mut rng);
        for side in 0..3 {
            let (xc, wc, bc, pc) = (x.clone(), w.clone(), b.clone(), probe.clone());
            let at = [&x, &w, &b][side].clone();
            let check = move |g: &mut crate::Graph, v: crate::Var| {
                let xv = if side == 0 { v } else { g.constant(&xc) };
                let wv = if side == 1 { v } else { g.constant(&wc) };
                let bv = if side == 2 { v } else { g.constant(&bc) };
                let y = g.linear(xv, wv, bv)?;
                let pv = g.constant(&pc);
                let m = g.mul(y, pv)?;
                Ok(g.mean_all(m))
            };
            worst = worst.max(finite_diff_check(check, &at, 1e-5).expect("linear gradcheck"));
        }
    }
    record("linear", worst, cases);

    // relu + pooling composition.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let x = Tensor::uniform(vec![2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let probe = Tensor::uniform(vec![2, 3], -1.0, 1.0, &mut rng);
        let pc = probe.clone();
        worst = worst.max(
            finite_diff_check(
                move |g, xv| {
                    let a = g.relu(xv);
                    let p = g.avg_pool2d(a, 2, 2)?;
                    let gp = g.global_avg_pool(p)?;
                    let pv = g.constant(&pc);
                    let m = g.mul(gp, pv)?;
                    Ok(g.mean_all(m))
                },
                &x,
                1e-5,
            )
            .expect("pool gradcheck"),
        );
    }
    record("relu_pool", worst, cases);

    // softmax cross entropy.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let logits = Tensor::uniform(vec![4, 5], -2.0, 2.0, &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let lc = labels.clone();
        worst = worst.max(
            finite_diff_check(
                move |g, lv| g.softmax_cross_entropy(lv, &lc),
                &logits,
                1e-5,
            )
            .expect("ce gradcheck"),
        );
    }
    record("softmax_cross_entropy", worst, cases);

    // standard batch norm, train mode.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        for v in store.get_mut(bn.gamma).value.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        let z = Tensor::uniform(vec![2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let probe = Tensor::uniform(vec![2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let pc = probe.clone();
        worst = worst.max(
            finite_diff_check(
                move |g, zv| {
                    let (out, _) = bn.forward(g, &store, zv, BnMode::Train)?;
                    let pv = g.constant(&pc);
                    let m = g.mul(out, pv)?;
                    Ok(g.mean_all(m))
                },
                &z,
                1e-5,
            )
            .expect("bn gradcheck"),
        );
    }
    record("batch_norm", worst, cases);

    // adaptive BN through both routes.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::new();
        let layer = AdaptiveBatchNorm::new(&mut store, "abn", 2, 3, &mut rng);
        for v in store.get_mut(layer.encoder.weight).value.data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
        let z_t = Tensor::uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let z_s = Tensor::uniform(vec![2, 2, 2, 2], -1.0, 1.0, &mut rng);
        let probe = Tensor::uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let (sc, lc, zsc, pc) = (store.clone(), layer.clone(), z_s.clone(), probe.clone());
        worst = worst.max(
            finite_diff_check(
                move |g, tv| {
                    let sv = g.constant(&zsc);
                    let out = lc.forward(g, &sc, tv, sv, None)?;
                    let pv = g.constant(&pc);
                    let m = g.mul(out, pv)?;
                    Ok(g.mean_all(m))
                },
                &z_t,
                1e-5,
            )
            .expect("adaptive target gradcheck"),
        );
        let (sc, lc, ztc, pc) = (store.clone(), layer.clone(), z_t.clone(), probe.clone());
        worst = worst.max(
            finite_diff_check(
                move |g, sv| {
                    let tv = g.constant(&ztc);
                    let out = lc.forward(g, &sc, tv, sv, None)?;
                    let pv = g.constant(&pc);
                    let m = g.mul(out, pv)?;
                    Ok(g.mean_all(m))
                },
                &z_s,
                1e-5,
            )
            .expect("adaptive substitute gradcheck"),
        );
    }
    record("adaptive_batch_norm", worst, cases);

    // End-to-end composite input gradient (full white-box surface).
    let mut worst = 0.0f64;
    let specs_t = [crate::net::ConvBlockSpec { out_channels: 3, kernel: 3, stride: 1, pool: true },
        crate::net::ConvBlockSpec { out_channels: 4, kernel: 3, stride: 1, pool: true }];
    let specs_s = [crate::net::ConvBlockSpec { out_channels: 3, kernel: 3, stride: 1, pool: true },
        crate::net::ConvBlockSpec { out_channels: 3, kernel: 3, stride: 1, pool: true }];
    for case in 0..cases {
        let model = AbnnModel::build(&specs_t, &specs_s, 2, 3, derive(seed, 100 + case as u64))
            .expect("tiny composite builds");
        let x = Tensor::uniform(vec![1, 2, 6, 6], 0.0, 1.0, &mut rng);
        let labels = vec![rng.random_range(0..3)];
        worst = worst.max(
            finite_diff_check(
                move |g, xv| {
                    let mut counter = PassCounter::default();
                    let logits = model.forward(g, xv, SubGrad::Full, None, &mut counter)?;
                    g.softmax_cross_entropy(logits, &labels)
                },
                &x,
                1e-5,
            )
            .expect("composite gradcheck"),
        );
    }
    record("abnn_composite_end_to_end", worst, cases);

    outcomes
}
