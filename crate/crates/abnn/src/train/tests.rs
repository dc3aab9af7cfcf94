use super::*;
use crate::attack::attack_invocations;
use crate::data::{gen_synthetic, SyntheticSpec};
use crate::net::ConvBlockSpec;

fn tiny_specs(channels: &[usize]) -> Vec<ConvBlockSpec> {
    channels
        .iter()
        .map(|&c| ConvBlockSpec { out_channels: c, kernel: 3, stride: 1, pool: true })
        .collect()
}

fn tiny_dataset(samples: usize, seed: u64) -> DatasetContainer {
    gen_synthetic(&SyntheticSpec::task_b(samples, 8), seed)
}

fn quick_cfg(epochs: usize, batch: usize) -> SgdConfig {
    SgdConfig { learning_rate: 0.05, momentum: 0.9, epochs, batch_size: batch }
}

fn tiny_abnn(seed: u64) -> AbnnModel {
    AbnnModel::build(&tiny_specs(&[4, 4]), &tiny_specs(&[4, 4]), 3, 2, seed).unwrap()
}

#[test]
fn cost_formulas_reproduce_reported_values() {
    assert_eq!(cost_abnn(), 3);
    assert_eq!(cost_no_defense(), 2);
    assert_eq!(cost_pgd_at(5), 12);
    assert_eq!(cost_oudefend(5), 24);
    assert_eq!(cost_pgd_at(1), 4);
    assert!((cost_ratio(5) - 4.0).abs() < 1e-12);
    assert!((cost_ratio(2) - 2.0).abs() < 1e-12);
    // Two-thirds of (t_max + 1), as the linearized form states.
    for t in 1..=10 {
        assert!((cost_ratio(t) - 0.666_666_666_666_666_6 * (t as f64 + 1.0)).abs() < 1e-9);
    }
    let cm = CostModel { t_max: 5 };
    assert_eq!(
        (cm.abnn_per_step(), cm.pgd_at_per_step(), cm.oudefend_per_step(), cm.no_defense_per_step()),
        (3, 12, 24, 2)
    );
}

#[test]
fn one_defense_step_costs_exactly_three_passes() {
    let data = tiny_dataset(8, 1);
    let mut model = tiny_abnn(2);
    // One epoch, one full batch -> exactly one step.
    let out = train_target(&data, &mut model, &quick_cfg(1, 8), 3).unwrap();
    assert_eq!(out.steps, 1);
    assert_eq!(out.counter.forward_of(NetKind::Substitute), 1);
    assert_eq!(out.counter.forward_of(NetKind::Target), 1);
    assert_eq!(out.counter.backward_of(NetKind::Target), 1);
    assert_eq!(out.counter.backward_of(NetKind::Substitute), 0);
    assert_eq!(out.counter.total_passes(), cost_abnn());
}

#[test]
fn defense_passes_scale_additively_with_steps() {
    let data = tiny_dataset(24, 4);
    let mut model = tiny_abnn(5);
    let out = train_target(&data, &mut model, &quick_cfg(3, 4), 6).unwrap();
    assert_eq!(out.steps, 18, "24/4 batches over 3 epochs");
    assert_eq!(out.counter.total_passes(), 3 * out.steps);
    assert!(verify_cost_model(&out.counter, out.steps, cost_abnn()));
    assert!(!verify_cost_model(&out.counter, out.steps, cost_pgd_at(5)));
}

#[test]
fn adversarial_training_costs_match_the_iteration_budget() {
    let data = tiny_dataset(8, 7);
    for (t_max, expect) in [(5usize, 12u64), (1, 4)] {
        let mut net =
            ConvNet::build(&tiny_specs(&[4]), 3, 2, NetKind::Target, 8).unwrap();
        let pgd = PgdConfig { epsilon: 8.0 / 255.0, step_size: None, t_max, random_start: true };
        let out = train_pgd_at(&data, &mut net, &quick_cfg(1, 8), &pgd, 9).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.counter.total_passes(), expect, "t_max={t_max}");
        assert!(verify_cost_model(&out.counter, out.steps, cost_pgd_at(t_max)));
    }
}

#[test]
fn undefended_training_costs_two_passes_per_step() {
    let data = tiny_dataset(16, 10);
    let mut net = ConvNet::build(&tiny_specs(&[4]), 3, 2, NetKind::Target, 11).unwrap();
    let out = train_plain(&data, &mut net, &quick_cfg(2, 8), 12).unwrap();
    assert_eq!(out.steps, 4);
    assert!(verify_cost_model(&out.counter, out.steps, cost_no_defense()));
}

#[test]
fn defense_training_is_clean_only_and_leaves_substitute_untouched() {
    let data = tiny_dataset(16, 13);
    let mut model = tiny_abnn(14);
    let digest_before = model.substitute.digest();
    let attacks_before = attack_invocations();
    let target_before = model.target.digest();
    train_target(&data, &mut model, &quick_cfg(2, 8), 15).unwrap();
    assert_eq!(attack_invocations(), attacks_before, "no attack ops during clean training");
    assert_eq!(model.substitute.digest(), digest_before, "substitute must stay bit-identical");
    assert_ne!(model.target.digest(), target_before, "target must actually learn");
}

#[test]
fn unfrozen_substitute_is_refused() {
    let data = tiny_dataset(8, 16);
    let mut model = tiny_abnn(17);
    for p in model.substitute.params.iter_mut() {
        p.frozen = false;
    }
    assert!(matches!(
        train_target(&data, &mut model, &quick_cfg(1, 8), 18),
        Err(TrainError::SubstituteNotFrozen)
    ));
}

#[test]
fn pretraining_learns_and_freezes() {
    let data = gen_synthetic(&SyntheticSpec::task_a(64, 8), 19);
    let mut net = ConvNet::build(&tiny_specs(&[4, 4]), 3, 2, NetKind::Substitute, 20).unwrap();
    let out = pretrain_substitute(&data, &mut net, &quick_cfg(6, 16), 21).unwrap();
    assert!(
        out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap(),
        "loss must decrease: {:?}",
        out.epoch_losses
    );
    assert!(net.is_frozen());
}

#[test]
fn non_finite_loss_aborts_training() {
    let data = tiny_dataset(8, 22);
    let mut net = ConvNet::build(&tiny_specs(&[4]), 3, 2, NetKind::Target, 23).unwrap();
    // Poison the head bias so the loss itself turns non-finite (earlier
    // layers would be masked by the activation).
    let head_bias = crate::tensor::ParamId(net.params.len() - 1);
    net.params.get_mut(head_bias).value.data_mut()[0] = f64::NAN;
    assert!(matches!(
        train_plain(&data, &mut net, &quick_cfg(1, 8), 24),
        Err(TrainError::NonFiniteLoss { .. })
    ));
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let data = tiny_dataset(16, 25);
    let run = |seed: u64| {
        let mut net = ConvNet::build(&tiny_specs(&[4]), 3, 2, NetKind::Target, 26).unwrap();
        train_plain(&data, &mut net, &quick_cfg(2, 8), seed).unwrap();
        net.digest()
    };
    assert_eq!(run(31), run(31));
    assert_ne!(run(31), run(32));
}

#[test]
fn config_validation_rejects_bad_values() {
    assert!(SgdConfig { learning_rate: 0.0, ..quick_cfg(1, 4) }.validate().is_err());
    assert!(SgdConfig { batch_size: 1, ..quick_cfg(1, 4) }.validate().is_err());
    assert!(SgdConfig { epochs: 0, ..quick_cfg(0, 4) }.validate().is_err());
    assert!(SgdConfig { momentum: 1.0, ..quick_cfg(1, 4) }.validate().is_err());
    assert!(quick_cfg(1, 4).validate().is_ok());
}
