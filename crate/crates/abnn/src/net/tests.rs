use super::*;
use crate::tensor::finite_diff_check;

fn tiny_specs(channels: &[usize]) -> Vec<ConvBlockSpec> {
    channels
        .iter()
        .map(|&c| ConvBlockSpec { out_channels: c, kernel: 3, stride: 1, pool: true })
        .collect()
}

#[test]
fn build_produces_one_norm_layer_per_block() {
    let sub = ConvNet::build(&tiny_specs(&[4, 8, 8]), 3, 10, NetKind::Substitute, 1).unwrap();
    assert_eq!(sub.num_blocks(), 3);
    let model = AbnnModel::build(&tiny_specs(&[4, 4, 4]), &tiny_specs(&[4, 8, 8]), 3, 10, 1).unwrap();
    assert_eq!(model.target.num_blocks(), 3);
    assert_eq!(model.block_map, vec![0, 1, 2]);
}

#[test]
fn same_seed_gives_bit_identical_parameters() {
    let a = ConvNet::build(&tiny_specs(&[4, 8]), 3, 5, NetKind::Target, 42).unwrap();
    let b = ConvNet::build(&tiny_specs(&[4, 8]), 3, 5, NetKind::Target, 42).unwrap();
    assert_eq!(a.digest(), b.digest());
    let c = ConvNet::build(&tiny_specs(&[4, 8]), 3, 5, NetKind::Target, 43).unwrap();
    assert_ne!(a.digest(), c.digest());

    let m1 = AbnnModel::build(&tiny_specs(&[4]), &tiny_specs(&[6]), 3, 2, 7).unwrap();
    let m2 = AbnnModel::build(&tiny_specs(&[4]), &tiny_specs(&[6]), 3, 2, 7).unwrap();
    assert_eq!(m1.target.digest(), m2.target.digest());
    assert_eq!(m1.substitute.digest(), m2.substitute.digest());
}

#[test]
fn parameter_counts_match_closed_form() {
    let specs = tiny_specs(&[4, 8]);
    let (in_ch, classes) = (3, 5);
    let net = ConvNet::build(&specs, in_ch, classes, NetKind::Target, 0).unwrap();
    // conv kernels F*C*k*k, bn gamma+beta 2F per block, head D*K + K.
    let expect = (4 * 3 * 9 + 2 * 4) + (8 * 4 * 9 + 2 * 8) + (8 * classes + classes);
    assert_eq!(net.params.num_elements(), expect);

    let model = AbnnModel::build(&specs, &tiny_specs(&[2, 6]), in_ch, classes, 0).unwrap();
    // Target blocks: conv kernel + encoder (2*C_s x 4*C_t weight, 4*C_t bias).
    let enc0 = 2 * 2 * (4 * 4) + 4 * 4;
    let enc1 = 2 * 6 * (4 * 8) + 4 * 8;
    let expect_target = (4 * 3 * 9 + enc0) + (8 * 4 * 9 + enc1) + (8 * classes + classes);
    assert_eq!(model.target.params.num_elements(), expect_target);
}

#[test]
fn map_blocks_subsamples_uniformly() {
    assert_eq!(map_blocks(4, 4).unwrap(), vec![0, 1, 2, 3]);
    assert_eq!(map_blocks(8, 4).unwrap(), vec![1, 3, 5, 7]);
    assert_eq!(map_blocks(5, 3).unwrap(), vec![0, 2, 4]);
    assert!(matches!(map_blocks(2, 3), Err(NetError::BlockCount { sub: 2, tgt: 3 })));
}

#[test]
fn empty_spec_is_rejected() {
    assert!(matches!(
        ConvNet::build(&[], 3, 2, NetKind::Target, 0),
        Err(NetError::EmptySpec)
    ));
}

fn random_batch(n: usize, c: usize, side: usize, seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(vec![n, c, side, side], 0.0, 1.0, &mut rng)
}

#[test]
fn identity_override_matches_norm_free_network() {
    let model = AbnnModel::build(&tiny_specs(&[4, 6]), &tiny_specs(&[4, 6]), 3, 4, 3).unwrap();
    let x = random_batch(3, 3, 8, 9);
    let mut counter = PassCounter::default();
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let with_identity = model
        .forward(&mut g, xv, SubGrad::Detached, Some(NormOverride::Identity), &mut counter)
        .unwrap();
    let bare = model.target.forward_without_norm(&mut g, xv, &mut counter).unwrap();
    for (a, b) in g.data(with_identity).iter().zip(g.data(bare)) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn standardize_override_matches_plain_bn_network() {
    let model = AbnnModel::build(&tiny_specs(&[4, 6]), &tiny_specs(&[8, 8]), 3, 4, 5).unwrap();
    let x = random_batch(4, 3, 8, 11);
    let mut counter = PassCounter::default();
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let standardized = model
        .forward(&mut g, xv, SubGrad::Detached, Some(NormOverride::Standardize), &mut counter)
        .unwrap();
    let plain = model.target.as_plain_bn();
    let plain_out = plain.forward(&mut g, xv, BnMode::Train, &mut counter).unwrap();
    for (a, b) in g.data(standardized).iter().zip(g.data(plain_out.logits)) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn identical_batch_rows_give_identical_logits() {
    let model = AbnnModel::build(&tiny_specs(&[4, 4]), &tiny_specs(&[4, 4]), 3, 3, 13).unwrap();
    let one = random_batch(1, 3, 8, 17);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let x = Tensor::new(data, vec![2, 3, 8, 8]).unwrap();
    let mut counter = PassCounter::default();
    let logits = model.eval_logits(&x, SubGrad::Full, &mut counter).unwrap();
    let k = logits.shape()[1];
    for j in 0..k {
        assert!((logits.data()[j] - logits.data()[k + j]).abs() < 1e-12);
    }
}

#[test]
fn composite_input_gradient_matches_finite_differences() {
    let model = AbnnModel::build(&tiny_specs(&[3, 4]), &tiny_specs(&[3, 4]), 2, 3, 19).unwrap();
    let x = random_batch(2, 2, 6, 23);
    let labels = vec![0usize, 2];
    let err = finite_diff_check(
        move |g, xv| {
            let mut counter = PassCounter::default();
            let logits = model.forward(g, xv, SubGrad::Full, None, &mut counter)?;
            g.softmax_cross_entropy(logits, &labels)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "composite input gradcheck failed: {err}");
}

#[test]
fn freeze_and_assert_frozen() {
    let mut net = ConvNet::build(&tiny_specs(&[4]), 3, 2, NetKind::Substitute, 0).unwrap();
    assert!(!net.is_frozen(), "fresh model must not be frozen");
    net.freeze();
    assert!(net.is_frozen());
}

#[test]
fn logits_stay_finite_across_random_inputs() {
    let model = AbnnModel::build(&tiny_specs(&[4, 4]), &tiny_specs(&[4, 4]), 3, 3, 29).unwrap();
    let mut counter = PassCounter::default();
    for trial in 0..1000 {
        let x = random_batch(2, 3, 8, 1000 + trial);
        let logits = model.eval_logits(&x, SubGrad::Full, &mut counter).unwrap();
        assert!(logits.all_finite(), "non-finite logits at trial {trial}");
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut net = ConvNet::build(&tiny_specs(&[4, 8]), 3, 5, NetKind::Substitute, 77).unwrap();
    net.freeze();
    let digest = net.digest();
    net.save(&path).unwrap();

    let mut other = ConvNet::build(&tiny_specs(&[4, 8]), 3, 5, NetKind::Substitute, 99).unwrap();
    assert_ne!(other.digest(), digest);
    other.load(&path).unwrap();
    assert_eq!(other.digest(), digest);
    assert!(other.is_frozen(), "frozen flags travel with the checkpoint");
}

#[test]
fn checkpoint_shape_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = ConvNet::build(&tiny_specs(&[4]), 3, 5, NetKind::Substitute, 1).unwrap();
    net.save(&path).unwrap();
    let mut other = ConvNet::build(&tiny_specs(&[8]), 3, 5, NetKind::Substitute, 1).unwrap();
    assert!(matches!(other.load(&path), Err(CheckpointError::Mismatch { .. })));
}

#[test]
fn checkpoint_garbage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.ckpt");
    std::fs::write(&path, b"definitely not a checkpoint").unwrap();
    let mut net = ConvNet::build(&tiny_specs(&[4]), 3, 5, NetKind::Substitute, 1).unwrap();
    assert!(matches!(net.load(&path), Err(CheckpointError::BadMagic { .. })));
}
