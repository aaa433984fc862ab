mod common;

use capcore::gradcheck::grad_check;
use capcore::vision::{standardize_frame, ResNetMini, ResNetMiniConfig};
use capcore::{Rng, Tape, Tensor};
use common::{max_rel_diff, reference};

fn small() -> ResNetMiniConfig {
    ResNetMiniConfig {
        stage_channels: vec![4, 8],
        blocks_per_stage: 2,
        input_size: 32,
        feature_dim: 12,
    }
}

#[test]
fn features_match_reference_network() {
    for seed in 0..3 {
        let net = ResNetMini::new(small(), seed).unwrap();
        let mut rng = Rng::new(seed + 40);
        let frame = standardize_frame(&rng.uniform_tensor(&[3, 32, 32], 0.0, 1.0));
        let set = net.extract_features("v", std::slice::from_ref(&frame), &[0]).unwrap();
        let want = reference::resnet(net.params(), &frame, &[4, 8], 2);
        let want32: Vec<f64> = want.iter().map(|&v| f64::from(v as f32)).collect();
        let got: Vec<f64> = set.row(0).iter().map(|&v| f64::from(v)).collect();
        assert!(max_rel_diff(&got, &want32) < 1e-6, "seed {seed}");
    }
}

#[test]
fn extraction_is_deterministic() {
    let net = ResNetMini::new(small(), 9).unwrap();
    let mut rng = Rng::new(1);
    let frames: Vec<Tensor> = (0..3).map(|_| rng.uniform_tensor(&[3, 32, 32], -1.0, 1.0)).collect();
    let a = net.extract_features("v", &frames, &[0, 5, 9]).unwrap();
    let b = net.extract_features("v", &frames, &[0, 5, 9]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows(), 3);
}

#[test]
fn zeroed_residual_branch_is_identity() {
    let mut net = ResNetMini::new(small(), 2).unwrap();
    let blocks = net.blocks();
    // Second block of the first stage keeps its shape and has no projection.
    let block = blocks[1].clone();
    assert!(block.proj.is_none() && block.stride == 1);
    let store = net.params_mut();
    for name in [&block.conv1, &block.conv2] {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.set(name, Tensor::zeros(&shape)).unwrap();
    }
    let mut rng = Rng::new(3);
    let x = rng.uniform_tensor(&[4, 6, 6], 0.0, 2.0);
    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = net.block_forward(&mut tape, &bound, xv, &block).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn residual_block_gradient_checks() {
    let net = ResNetMini::new(small(), 4).unwrap();
    let blocks = net.blocks();
    let mut rng = Rng::new(6);
    let x = rng.normal_tensor(&[4, 5, 5], 1.0);
    for block in [&blocks[1], &blocks[2]] {
        let err = grad_check(
            |tape, v| {
                let bound = net.params().bind(tape, false);
                let y = net.block_forward(tape, &bound, v, block)?;
                let w = tape.constant(Rng::new(2).normal_tensor(tape.value(y).shape(), 1.0));
                let p = tape.mul(y, w)?;
                tape.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{}: {err}", block.conv1);
    }
}
