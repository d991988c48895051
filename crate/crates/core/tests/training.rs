//! End-to-end properties of the training loop on small synthetic tasks.

use ternq::checkpoint::{read_checkpoint, write_model, Checkpoint};
use ternq::quant::QuantScheme;
use ternq::segnet::{build_unet3d, evaluate, train, NetConfig, TrainConfig};
use ternq::voldata::{generate_dataset, split, VolumeSample};

fn tiny_net(scheme: QuantScheme, classes: usize) -> NetConfig {
    NetConfig { levels: 2, base_channels: 4, num_classes: classes, scheme, ..NetConfig::default() }
}

fn data(classes: usize) -> (Vec<VolumeSample>, Vec<VolumeSample>) {
    let volumes = generate_dataset(6, 11, 16, classes, 0.05).unwrap();
    split(volumes, 0.5, 11).unwrap()
}

fn mean(v: &[f32]) -> f32 {
    v.iter().sum::<f32>() / v.len() as f32
}

#[test]
fn full_precision_loss_falls_over_first_fifty_steps() {
    let (train_set, _) = data(2);
    let mut falling = 0;
    for seed in 0..10 {
        let mut net = build_unet3d(&tiny_net(QuantScheme::Full, 2), seed).unwrap();
        let cfg = TrainConfig { iterations: 50, patch_size: 8, batch_size: 2, learning_rate: 1e-3, seed, ..TrainConfig::default() };
        let losses = train(&mut net, &train_set, &cfg).unwrap().losses();
        // single-batch losses are noisy; compare the first and last ten steps
        let (first, last) = (mean(&losses[..10]), mean(&losses[40..]));
        println!("seed {seed}: {first:.4} -> {last:.4}");
        if last < first {
            falling += 1;
        }
    }
    assert!(falling >= 9, "loss fell in only {falling} of 10 seeds");
}

#[test]
fn quantized_round_trip_preserves_dice_exactly() {
    let (train_set, test_set) = data(3);
    for scheme in [QuantScheme::Tdq3, QuantScheme::Ttq, QuantScheme::Btq] {
        let mut net = build_unet3d(&tiny_net(scheme, 3), 5).unwrap();
        let cfg = TrainConfig { iterations: 15, patch_size: 8, batch_size: 2, learning_rate: 1e-3, seed: 5, ..TrainConfig::default() };
        train(&mut net, &train_set, &cfg).unwrap();
        let before = evaluate(&net, &test_set).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let files = write_model(&net, dir.path(), "m").unwrap();
        assert!(files[0].extension().unwrap() == "3dqp");
        let restored = read_checkpoint(&files[0]).unwrap().to_model().unwrap();
        let after = evaluate(&restored, &test_set).unwrap();
        assert_eq!(before, after, "{scheme}");

        let x = test_set[0].image.clone().reshape(&[1, 1, 16, 16, 16]).unwrap();
        assert_eq!(net.predict_logits(&x).unwrap(), restored.predict_logits(&x).unwrap());
    }
}

#[test]
fn full_precision_checkpoint_round_trip() {
    let (train_set, test_set) = data(3);
    let mut net = build_unet3d(&tiny_net(QuantScheme::Full, 3), 1).unwrap();
    let cfg = TrainConfig { iterations: 5, patch_size: 8, batch_size: 2, seed: 1, ..TrainConfig::default() };
    train(&mut net, &train_set, &cfg).unwrap();
    let bytes = Checkpoint::from_model(&net).unwrap().to_bytes().unwrap();
    let restored = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
    assert_eq!(restored.convs.iter().map(|c| &c.kernel).collect::<Vec<_>>(), net.convs.iter().map(|c| &c.kernel).collect::<Vec<_>>());
    assert_eq!(evaluate(&net, &test_set).unwrap(), evaluate(&restored, &test_set).unwrap());
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let (train_set, _) = data(3);
    let run = || {
        let mut net = build_unet3d(&tiny_net(QuantScheme::Tdq3, 3), 9).unwrap();
        let cfg = TrainConfig { iterations: 8, patch_size: 8, batch_size: 2, seed: 9, ..TrainConfig::default() };
        let log = train(&mut net, &train_set, &cfg).unwrap();
        (Checkpoint::from_model(&net).unwrap().to_bytes().unwrap(), log.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn gammas_receive_gradient_and_full_scheme_has_none() {
    let (train_set, _) = data(3);
    let mut net = build_unet3d(&tiny_net(QuantScheme::Tdq3, 3), 2).unwrap();
    let cfg = TrainConfig { iterations: 3, patch_size: 8, batch_size: 2, learning_rate: 1e-2, seed: 2, ..TrainConfig::default() };
    train(&mut net, &train_set, &cfg).unwrap();
    for conv in &net.convs {
        let q = conv.quant.as_ref().unwrap();
        assert!(q.gamma_pos != 1.0 || q.gamma_neg != 1.0, "{} γ untouched", conv.name);
    }
    let mut full = build_unet3d(&tiny_net(QuantScheme::Full, 3), 2).unwrap();
    train(&mut full, &train_set, &cfg).unwrap();
    assert!(full.convs.iter().all(|c| c.quant.is_none()));
}
