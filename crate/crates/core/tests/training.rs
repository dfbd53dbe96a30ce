mod common;

use common::micro_network;
use graphcnn::checkpoint::Checkpoint;
use graphcnn::config::{RunConfig, TrainConfig};
use graphcnn::data::{synthetic_image, GrayImage, PatchSet};
use graphcnn::network::GraphCnnModel;
use graphcnn::rng::Stream;
use graphcnn::train::{loss_and_gradients, make_batch, Adam, Trainer, METRICS_HEADER};
use graphcnn::Error;

fn images() -> Vec<GrayImage> {
    (0..2).map(|i| synthetic_image(40, 40, 30 + i)).collect()
}

fn tiny(seed: u64) -> RunConfig {
    RunConfig {
        network: micro_network(6, 1, 2, 4, 4, seed),
        train: TrainConfig {
            epochs: 3,
            batch_size: 4,
            patch_size: 16,
            patch_stride: 8,
            patches_per_epoch: 8,
            checkpoint_every_steps: 3,
            lr_decay_every_epochs: 1,
            record_wall_time: false,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn overfits_a_single_batch() {
    let imgs = images();
    let patches = PatchSet::from_images(&imgs, 16, 8).unwrap();
    let batch = make_batch(&imgs, &patches, &patches.patches[..4], 25.0, &Stream::new(1), 0).unwrap();
    let mut model = GraphCnnModel::<f32>::new(micro_network(6, 1, 2, 4, 4, 2)).unwrap();
    let mut adam = Adam::new(&model.store, &TrainConfig::default());
    let first = loss_and_gradients(&mut model, &batch).unwrap().0;
    let mut last = first;
    for _ in 0..60 {
        let (loss, grads) = loss_and_gradients(&mut model, &batch).unwrap();
        adam.step(&mut model.store, &grads, 1e-2).unwrap();
        last = loss;
    }
    assert!(last < 0.3 * first, "loss {first} -> {last}");
}

#[test]
fn zero_sigma_gives_zero_target() {
    let imgs = images();
    let patches = PatchSet::from_images(&imgs, 16, 8).unwrap();
    let refs = &patches.patches[3..6];
    let batch = make_batch(&imgs, &patches, refs, 0.0, &Stream::new(5), 0).unwrap();
    assert!(batch.noise.data().iter().all(|&v| v == 0.0));
    let clean: Vec<f32> = refs.iter().flat_map(|&r| patches.get(&imgs, r).unwrap().pixels).collect();
    assert_eq!(batch.noisy.data(), clean.as_slice());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let imgs = images();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut full = Trainer::new(tiny(1), &imgs).unwrap();
    assert_eq!(full.total_steps(), 6);
    full.run(Some(a.path()), |_| {}).unwrap();

    let ck = Checkpoint::load(a.path().join("step-3.gcnn")).unwrap();
    let mut resumed = Trainer::resume(&ck, &imgs).unwrap();
    assert_eq!(resumed.state.step, 3);
    resumed.run(Some(b.path()), |_| {}).unwrap();

    let final_a = std::fs::read(a.path().join("final.gcnn")).unwrap();
    assert_eq!(final_a, std::fs::read(b.path().join("final.gcnn")).unwrap());
    let metrics_a = std::fs::read_to_string(a.path().join("metrics.tsv")).unwrap();
    let metrics_b = std::fs::read_to_string(b.path().join("metrics.tsv")).unwrap();
    let tail: Vec<&str> = metrics_a.lines().skip(4).collect();
    assert_eq!(metrics_b.lines().next(), Some(METRICS_HEADER));
    assert_eq!(metrics_b.lines().skip(1).collect::<Vec<_>>(), tail);
}

#[test]
fn learning_rate_follows_epochs_and_seeds_matter() {
    let imgs = images();
    let mut t = Trainer::new(tiny(1), &imgs).unwrap();
    let mut lrs = Vec::new();
    t.run(None, |r| lrs.push(r.lr)).unwrap();
    assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4]);

    let mut other = Trainer::new(tiny(2), &imgs).unwrap();
    other.run(None, |_| {}).unwrap();
    assert_ne!(t.checkpoint().unwrap().to_bytes(), other.checkpoint().unwrap().to_bytes());
}

#[test]
fn patches_too_small_for_the_search_window() {
    let imgs = images();
    let mut cfg = tiny(1);
    cfg.train.patch_size = 3;
    cfg.train.patch_stride = 3;
    assert!(matches!(Trainer::new(cfg, &imgs), Err(Error::Sizing(_))));
    assert!(matches!(Trainer::new(tiny(1), &[]), Err(Error::Config(_))));
}
