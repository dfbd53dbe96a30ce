mod common;

use common::micro_network;
use graphcnn::checkpoint::Checkpoint;
use graphcnn::config::{RunConfig, TrainConfig};
use graphcnn::data::synthetic_image;
use graphcnn::network::GraphCnnModel;
use graphcnn::tensor::BnMode;
use graphcnn::train::TrainState;
use graphcnn::Error;

#[test]
fn file_round_trip_gives_bit_identical_inference() {
    let mut model = GraphCnnModel::<f32>::new(micro_network(6, 1, 2, 4, 4, 21)).unwrap();
    // one training-mode pass moves the running statistics off their defaults
    let x = synthetic_image(16, 16, 2).to_tensor();
    model.forward(&x, BnMode::Train).unwrap();
    let train = TrainConfig { sigma: 15.0, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gcnn");
    Checkpoint::from_model(&model, &train).unwrap().save(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.config().unwrap().train, train);
    assert_eq!(ck.config().unwrap().network, *model.config());
    let back = ck.to_model::<f32>().unwrap();
    assert_eq!(back, model);
    let probe = synthetic_image(20, 18, 3).to_tensor();
    let bits = |m: &GraphCnnModel<f32>| -> Vec<u32> {
        m.infer(&probe).unwrap().denoised.data().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(&back), bits(&model));
    assert_eq!(ck.to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn optimizer_state_survives() {
    let cfg = RunConfig { network: micro_network(6, 1, 2, 4, 4, 1), ..RunConfig::default() };
    let mut state = TrainState::<f32>::new(&cfg).unwrap();
    state.step = 17;
    state.optimizer.t = 17;
    state.best_psnr = Some(28.5);
    state.optimizer.m[0].data_mut()[0] = 0.25;
    let ck = state.to_checkpoint(&cfg.train).unwrap();
    let back = TrainState::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(back, state);
}

#[test]
fn damaged_files_are_rejected() {
    let model = GraphCnnModel::<f32>::new(micro_network(6, 1, 2, 4, 4, 1)).unwrap();
    let bytes = Checkpoint::from_model(&model, &TrainConfig::default()).unwrap().to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(_))));

    // a checkpoint whose tensors do not fit its configuration
    let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut cfg = ck.config().unwrap();
    cfg.network.trunk_channels = 9;
    cfg.network.prepro_branch_channels = 3;
    ck.config_text = cfg.to_toml().unwrap();
    assert!(ck.to_model::<f32>().is_err());
}
