//! Stage artifacts survive the disk round trip and reproduce in-memory
//! results exactly.

use vividtoy::data::{generate, read_dataset, write_dataset, DataConfig};
use vividtoy::degrade::{degrade, DegradationConfig};
use vividtoy::distill::{build_distilled_set, DistillConfig};
use vividtoy::io::RunConfig;
use vividtoy::net::NetConfig;
use vividtoy::pipeline::{Checkpoint, TrainConfig, Trainer};
use vividtoy::restore::restore;
use vividtoy::schedule::ScheduleConfig;
use vividtoy::{Error, SeedStream};

fn tiny_net() -> NetConfig {
    NetConfig {
        depth: 6,
        hidden: 8,
        heads: 2,
        max_frames: 3,
        max_grid: 4,
        mlp_ratio: 2,
        projector_width: 4,
        ..NetConfig::default()
    }
}

fn tiny_data() -> DataConfig {
    DataConfig { height: 8, width: 8, min_frames: 2, max_frames: 3, ..DataConfig::default() }
}

#[test]
fn written_artifacts_reproduce_the_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let net = tiny_net();
    let data = generate(&tiny_data(), 4, SeedStream::new(1), net.caption_len, "real-").unwrap();
    let data_path = dir.path().join("train.vvt");
    write_dataset(&data, &data_path).unwrap();
    let data = read_dataset(&data_path).unwrap();

    let train = TrainConfig { learning_rate: 1e-3, steps: 3, ..TrainConfig::default() };
    let mut pre = Trainer::pretrain(net, ScheduleConfig::default(), train.clone(), 7).unwrap();
    pre.run(&data, 3, |_| Ok(())).unwrap();
    let backbone = pre.into_checkpoint();

    let distill = DistillConfig { t_star: 100, denoise_steps: 2, ..DistillConfig::default() };
    let mixed = build_distilled_set(&backbone, &data, &distill, 7).unwrap();
    assert_eq!(mixed.len(), 5);
    let mut ft = Trainer::finetune(&backbone, train, DegradationConfig::default(), 7).unwrap();
    ft.run(&mixed, 3, |_| Ok(())).unwrap();

    let ck_path = dir.path().join("restorer.vvt");
    ft.ck.write(&ck_path).unwrap();
    let loaded = Checkpoint::read(&ck_path).unwrap();
    assert_eq!(loaded, ft.ck);

    let clip = &data[0];
    let lq = degrade(&clip.video, &DegradationConfig::default(), SeedStream::new(3)).unwrap();
    let a = restore(&ft.ck, &lq, &clip.caption, 4, 11).unwrap();
    let b = restore(&loaded, &lq, &clip.caption, 4, 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let net = tiny_net();
    let data = generate(&tiny_data(), 3, SeedStream::new(2), net.caption_len, "real-").unwrap();
    let train = TrainConfig { learning_rate: 1e-3, steps: 4, ..TrainConfig::default() };
    let mut straight = Trainer::pretrain(net.clone(), ScheduleConfig::default(), train.clone(), 5).unwrap();
    straight.run(&data, 4, |_| Ok(())).unwrap();

    let mut first = Trainer::pretrain(net, ScheduleConfig::default(), train, 5).unwrap();
    first.run(&data, 2, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.vvt");
    first.ck.write(&path).unwrap();
    let mut resumed = Trainer::resume(Checkpoint::read(&path).unwrap()).unwrap();
    resumed.run(&data, 10, |_| Ok(())).unwrap();
    assert_eq!(resumed.ck.step, 4);
    assert_eq!(resumed.ck.params.checksum(), straight.ck.params.checksum());
}

#[test]
fn run_config_errors_name_the_field() {
    match RunConfig::from_json(r#"{"degrade": {"scale": [0.5, 2.0]}}"#).and_then(|c| c.validate().map(|_| c)) {
        Err(Error::Config { field, .. }) => assert!(field.starts_with("degrade"), "{field}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(matches!(RunConfig::from_json(r#"{"net": {"width": 3}}"#), Err(Error::Config { .. })));
}
