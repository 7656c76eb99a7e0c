use pharnet::checkpoint;
use pharnet::data::{Corpus, Sampler};
use pharnet::eval::{changed_params, suite_config};
use pharnet::generator::MAIN_ENCODER;
use pharnet::train::{checkpoint_path, evaluate_losses, train_loop, train_step, Phases, TrainState};
use pharnet::Error;

fn corpus(seed: u64) -> Corpus {
    Corpus::synthetic(6, 6, 64, seed).unwrap()
}

#[test]
fn small_discriminator_step_does_not_increase_its_loss() {
    let mut config = suite_config(4, 8);
    config.learning_rate = 1e-5;
    let c = corpus(4);
    let state = TrainState::new(config.clone()).unwrap();
    let batch = Sampler::new(&c, config.seed, 0, config.image_size).next_batch(config.batch_size).unwrap();
    let before = evaluate_losses(&state.generator, &state.discriminators, &batch, &config).unwrap();
    let (mut g, mut d) = (state.generator.clone(), state.discriminators.clone());
    train_step(&mut g, &mut d, &batch, &config, 0, Phases { discriminators: true, generator: false }).unwrap();
    assert_eq!(g.store, state.generator.store);
    let after = evaluate_losses(&g, &d, &batch, &config).unwrap();
    assert!(after.l_total_d <= before.l_total_d, "{} -> {}", before.l_total_d, after.l_total_d);
}

#[test]
fn zero_steps_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(suite_config(0, 8)).unwrap();
    state.config.max_steps = 0;
    let history = train_loop(&mut state, &corpus(0), Some(dir.path()), |_, _| {}).unwrap();
    assert!(history.is_empty());
    let mut files: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["ckpt-000000.phrn", "loss.log"]);
    assert_eq!(std::fs::read_to_string(dir.path().join("loss.log")).unwrap(), "");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let c = corpus(2);
    let mut config = suite_config(2, 8);
    config.max_steps = 4;
    let mut straight = TrainState::new(config.clone()).unwrap();
    let all = train_loop(&mut straight, &c, None, |_, _| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = TrainState::new(config.clone()).unwrap();
    first.config.max_steps = 2;
    let head = train_loop(&mut first, &c, Some(dir.path()), |_, _| {}).unwrap();
    let mut resumed = checkpoint::load(&checkpoint_path(dir.path(), 2)).unwrap();
    resumed.config.max_steps = 4;
    let tail = train_loop(&mut resumed, &c, Some(dir.path()), |_, _| {}).unwrap();

    assert_eq!([head, tail].concat(), all);
    assert_eq!(resumed.generator.store, straight.generator.store);
    assert_eq!(resumed.discriminators.store, straight.discriminators.store);
    assert_eq!(resumed.data, straight.data);
}

#[test]
fn identical_seeds_write_identical_logs() {
    let c = corpus(7);
    let mut config = suite_config(7, 8);
    config.max_steps = 3;
    let logs: Vec<String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut s = TrainState::new(config.clone()).unwrap();
            train_loop(&mut s, &c, Some(dir.path()), |_, _| {}).unwrap();
            std::fs::read_to_string(dir.path().join("loss.log")).unwrap()
        })
        .collect();
    assert_eq!(logs[0].lines().count(), 3);
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn frozen_encoder_survives_training() {
    let c = corpus(1);
    let mut state = TrainState::new(suite_config(1, 8)).unwrap();
    let before = state.generator.store.clone();
    for _ in 0..5 {
        state.step_once(&c).unwrap();
    }
    assert!(changed_params(&before, &state.generator.store, MAIN_ENCODER).is_empty());
    assert!(!changed_params(&before, &state.generator.store, "dec.").is_empty());
}

#[test]
fn divergence_is_a_hard_error_with_the_step() {
    let c = corpus(3);
    let mut config = suite_config(3, 8);
    config.learning_rate = f64::INFINITY;
    let mut state = TrainState::new(config).unwrap();
    let err = (0..3).map(|_| state.step_once(&c)).find_map(Result::err).expect("training must diverge");
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}
