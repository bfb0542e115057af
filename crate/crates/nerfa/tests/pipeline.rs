//! Cross-module flows: interrupted training matches uninterrupted
//! training bitwise, and checkpointed models re-render identical files.

use nerfa::io::checkpoint::{load_checkpoint, save_checkpoint};
use nerfa::io::config::RunConfig;
use nerfa::io::image_file::write_png;
use nerfa::model::NerfaModel;
use nerfa::optim::Adam;
use nerfa::scene::{generate_toy_scene, ToySceneSpec};
use nerfa::train::{render_image, train};

fn tiny_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.d = 8;
    config.heads = 2;
    config.n_p = 8;
    config.n_r = 4;
    config.iterations = 20;
    config.freq_pos = 2;
    config.freq_dir = 1;
    config.seed = 11;
    config
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run_bitwise() {
    let config = tiny_config();
    let scene = generate_toy_scene(config.seed, &ToySceneSpec::new(8, 2)).unwrap();

    // Uninterrupted: 20 steps in one go.
    let mut straight = NerfaModel::new(config.model_config()).unwrap();
    let mut straight_adam = Adam::for_model(&straight);
    let full_log = train(
        &mut straight,
        &mut straight_adam,
        &scene,
        &config.train_config(5),
    )
    .unwrap();

    // Interrupted: 10 steps, checkpoint to disk, load, 10 more.
    let mut half_config = config.clone();
    half_config.iterations = 10;
    let mut resumed = NerfaModel::new(half_config.model_config()).unwrap();
    let mut resumed_adam = Adam::for_model(&resumed);
    let first_log = train(
        &mut resumed,
        &mut resumed_adam,
        &scene,
        &half_config.train_config(5),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&path, &config, &resumed, Some(&resumed_adam)).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.step, 10);

    let mut resumed = ckpt.model;
    let mut resumed_adam = ckpt.adam.unwrap();
    let second_log = train(
        &mut resumed,
        &mut resumed_adam,
        &scene,
        &ckpt.config.train_config(5),
    )
    .unwrap();

    assert_eq!(straight, resumed, "parameters diverged");
    assert_eq!(straight_adam, resumed_adam, "optimizer state diverged");
    let stitched: Vec<_> = first_log
        .records()
        .iter()
        .chain(second_log.records())
        .collect();
    let full: Vec<_> = full_log.records().iter().collect();
    assert_eq!(stitched, full, "training logs diverged");
}

#[test]
fn reloaded_checkpoint_renders_an_identical_image_file() {
    let config = tiny_config();
    let scene = generate_toy_scene(config.seed, &ToySceneSpec::new(8, 2)).unwrap();
    let mut model = NerfaModel::new(config.model_config()).unwrap();
    let mut adam = Adam::for_model(&model);
    train(&mut model, &mut adam, &scene, &config.train_config(20)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt_path, &config, &model, None).unwrap();
    let reloaded = load_checkpoint(&ckpt_path).unwrap().model;

    let camera = &scene.views()[0].camera;
    let render = |m: &NerfaModel, name: &str| {
        let image = render_image(m, camera, config.near, config.far, config.n_r, config.n_p)
            .unwrap();
        let path = dir.path().join(name);
        write_png(&image, &path).unwrap();
        std::fs::read(path).unwrap()
    };
    assert_eq!(
        render(&model, "before.png"),
        render(&reloaded, "after.png"),
        "image files differ after checkpoint round trip"
    );
}

#[test]
fn two_runs_with_one_seed_produce_identical_checkpoint_files() {
    let config = tiny_config();
    let scene = generate_toy_scene(config.seed, &ToySceneSpec::new(8, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut files = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let mut model = NerfaModel::new(config.model_config()).unwrap();
        let mut adam = Adam::for_model(&model);
        let log = train(&mut model, &mut adam, &scene, &config.train_config(5)).unwrap();
        let path = dir.path().join(name);
        save_checkpoint(&path, &config, &model, Some(&adam)).unwrap();
        files.push((std::fs::read(path).unwrap(), log.to_csv()));
    }
    assert_eq!(files[0].0, files[1].0, "checkpoint bytes differ");
    assert_eq!(files[0].1, files[1].1, "training logs differ");
}
