mod common;

use palette_styler::encoder::EncoderParams;
use palette_styler::training::{checkpoint_file_name, train, FINAL_CHECKPOINT_FILE, LOSS_LOG_FILE};
use palette_styler::{save_image, Checkpoint, TrainConfig};

use common::toy_image;

fn dataset(dir: &std::path::Path) {
    for (sub, base) in [("content", 0), ("style", 50)] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
        for i in 0..2 {
            save_image(
                &toy_image(40, base + i),
                dir.join(sub).join(format!("{i}.png")),
            )
            .unwrap();
        }
    }
}

fn cfg() -> TrainConfig {
    TrainConfig {
        input_size: 40,
        crop: 32,
        batch: 1,
        total_iters: 3,
        patch_size: 1,
        num_patches: 6,
        checkpoint_every: 2,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn train_writes_log_and_checkpoints_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let run = |out: &str| {
        let out = dir.path().join(out);
        let summary = train(
            EncoderParams::synthetic(1),
            dir.path().join("content"),
            dir.path().join("style"),
            &cfg(),
            &out,
        )
        .unwrap();
        (summary, out)
    };
    let (_, a) = run("a");
    let (_, b) = run("b");

    let log = std::fs::read_to_string(a.join(LOSS_LOG_FILE)).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "iter,content_loss,style_loss,total");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("1,"));
    assert_eq!(log, std::fs::read_to_string(b.join(LOSS_LOG_FILE)).unwrap());

    assert!(a.join(checkpoint_file_name(2)).exists());
    assert!(!a.join(checkpoint_file_name(3)).exists());
    let fin = Checkpoint::<f32>::load(a.join(FINAL_CHECKPOINT_FILE)).unwrap();
    assert_eq!(
        fin,
        Checkpoint::load(b.join(FINAL_CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn config_files_round_trip() {
    let mut c = cfg();
    c.lr = 3e-5;
    let mut back = TrainConfig::default();
    back.apply_str(&c.to_key_values()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn invalid_training_setups_fail_early() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let big_crop = TrainConfig { crop: 48, ..cfg() };
    let res = train(
        EncoderParams::synthetic(1),
        dir.path().join("content"),
        dir.path().join("style"),
        &big_crop,
        dir.path().join("o"),
    );
    assert!(res.is_err());
    let missing = train(
        EncoderParams::synthetic(1),
        dir.path().join("nope"),
        dir.path().join("style"),
        &cfg(),
        dir.path().join("o"),
    );
    assert!(missing.is_err());
    assert!(TrainConfig { batch: 0, ..cfg() }.validate().is_err());
}
