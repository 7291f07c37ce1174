use std::fs;

use onlineaug_core::augmenters::AugKind;
use onlineaug_core::checkpoint::{self, Layout, FORMAT_VERSION};
use onlineaug_core::config::RunConfig;
use onlineaug_core::trainer::{TrainData, Trainer};
use onlineaug_core::Error;

fn run_config(augs: &[AugKind], steps: usize) -> RunConfig {
    let mut r = RunConfig::default();
    r.dataset.pool = 96;
    r.dataset.reduced = 64;
    r.dataset.test = 32;
    r.dataset.size = 8;
    r.set_seed(11);
    let c = &mut r.trainer;
    c.augmenters = augs.to_vec();
    c.max_steps = steps;
    c.batch_size = 8;
    c.eval_batch = 16;
    c.model.cnn_widths = [4, 4, 8, 8];
    c.weights.dvae.base_width = 2;
    c.weights.dvae.hidden = 8;
    c.weights.pvae.base_width = 2;
    c.weights.pvae.hidden = 8;
    r
}

fn layout(r: &RunConfig) -> onlineaug_core::Result<Layout> {
    let s = r.splits()?;
    Ok(Layout {
        task: s.train.task,
        channels: s.train.channels,
        size: s.train.height,
        classes: s.train.classes,
    })
}

fn checksums(t: &Trainer) -> Vec<String> {
    let mut v = vec![t.target.params.checksum(), t.target_opt.buf.checksum()];
    for s in &t.slots {
        v.push(s.aug.params().checksum());
        v.push(s.opt.m.checksum());
        v.push(s.opt.v.checksum());
    }
    v
}

#[test]
fn interrupted_run_matches_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let run = run_config(&AugKind::ALL, 8);
    let s = run.splits().unwrap();
    let data = TrainData {
        train: &s.train,
        val: None,
        eval: None,
    };

    let mut full = Trainer::for_dataset(run.trainer.clone(), &s.train).unwrap();
    let straight: Vec<String> = full
        .run(&data, |_, _| Ok(()))
        .unwrap()
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();

    let mut first = Trainer::for_dataset(run.trainer.clone(), &s.train).unwrap();
    let mut resumed: Vec<String> = (0..3).map(|_| serde_json::to_string(&first.train_step(&data).unwrap()).unwrap()).collect();
    checkpoint::save(&path, &run, &first).unwrap();
    drop(first);

    let mut loaded = checkpoint::load(&path, layout, None).unwrap();
    assert_eq!(loaded.run, run);
    assert_eq!(loaded.trainer.step, 3);
    resumed.extend(loaded.trainer.run(&data, |_, _| Ok(())).unwrap().iter().map(|r| serde_json::to_string(r).unwrap()));
    assert_eq!(resumed, straight);
    assert_eq!(checksums(&loaded.trainer), checksums(&full));
    assert_eq!(loaded.trainer.evaluate(&s.test).unwrap(), full.evaluate(&s.test).unwrap());
}

#[test]
fn saving_twice_writes_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_config(&[AugKind::Astn], 2);
    let s = run.splits().unwrap();
    let mut t = Trainer::for_dataset(run.trainer.clone(), &s.train).unwrap();
    t.run(&TrainData { train: &s.train, val: None, eval: None }, |_, _| Ok(())).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    checkpoint::save(&a, &run, &t).unwrap();
    checkpoint::save(&b, &run, &t).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // load then save is lossless too
    let l = checkpoint::load(&a, layout, None).unwrap();
    checkpoint::save(&b, &l.run, &l.trainer).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(checkpoint::stored_config_fingerprint(&a).unwrap(), run.fingerprint());
}

#[test]
fn damaged_or_mismatched_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_config(&[AugKind::Pvae], 0);
    let s = run.splits().unwrap();
    let t = Trainer::for_dataset(run.trainer.clone(), &s.train).unwrap();
    let path = dir.path().join("x.ckpt");
    checkpoint::save(&path, &run, &t).unwrap();
    let good = fs::read(&path).unwrap();

    assert!(matches!(
        checkpoint::load(&dir.path().join("missing.ckpt"), layout, None),
        Err(Error::NotFound(_))
    ));

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(checkpoint::load(&path, layout, None), Err(Error::CorruptCheckpoint(_))));

    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    fs::write(&path, &bad).unwrap();
    assert!(matches!(checkpoint::load(&path, layout, None), Err(Error::FormatVersion { .. })));

    fs::write(&path, &good[..good.len() - 8]).unwrap();
    assert!(matches!(checkpoint::load(&path, layout, None), Err(Error::CorruptCheckpoint(_))));

    // loading into a different architecture
    fs::write(&path, &good).unwrap();
    let mut other = run.clone();
    other.trainer.model.cnn_widths = [4, 4, 8, 16];
    assert!(matches!(checkpoint::load(&path, layout, Some(&other)), Err(Error::Fingerprint { .. })));
    let mut other = run.clone();
    other.trainer.augmenters = vec![AugKind::Dvae];
    assert!(matches!(checkpoint::load(&path, layout, Some(&other)), Err(Error::Fingerprint { .. })));
    assert!(checkpoint::load(&path, layout, None).is_ok());
}
