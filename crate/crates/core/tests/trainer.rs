use onlineaug_core::augmenters::{AugKind, AugNoise, Augmenter};
use onlineaug_core::data::{glyphs_splits, DatasetHandle};
use onlineaug_core::nn::Mode;
use onlineaug_core::optim::Adam;
use onlineaug_core::trainer::{sample, stream, TrainData, Trainer, TrainerConfig, STREAM_DATA, STREAM_TARGET_INIT};
use onlineaug_core::models::TargetModel;
use onlineaug_core::optim::Sgd;
use onlineaug_core::Error;
use onlineaug_tape::Graph;

fn data() -> (DatasetHandle, DatasetHandle) {
    glyphs_splits(96, 32, 5, 8).unwrap()
}

fn tiny(augs: &[AugKind]) -> TrainerConfig {
    let mut c = TrainerConfig {
        augmenters: augs.to_vec(),
        max_steps: 4,
        batch_size: 8,
        eval_batch: 16,
        seed: 3,
        ..TrainerConfig::default()
    };
    c.model.cnn_widths = [4, 4, 8, 8];
    for (w, h) in [(&mut c.weights.dvae.base_width, &mut c.weights.dvae.hidden), (&mut c.weights.pvae.base_width, &mut c.weights.pvae.hidden)] {
        *w = 2;
        *h = 8;
    }
    c
}

fn bn_checksum(t: &Trainer) -> Vec<f64> {
    t.target.bn.layers().iter().flatten().flat_map(|rs| rs.mean.iter().chain(&rs.var).copied()).collect()
}

fn batches(t: &mut Trainer, d: &DatasetHandle) -> (onlineaug_core::data::Batch, onlineaug_core::data::Batch, Vec<AugNoise>) {
    let tr = sample(&mut t.rng_data, d.len(), 8).unwrap();
    let va = sample(&mut t.rng_data, d.len(), 8).unwrap();
    let noises = t.slots.iter().map(|s| s.aug.sample_noise(8, &mut t.rng_noise).unwrap()).collect();
    (d.batch(&tr), d.batch(&va), noises)
}

#[test]
fn augmenter_step_only_touches_its_own_parameters() {
    let (train, _) = data();
    let mut t = Trainer::for_dataset(tiny(&AugKind::ALL), &train).unwrap();
    let (x_tr, x_val, noises) = batches(&mut t, &train);
    for i in 0..3 {
        let target = t.target.params.checksum();
        let bn = bn_checksum(&t);
        let others: Vec<String> = t.slots.iter().map(|s| s.aug.params().checksum()).collect();
        let eta = t.eta();
        t.augmenter_step(i, &x_tr, &x_val, &noises[i], eta).unwrap();
        // the virtual step must not leak into the real target
        assert_eq!(t.target.params.checksum(), target);
        assert_eq!(bn_checksum(&t), bn);
        for (j, s) in t.slots.iter().enumerate() {
            assert_eq!(s.aug.params().checksum() == others[j], j != i, "slot {j} after updating {i}");
        }
    }
}

#[test]
fn target_step_leaves_augmenters_alone() {
    let (train, _) = data();
    let mut t = Trainer::for_dataset(tiny(&AugKind::ALL), &train).unwrap();
    let (x_tr, _, noises) = batches(&mut t, &train);
    let phis: Vec<String> = t.slots.iter().map(|s| s.aug.params().checksum()).collect();
    let theta = t.target.params.checksum();
    let lr = t.lr();
    t.target_step(&x_tr, &noises, lr).unwrap();
    assert_ne!(t.target.params.checksum(), theta);
    for (s, before) in t.slots.iter().zip(&phis) {
        assert_eq!(&s.aug.params().checksum(), before);
    }
}

#[test]
fn target_loss_averages_clean_forward_and_inverse_views() {
    let (train, _) = data();
    let mut t = Trainer::for_dataset(tiny(&[AugKind::Astn]), &train).unwrap();
    let (x_tr, _, noises) = batches(&mut t, &train);
    let AugNoise::Astn(z) = &noises[0] else { panic!("expected A-STN noise") };
    let Augmenter::Astn(astn) = &t.slots[0].aug else { panic!("expected A-STN") };
    let x = onlineaug_core::geometry::ImageBatch::new(x_tr.images.clone()).unwrap();
    let out = astn.transform(&x, z, None, Mode::Train).unwrap();
    let ce = |img: &onlineaug_tape::Tensor, bank: usize| {
        let mut g = Graph::new();
        let p = t.target.params.bind_const(&mut g);
        let v = g.constant(img.clone());
        let (logits, _) = t.target.forward(&mut g, &p, v, Mode::Train, bank).unwrap();
        let l = g.cross_entropy(logits, &x_tr.labels);
        g.value(l).item()
    };
    let (lc, lf, li) = (ce(&x_tr.images, 0), ce(out.x_fwd.tensor(), 1), ce(out.x_inv.tensor(), 1));
    let lr = t.lr();
    let got = t.target_step(&x_tr, &noises, lr).unwrap();
    assert!((got - (lc + lf + li) / 3.0).abs() < 1e-12, "{got} vs {}", (lc + lf + li) / 3.0);
}

#[test]
fn zero_weights_freeze_the_augmenters() {
    let (train, test) = data();
    let mut cfg = tiny(&AugKind::ALL);
    let w = &mut cfg.weights;
    w.astn.lambda_cycle = 0.0;
    w.astn.beta = 0.0;
    w.astn.meta_weight = 0.0;
    w.dvae.lambda_vae = 0.0;
    w.dvae.lambda_smooth = 0.0;
    w.dvae.beta = 0.0;
    w.dvae.meta_weight = 0.0;
    w.pvae.lambda_vae = 0.0;
    w.pvae.beta = 0.0;
    w.pvae.meta_weight = 0.0;
    cfg.augmenter_optimizer.weight_decay = 0.0;
    let mut t = Trainer::for_dataset(cfg, &train).unwrap();
    let before: Vec<String> = t.slots.iter().map(|s| s.aug.params().checksum()).collect();
    let data = TrainData { train: &train, val: None, eval: Some(&test) };
    t.run(&data, |_, _| Ok(())).unwrap();
    let after: Vec<String> = t.slots.iter().map(|s| s.aug.params().checksum()).collect();
    assert_eq!(before, after);
}

#[test]
fn regularizer_only_update_is_an_adam_step_on_its_gradient() {
    let (train, _) = data();
    let mut cfg = tiny(&[AugKind::Dvae]);
    cfg.weights.dvae.beta = 0.0;
    cfg.weights.dvae.meta_weight = 0.0;
    let mut t = Trainer::for_dataset(cfg, &train).unwrap();
    let (x_tr, x_val, noises) = batches(&mut t, &train);
    let AugNoise::Vae(eps) = &noises[0] else { panic!("expected VAE noise") };
    let Augmenter::Dvae(d) = &t.slots[0].aug else { panic!("expected D-VAE") };
    let mut g = Graph::new();
    let p = d.net.params.bind(&mut g);
    let x = g.constant(x_tr.images.clone());
    let out = d.augment_graph(&mut g, &p, x, eps).unwrap();
    let grads = g.backward(out.reg);
    let gphi = d.net.params.collect_grads(&p, &grads);
    let mut expected = d.net.params.clone();
    Adam::new(t.slots[0].opt.cfg.clone(), &expected).update(&mut expected, &gphi);
    let eta = t.eta();
    t.augmenter_step(0, &x_tr, &x_val, &noises[0], eta).unwrap();
    let got = t.slots[0].aug.params().flatten();
    let want = expected.flatten();
    let dev = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-12, "deviation {dev:e}");
}

#[test]
fn adversarial_only_update_raises_the_training_loss() {
    let (train, _) = data();
    let mut cfg = tiny(&[AugKind::Pvae]);
    cfg.weights.pvae.lambda_vae = 0.0;
    cfg.weights.pvae.meta_weight = 0.0;
    cfg.weights.pvae.beta = 1.0;
    cfg.augmenter_optimizer.lr = 1e-4;
    cfg.augmenter_optimizer.weight_decay = 0.0;
    let mut t = Trainer::for_dataset(cfg, &train).unwrap();
    let (x_tr, x_val, noises) = batches(&mut t, &train);
    let eta = t.eta();
    let first = t.augmenter_step(0, &x_tr, &x_val, &noises[0], eta).unwrap();
    let second = t.augmenter_step(0, &x_tr, &x_val, &noises[0], eta).unwrap();
    // adversarial = -L_tr on the same batch and noise
    assert!(second.adversarial < first.adversarial, "{} !< {}", second.adversarial, first.adversarial);
}

#[test]
fn zero_steps_is_a_no_op() {
    let (train, test) = data();
    let mut cfg = tiny(&AugKind::ALL);
    cfg.max_steps = 0;
    let mut t = Trainer::for_dataset(cfg, &train).unwrap();
    let theta = t.target.params.checksum();
    let data = TrainData { train: &train, val: None, eval: Some(&test) };
    assert!(t.run(&data, |_, _| Ok(())).unwrap().is_empty());
    assert_eq!(t.target.params.checksum(), theta);
    assert_eq!(t.step, 0);
}

#[test]
fn same_seed_same_trajectory() {
    let (train, test) = data();
    let mut cfg = tiny(&AugKind::ALL);
    cfg.eval_every = 2;
    let data = TrainData { train: &train, val: None, eval: Some(&test) };
    let a = Trainer::for_dataset(cfg.clone(), &train).unwrap().run(&data, |_, _| Ok(())).unwrap();
    let b = Trainer::for_dataset(cfg.clone(), &train).unwrap().run(&data, |_, _| Ok(())).unwrap();
    assert_eq!(a, b);
    cfg.seed += 1;
    let c = Trainer::for_dataset(cfg, &train).unwrap().run(&data, |_, _| Ok(())).unwrap();
    assert_ne!(a, c);
}

#[test]
fn baseline_matches_a_plain_supervised_loop() {
    let (train, _) = data();
    let mut cfg = tiny(&[]);
    cfg.max_steps = 20;
    let mut t = Trainer::for_dataset(cfg.clone(), &train).unwrap();
    let data = TrainData { train: &train, val: None, eval: None };
    let trace: Vec<f64> = t.run(&data, |_, _| Ok(())).unwrap().iter().map(|r| r.target_loss).collect();

    let mut model = TargetModel::new(&cfg.model, 1, 10, 1, &mut stream(cfg.seed, STREAM_TARGET_INIT)).unwrap();
    let mut opt = Sgd::new(cfg.target_optimizer.clone(), &model.params);
    let mut rng = stream(cfg.seed, STREAM_DATA);
    let mut plain = Vec::new();
    for step in 0..cfg.max_steps {
        let b = train.batch(&sample(&mut rng, train.len(), cfg.batch_size).unwrap());
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.constant(b.images);
        let (logits, obs) = model.forward(&mut g, &p, x, Mode::Train, 0).unwrap();
        let loss = g.cross_entropy(logits, &b.labels);
        plain.push(g.value(loss).item());
        let grads = model.params.collect_grads(&p, &g.backward(loss));
        opt.update(&mut model.params, &grads, cfg.target_optimizer.lr_at(step, cfg.max_steps));
        model.bn.commit(0, &obs);
    }
    assert_eq!(trace, plain);
}

#[test]
fn repeated_divergence_aborts() {
    let (train, _) = data();
    let mut cfg = tiny(&[]);
    cfg.target_optimizer.lr = 1e200;
    cfg.abort_after = 2;
    cfg.max_steps = 50;
    let mut t = Trainer::for_dataset(cfg, &train).unwrap();
    let data = TrainData { train: &train, val: None, eval: None };
    let mut flagged = 0;
    let err = t
        .run(&data, |_, r| {
            flagged += r.divergent as usize;
            Ok(())
        })
        .unwrap_err();
    assert!(matches!(err, Error::Aborted(2)), "{err}");
    assert!(flagged >= 1);
}
