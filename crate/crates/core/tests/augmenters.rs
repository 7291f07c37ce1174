use onlineaug_core::augmenters::astn::{Astn, AstnConfig};
use onlineaug_core::augmenters::vae::{kl_diag_gaussian, DeformVae, DvaeConfig, LatentStats, PerturbVae, PvaeConfig};
use onlineaug_core::augmenters::{AugKind, Augmenter, AugmenterConfigs};
use onlineaug_core::geometry::{grid_sample_bilinear, grid_sample_nearest, ImageBatch, MaskBatch};
use onlineaug_core::nn::Mode;
use onlineaug_tape::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize) -> ImageBatch {
    ImageBatch::new(Tensor::from_fn(&[n, c, s, s], |_| rng.random_range(-2.0..2.0))).unwrap()
}

fn masks(rng: &mut ChaCha8Rng, n: usize, s: usize) -> MaskBatch {
    MaskBatch::new(n, s, s, (0..n * s * s).map(|_| rng.random_range(0..3)).collect(), 3).unwrap()
}

/// Nudges every parameter so the augmenters actually move their input.
fn perturb(ps: &mut onlineaug_core::params::ParamSet, rng: &mut ChaCha8Rng, std: f64) {
    for t in ps.tensors_mut() {
        for v in t.data_mut() {
            *v += std * rng.random_range(-1.0..1.0);
        }
    }
}

#[test]
fn fresh_augmenters_reproduce_their_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = AugmenterConfigs::default();
    let x = images(&mut rng, 4, 3, 16);
    for kind in AugKind::ALL {
        let aug = Augmenter::new(kind, &cfg, 3, 16, &mut rng).unwrap();
        let noise = aug.sample_noise(4, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = aug.params().bind_const(&mut g);
        let xv = g.constant(x.tensor().clone());
        let pass = aug.forward(&mut g, &p, xv, &noise, Mode::Train).unwrap();
        for v in pass.views {
            let dev = g.value(v).max_abs_diff(x.tensor());
            assert!(dev <= 1e-6, "{kind}: deviation {dev:e}");
        }
    }
}

#[test]
fn regularizers_are_nonnegative_and_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = images(&mut rng, 3, 1, 8);
    for _ in 0..5 {
        let mut astn = Astn::new(&AstnConfig::default(), &mut rng);
        perturb(&mut astn.params, &mut rng, 0.2);
        let noise = astn.sample_noise(3, &mut rng, Mode::Eval);
        let r = astn.regularizer(&x, &noise, Mode::Eval).unwrap();
        assert!(r.is_finite() && r >= 0.0);

        let small_d = DvaeConfig { base_width: 2, hidden: 8, ..DvaeConfig::default() };
        let mut d = DeformVae::new(&small_d, 1, 8, &mut rng).unwrap();
        perturb(&mut d.net.params, &mut rng, 0.1);
        let eps = d.net.sample_eps(3, &mut rng);
        let r = d.regularizer(&x, &eps).unwrap();
        assert!(r.is_finite() && r >= 0.0);

        let small_p = PvaeConfig { base_width: 2, hidden: 8, ..PvaeConfig::default() };
        let mut p = PerturbVae::new(&small_p, 1, 8, &mut rng).unwrap();
        perturb(&mut p.net.params, &mut rng, 0.1);
        let eps = p.net.sample_eps(3, &mut rng);
        let r = p.regularizer(&x, &eps).unwrap();
        assert!(r.is_finite() && r >= 0.0);
    }
}

#[test]
fn masks_follow_the_image_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = images(&mut rng, 2, 1, 8);
    let m = masks(&mut rng, 2, 8);

    let mut astn = Astn::new(&AstnConfig::default(), &mut rng);
    perturb(&mut astn.params, &mut rng, 0.3);
    let noise = astn.sample_noise(2, &mut rng, Mode::Eval);
    let out = astn.transform(&x, &noise, Some(&m), Mode::Eval).unwrap();
    assert_eq!(out.mask_fwd.unwrap(), grid_sample_nearest(&m, &out.fwd_grid).unwrap());
    assert_eq!(out.mask_inv.unwrap(), grid_sample_nearest(&m, &out.inv_grid).unwrap());
    let fwd = grid_sample_bilinear(&x, &out.fwd_grid).unwrap();
    assert!(fwd.tensor().max_abs_diff(out.x_fwd.tensor()) < 1e-12);

    let small = DvaeConfig { base_width: 2, hidden: 8, ..DvaeConfig::default() };
    let mut d = DeformVae::new(&small, 1, 8, &mut rng).unwrap();
    perturb(&mut d.net.params, &mut rng, 0.2);
    let eps = d.net.sample_eps(2, &mut rng);
    let out = d.augment(&x, &eps, Some(&m)).unwrap();
    assert_eq!(out.grid, out.delta.to_grid());
    assert_eq!(out.mask_def.unwrap(), grid_sample_nearest(&m, &out.grid).unwrap());
    let warped = grid_sample_bilinear(&x, &out.grid).unwrap();
    assert!(warped.tensor().max_abs_diff(out.x_def.tensor()) < 1e-12);
}

#[test]
fn perturbation_is_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = images(&mut rng, 2, 2, 8);
    let small = PvaeConfig { base_width: 2, hidden: 8, ..PvaeConfig::default() };
    let mut p = PerturbVae::new(&small, 2, 8, &mut rng).unwrap();
    perturb(&mut p.net.params, &mut rng, 0.2);
    let eps = p.net.sample_eps(2, &mut rng);
    let out = p.augment(&x, &eps).unwrap();
    let diff = out.x_pert.tensor().zip_map(x.tensor(), |a, b| a - b);
    assert!(diff.max_abs_diff(&out.noise) < 1e-12);
    assert!(out.noise.max_abs() > 0.0);
}

#[test]
fn kl_is_zero_only_at_the_prior() {
    let prior = LatentStats::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3])).unwrap();
    assert_eq!(kl_diag_gaussian(&prior), 0.0);
    let s = LatentStats::new(Tensor::full(&[1, 2], 0.5), Tensor::full(&[1, 2], -0.3)).unwrap();
    assert!(kl_diag_gaussian(&s) > 0.0);
}

#[test]
fn augmenter_sets_parse() {
    assert!(AugKind::parse_set("none").unwrap().is_empty());
    assert_eq!(AugKind::parse_set("comb").unwrap(), AugKind::ALL.to_vec());
    assert_eq!(AugKind::parse_set("pvae, astn").unwrap(), vec![AugKind::Pvae, AugKind::Astn]);
    assert!(AugKind::parse_set("astn,astn").is_err());
    assert!(AugKind::parse_set("cutout").is_err());
}
