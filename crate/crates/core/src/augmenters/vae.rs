//! Convolutional VAEs emitting deformation fields (D-VAE) or additive
//! intensity noise (P-VAE).

use onlineaug_tape::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{self, ops, GridDelta, GridMap, ImageBatch, MaskBatch};
use crate::nn::{Conv, ConvTranspose, Linear};
use crate::params::{Bound, ParamId, ParamSet};

pub const LOG_VAR_CLAMP: f64 = 10.0;
/// Spatial size of the encoder bottleneck.
pub const BOTTLENECK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DvaeConfig {
    pub lambda_vae: f64,
    pub lambda_smooth: f64,
    pub beta: f64,
    pub meta_weight: f64,
    pub base_width: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for DvaeConfig {
    fn default() -> Self {
        Self {
            lambda_vae: 1.0,
            lambda_smooth: 10.0,
            beta: 1e-2,
            meta_weight: 1.0,
            base_width: 32,
            hidden: 512,
            latent: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PvaeConfig {
    pub lambda_vae: f64,
    pub beta: f64,
    pub meta_weight: f64,
    pub base_width: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for PvaeConfig {
    fn default() -> Self {
        Self {
            lambda_vae: 1e-3,
            beta: 10.0,
            meta_weight: 1.0,
            base_width: 32,
            hidden: 512,
            latent: 8,
        }
    }
}

/// Encoder output: diagonal Gaussian with `log_var` clamped to `[-10, 10]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl LatentStats {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() || mu.ndim() != 2 {
            return Err(invalid(format!(
                "latent stats shapes {:?} / {:?}",
                mu.shape(),
                log_var.shape()
            )));
        }
        if !mu.all_finite() || !log_var.all_finite() {
            return Err(invalid("latent stats must be finite"));
        }
        Ok(Self { mu, log_var })
    }
}

/// `z = mu + exp(log_var / 2) * eps`
pub fn reparameterize(s: &LatentStats, eps: &Tensor) -> Result<Tensor> {
    if eps.shape() != s.mu.shape() {
        return Err(invalid(format!("eps shape {:?} != latent shape {:?}", eps.shape(), s.mu.shape())));
    }
    let std = s.log_var.map(|lv| (0.5 * lv).exp());
    Ok(s.mu.zip_map(&std.zip_map(eps, |a, b| a * b), |m, e| m + e))
}

/// KL divergence to the standard normal, summed over latent dims and
/// averaged over the batch.
pub fn kl_diag_gaussian(s: &LatentStats) -> f64 {
    let n = s.mu.shape()[0].max(1) as f64;
    let total: f64 = s
        .mu
        .data()
        .iter()
        .zip(s.log_var.data())
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum();
    0.5 * total / n
}

/// Graph form of [`kl_diag_gaussian`].
pub fn kl_graph(g: &mut Graph, mu: Var, log_var: Var) -> Var {
    let k = g.value(mu).shape()[1] as f64;
    let m2 = g.square(mu);
    let e = g.exp(log_var);
    let a = g.add(m2, e);
    let b = g.sub(a, log_var);
    let c = g.add_scalar(b, -1.0);
    let mean = g.mean(c);
    g.scale(mean, 0.5 * k)
}

/// Sizes of one encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaeArch {
    pub in_channels: usize,
    pub size: usize,
    pub base_width: usize,
    pub hidden: usize,
    pub latent: usize,
    pub out_channels: usize,
}

impl VaeArch {
    /// Number of stride-2 stages taking `size` down to the bottleneck.
    pub fn stages(&self) -> Result<usize> {
        let s = self.size;
        if s < BOTTLENECK || !s.is_power_of_two() {
            return Err(invalid(format!("VAE input size {s} must be a power of two >= {BOTTLENECK}")));
        }
        Ok((s / BOTTLENECK).trailing_zeros() as usize)
    }
}

#[derive(Clone, Debug)]
pub struct VaeNet {
    arch: VaeArch,
    enc_convs: Vec<Conv>,
    enc_fc: Linear,
    mu: Linear,
    log_var: Linear,
    dec_fc1: Linear,
    dec_fc2: Linear,
    dec_convs: Vec<ConvTranspose>,
    head: Conv,
    pub params: ParamSet,
}

impl VaeNet {
    pub fn new(arch: VaeArch, rng: &mut impl Rng) -> Result<Self> {
        let stages = arch.stages()?;
        if arch.in_channels == 0 || arch.base_width == 0 || arch.hidden == 0 || arch.latent == 0 {
            return Err(invalid("VAE widths must be positive"));
        }
        let mut ps = ParamSet::new();
        let w0 = arch.base_width;
        let mut enc_convs = vec![Conv::new(&mut ps, rng, "enc.conv0", arch.in_channels, w0, 3, 1, true)];
        let mut c = w0;
        for s in 0..stages {
            let name = format!("enc.stage{s}");
            enc_convs.push(Conv::new(&mut ps, rng, &format!("{name}.down"), c, 2 * c, 3, 2, true));
            c *= 2;
            enc_convs.push(Conv::new(&mut ps, rng, &format!("{name}.conv"), c, c, 3, 1, true));
        }
        let flat = c * BOTTLENECK * BOTTLENECK;
        let enc_fc = Linear::new(&mut ps, rng, "enc.fc", flat, arch.hidden);
        let mu = Linear::new(&mut ps, rng, "enc.mu", arch.hidden, arch.latent);
        let log_var = Linear::new(&mut ps, rng, "enc.log_var", arch.hidden, arch.latent);

        let dec_fc1 = Linear::new(&mut ps, rng, "dec.fc1", arch.latent, arch.hidden);
        let dec_fc2 = Linear::new(&mut ps, rng, "dec.fc2", arch.hidden, flat);
        let mut dec_convs = Vec::with_capacity(2 * stages + 1);
        for s in 0..stages {
            let name = format!("dec.stage{s}");
            dec_convs.push(ConvTranspose::new(&mut ps, rng, &format!("{name}.conv"), c, c, 1));
            dec_convs.push(ConvTranspose::new(&mut ps, rng, &format!("{name}.up"), c, c / 2, 2));
            c /= 2;
        }
        dec_convs.push(ConvTranspose::new(&mut ps, rng, "dec.out", c, c, 1));
        let head = Conv::zeros(&mut ps, "dec.head", c, arch.out_channels, 1);
        Ok(Self {
            arch,
            enc_convs,
            enc_fc,
            mu,
            log_var,
            dec_fc1,
            dec_fc2,
            dec_convs,
            head,
            params: ps,
        })
    }

    pub fn arch(&self) -> &VaeArch {
        &self.arch
    }

    /// Final 1x1 convolution weight (zero at initialization).
    pub fn head_weight(&self) -> ParamId {
        self.head.weight()
    }

    fn check_input(&self, s: &[usize]) -> Result<()> {
        let a = &self.arch;
        if s.len() != 4 || s[1] != a.in_channels || s[2] != a.size || s[3] != a.size {
            return Err(invalid(format!(
                "VAE expects [n, {}, {}, {}] input, got {s:?}",
                a.in_channels, a.size, a.size
            )));
        }
        Ok(())
    }

    /// `(mu, log_var)`, both `[n, latent]`.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        self.check_input(g.value(x).shape())?;
        let n = g.value(x).shape()[0];
        let mut h = x;
        for conv in &self.enc_convs {
            h = conv.forward(g, p, h);
            h = g.relu(h);
        }
        let flat = g.value(h).len() / n;
        h = g.reshape(h, &[n, flat]);
        h = self.enc_fc.forward(g, p, h);
        h = g.relu(h);
        let mu = self.mu.forward(g, p, h);
        let lv = self.log_var.forward(g, p, h);
        let lv = g.clamp(lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        Ok((mu, lv))
    }

    /// `[n, latent]` -> `[n, out_channels, size, size]` with linear output.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let n = g.value(z).shape()[0];
        let mut h = self.dec_fc1.forward(g, p, z);
        h = g.relu(h);
        h = self.dec_fc2.forward(g, p, h);
        h = g.relu(h);
        let c = g.value(h).shape()[1] / (BOTTLENECK * BOTTLENECK);
        h = g.reshape(h, &[n, c, BOTTLENECK, BOTTLENECK]);
        for conv in &self.dec_convs {
            h = conv.forward(g, p, h);
            h = g.relu(h);
        }
        self.head.forward(g, p, h)
    }

    fn latent_graph(&self, g: &mut Graph, p: &Bound, x: Var, eps: &Tensor) -> Result<(Var, Var, Var)> {
        let (mu, lv) = self.encode_graph(g, p, x)?;
        if eps.shape() != g.value(mu).shape() {
            return Err(invalid(format!(
                "eps shape {:?} != latent shape {:?}",
                eps.shape(),
                g.value(mu).shape()
            )));
        }
        let half = g.scale(lv, 0.5);
        let std = g.exp(half);
        let e = g.constant(eps.clone());
        let noise = g.mul(std, e);
        let z = g.add(mu, noise);
        Ok((mu, lv, z))
    }

    pub fn encode(&self, x: &ImageBatch) -> Result<LatentStats> {
        let mut g = Graph::new();
        let p = self.params.bind_const(&mut g);
        let xv = g.constant(x.tensor().clone());
        let (mu, lv) = self.encode_graph(&mut g, &p, xv)?;
        LatentStats::new(g.value(mu).clone(), g.value(lv).clone())
    }

    pub fn sample_eps(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(&[n, self.arch.latent], |_| StandardNormal.sample(rng))
    }
}

/// Graph nodes of one VAE augmentation pass.
pub struct VaeGraph {
    pub mu: Var,
    pub log_var: Var,
    /// `[n, h, w, 2]` deformation deltas (D-VAE) or `[n, c, h, w]` noise (P-VAE).
    pub delta: Var,
    /// Sampling grid (D-VAE only).
    pub grid: Option<Var>,
    pub x_aug: Var,
    pub recon: Var,
    pub kl: Var,
    pub smooth: Option<Var>,
    /// Weighted regularizer.
    pub reg: Var,
}

impl VaeGraph {
    fn stats(&self, g: &Graph) -> Result<LatentStats> {
        LatentStats::new(g.value(self.mu).clone(), g.value(self.log_var).clone())
    }
}

#[derive(Clone, Debug)]
pub struct DeformVae {
    cfg: DvaeConfig,
    pub net: VaeNet,
}

#[derive(Clone, Debug)]
pub struct DeformOutput {
    pub x_def: ImageBatch,
    pub delta: GridDelta,
    pub grid: GridMap,
    pub stats: LatentStats,
    pub mask_def: Option<MaskBatch>,
}

impl DeformVae {
    pub fn new(cfg: &DvaeConfig, channels: usize, size: usize, rng: &mut impl Rng) -> Result<Self> {
        let arch = VaeArch {
            in_channels: channels,
            size,
            base_width: cfg.base_width,
            hidden: cfg.hidden,
            latent: cfg.latent,
            out_channels: 2,
        };
        Ok(Self {
            cfg: cfg.clone(),
            net: VaeNet::new(arch, rng)?,
        })
    }

    pub fn config(&self) -> &DvaeConfig {
        &self.cfg
    }

    pub fn augment_graph(&self, g: &mut Graph, p: &Bound, x: Var, eps: &Tensor) -> Result<VaeGraph> {
        let (mu, log_var, z) = self.net.latent_graph(g, p, x, eps)?;
        let out = self.net.decode_graph(g, p, z);
        let delta = g.channels_last(out);
        let grid = ops::delta_to_grid(g, delta);
        let x_aug = ops::grid_sample(g, x, grid)?;
        let diff = g.sub(x, x_aug);
        let recon = g.mean_square(diff);
        let kl = kl_graph(g, mu, log_var);
        let smooth = ops::smoothness_loss(g, delta);
        let vae = g.add(recon, kl);
        let vae = g.scale(vae, self.cfg.lambda_vae);
        let sm = g.scale(smooth, self.cfg.lambda_smooth);
        let reg = g.add(vae, sm);
        Ok(VaeGraph {
            mu,
            log_var,
            delta,
            grid: Some(grid),
            x_aug,
            recon,
            kl,
            smooth: Some(smooth),
            reg,
        })
    }

    pub fn augment(&self, x: &ImageBatch, eps: &Tensor, mask: Option<&MaskBatch>) -> Result<DeformOutput> {
        let mut g = Graph::new();
        let p = self.net.params.bind_const(&mut g);
        let xv = g.constant(x.tensor().clone());
        let out = self.augment_graph(&mut g, &p, xv, eps)?;
        let grid = GridMap::new(g.value(out.grid.expect("deformation grid")).clone())?;
        let mask_def = mask.map(|m| geometry::grid_sample_nearest(m, &grid)).transpose()?;
        Ok(DeformOutput {
            x_def: ImageBatch::new(g.value(out.x_aug).clone())?,
            delta: GridDelta::new(g.value(out.delta).clone())?,
            grid,
            stats: out.stats(&g)?,
            mask_def,
        })
    }

    pub fn regularizer(&self, x: &ImageBatch, eps: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.net.params.bind_const(&mut g);
        let xv = g.constant(x.tensor().clone());
        let out = self.augment_graph(&mut g, &p, xv, eps)?;
        Ok(g.value(out.reg).item())
    }
}

#[derive(Clone, Debug)]
pub struct PerturbVae {
    cfg: PvaeConfig,
    pub net: VaeNet,
}

#[derive(Clone, Debug)]
pub struct PerturbOutput {
    pub x_pert: ImageBatch,
    pub noise: Tensor,
    pub stats: LatentStats,
}

impl PerturbVae {
    pub fn new(cfg: &PvaeConfig, channels: usize, size: usize, rng: &mut impl Rng) -> Result<Self> {
        let arch = VaeArch {
            in_channels: channels,
            size,
            base_width: cfg.base_width,
            hidden: cfg.hidden,
            latent: cfg.latent,
            out_channels: channels,
        };
        Ok(Self {
            cfg: cfg.clone(),
            net: VaeNet::new(arch, rng)?,
        })
    }

    pub fn config(&self) -> &PvaeConfig {
        &self.cfg
    }

    pub fn augment_graph(&self, g: &mut Graph, p: &Bound, x: Var, eps: &Tensor) -> Result<VaeGraph> {
        let (mu, log_var, z) = self.net.latent_graph(g, p, x, eps)?;
        let delta = self.net.decode_graph(g, p, z);
        let x_aug = g.add(x, delta);
        let recon = g.mean_square(delta);
        let kl = kl_graph(g, mu, log_var);
        let vae = g.add(recon, kl);
        let reg = g.scale(vae, self.cfg.lambda_vae);
        Ok(VaeGraph {
            mu,
            log_var,
            delta,
            grid: None,
            x_aug,
            recon,
            kl,
            smooth: None,
            reg,
        })
    }

    pub fn augment(&self, x: &ImageBatch, eps: &Tensor) -> Result<PerturbOutput> {
        let mut g = Graph::new();
        let p = self.net.params.bind_const(&mut g);
        let xv = g.constant(x.tensor().clone());
        let out = self.augment_graph(&mut g, &p, xv, eps)?;
        Ok(PerturbOutput {
            x_pert: ImageBatch::new(g.value(out.x_aug).clone())?,
            noise: g.value(out.delta).clone(),
            stats: out.stats(&g)?,
        })
    }

    pub fn regularizer(&self, x: &ImageBatch, eps: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.net.params.bind_const(&mut g);
        let xv = g.constant(x.tensor().clone());
        let out = self.augment_graph(&mut g, &p, xv, eps)?;
        Ok(g.value(out.reg).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats(mu: &[f64], lv: &[f64]) -> LatentStats {
        let k = mu.len();
        LatentStats::new(Tensor::from_vec(&[1, k], mu.to_vec()), Tensor::from_vec(&[1, k], lv.to_vec())).unwrap()
    }

    #[test]
    fn reparameterize_examples() {
        let s = stats(&[1.0], &[4f64.ln()]);
        let z = reparameterize(&s, &Tensor::from_vec(&[1, 1], vec![0.5])).unwrap();
        assert!((z.item() - 2.0).abs() < 1e-12);
        let s = stats(&[0.3, -0.2], &[0.1, 0.4]);
        assert_eq!(reparameterize(&s, &Tensor::zeros(&[1, 2])).unwrap(), s.mu);
        assert!(reparameterize(&s, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gaussian(&stats(&[0.0; 3], &[0.0; 3])), 0.0);
        assert!((kl_diag_gaussian(&stats(&[1.0], &[0.0])) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn latent_dims_follow_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let small = |latent| DvaeConfig {
            base_width: 4,
            hidden: 16,
            latent,
            ..DvaeConfig::default()
        };
        let d = DeformVae::new(&small(32), 1, 8, &mut rng).unwrap();
        let x = ImageBatch::new(Tensor::from_fn(&[3, 1, 8, 8], |i| (i as f64 * 0.37).sin())).unwrap();
        let s = d.net.encode(&x).unwrap();
        assert_eq!(s.mu.shape(), &[3, 32]);
        assert!(s.log_var.data().iter().all(|v| v.abs() <= LOG_VAR_CLAMP));
        let p = PerturbVae::new(
            &PvaeConfig {
                base_width: 4,
                hidden: 16,
                ..PvaeConfig::default()
            },
            1,
            8,
            &mut rng,
        )
        .unwrap();
        assert_eq!(p.net.encode(&x).unwrap().mu.shape(), &[3, 8]);
        let bad = ImageBatch::new(Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert!(p.net.encode(&bad).is_err());
    }

    #[test]
    fn stages_reach_four_by_four() {
        let arch = |size| VaeArch {
            in_channels: 1,
            size,
            base_width: 2,
            hidden: 4,
            latent: 2,
            out_channels: 2,
        };
        assert_eq!(arch(4).stages().unwrap(), 0);
        assert_eq!(arch(16).stages().unwrap(), 2);
        assert_eq!(arch(32).stages().unwrap(), 3);
        assert!(arch(12).stages().is_err());
        assert!(arch(2).stages().is_err());
    }
}
