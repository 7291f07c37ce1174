//! Learnable augmentation networks.

pub mod astn;
pub mod vae;

use std::fmt;
use std::str::FromStr;

use onlineaug_tape::{BatchStats, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use astn::{Astn, AstnConfig, AstnNoise, AstnOutput};
pub use vae::{
    kl_diag_gaussian, reparameterize, DeformOutput, DeformVae, DvaeConfig, LatentStats, PerturbOutput, PerturbVae,
    PvaeConfig,
};

use crate::error::{invalid, Error, Result};
use crate::nn::{BnTable, Mode};
use crate::params::{Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugKind {
    Astn,
    Dvae,
    Pvae,
}

impl AugKind {
    pub const ALL: [AugKind; 3] = [AugKind::Astn, AugKind::Dvae, AugKind::Pvae];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::Astn => "astn",
            AugKind::Dvae => "dvae",
            AugKind::Pvae => "pvae",
        }
    }

    /// Parses `none`, `comb`, a single name or a comma-separated list.
    pub fn parse_set(s: &str) -> Result<Vec<AugKind>> {
        let s = s.trim();
        match s {
            "none" | "" => return Ok(vec![]),
            "comb" => return Ok(Self::ALL.to_vec()),
            _ => {}
        }
        let mut out = Vec::new();
        for part in s.split(',') {
            let k: AugKind = part.trim().parse()?;
            if out.contains(&k) {
                return Err(Error::Config(format!("augmenter {k} listed twice")));
            }
            out.push(k);
        }
        Ok(out)
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "astn" => Ok(AugKind::Astn),
            "dvae" => Ok(AugKind::Dvae),
            "pvae" => Ok(AugKind::Pvae),
            other => Err(Error::Config(format!(
                "unknown augmenter '{other}' (expected none, astn, dvae, pvae, comb or a comma list)"
            ))),
        }
    }
}

/// Per-augmenter architecture and loss weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmenterConfigs {
    pub astn: AstnConfig,
    pub dvae: DvaeConfig,
    pub pvae: PvaeConfig,
}

#[derive(Clone, Debug)]
pub enum Augmenter {
    Astn(Astn),
    Dvae(DeformVae),
    Pvae(PerturbVae),
}

/// Stochastic inputs of one augmentation pass.
#[derive(Clone, Debug, PartialEq)]
pub enum AugNoise {
    Astn(AstnNoise),
    Vae(Tensor),
}

/// Graph nodes of one augmentation pass over a batch.
pub struct AugPass {
    /// Augmented views fed to the target (two for A-STN, one otherwise).
    pub views: Vec<Var>,
    /// Sampling grid of each view, used to carry segmentation masks along.
    pub grids: Vec<Option<Var>>,
    /// Weighted regularizer R(x; phi).
    pub reg: Var,
    pub observed: Vec<(usize, BatchStats)>,
}

impl Augmenter {
    pub fn new(kind: AugKind, cfg: &AugmenterConfigs, channels: usize, size: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(match kind {
            AugKind::Astn => Augmenter::Astn(Astn::new(&cfg.astn, rng)),
            AugKind::Dvae => Augmenter::Dvae(DeformVae::new(&cfg.dvae, channels, size, rng)?),
            AugKind::Pvae => Augmenter::Pvae(PerturbVae::new(&cfg.pvae, channels, size, rng)?),
        })
    }

    pub fn kind(&self) -> AugKind {
        match self {
            Augmenter::Astn(_) => AugKind::Astn,
            Augmenter::Dvae(_) => AugKind::Dvae,
            Augmenter::Pvae(_) => AugKind::Pvae,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Augmenter::Astn(a) => &a.params,
            Augmenter::Dvae(d) => &d.net.params,
            Augmenter::Pvae(p) => &p.net.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Augmenter::Astn(a) => &mut a.params,
            Augmenter::Dvae(d) => &mut d.net.params,
            Augmenter::Pvae(p) => &mut p.net.params,
        }
    }

    /// Normalization statistics, if the network has any.
    pub fn bn(&self) -> Option<&BnTable> {
        match self {
            Augmenter::Astn(a) => Some(&a.bn),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self) -> Option<&mut BnTable> {
        match self {
            Augmenter::Astn(a) => Some(&mut a.bn),
            _ => None,
        }
    }

    /// Weight of the adversarial term.
    pub fn beta(&self) -> f64 {
        match self {
            Augmenter::Astn(a) => a.config().beta,
            Augmenter::Dvae(d) => d.config().beta,
            Augmenter::Pvae(p) => p.config().beta,
        }
    }

    pub fn meta_weight(&self) -> f64 {
        match self {
            Augmenter::Astn(a) => a.config().meta_weight,
            Augmenter::Dvae(d) => d.config().meta_weight,
            Augmenter::Pvae(p) => p.config().meta_weight,
        }
    }

    pub fn views_per_batch(&self) -> usize {
        match self {
            Augmenter::Astn(_) => 2,
            _ => 1,
        }
    }

    pub fn sample_noise(&self, n: usize, rng: &mut impl Rng) -> Result<AugNoise> {
        Ok(match self {
            Augmenter::Astn(a) => {
                let mut noise = a.sample_noise(n, rng, Mode::Train);
                a.resample_degenerate(&mut noise, rng, Mode::Train)?;
                AugNoise::Astn(noise)
            }
            Augmenter::Dvae(d) => AugNoise::Vae(d.net.sample_eps(n, rng)),
            Augmenter::Pvae(p) => AugNoise::Vae(p.net.sample_eps(n, rng)),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, noise: &AugNoise, mode: Mode) -> Result<AugPass> {
        match (self, noise) {
            (Augmenter::Astn(a), AugNoise::Astn(z)) => {
                let out = a.transform_graph(g, p, x, z, mode)?;
                let reg = g.scale(out.cycle, a.config().lambda_cycle);
                Ok(AugPass {
                    views: vec![out.x_fwd, out.x_inv],
                    grids: vec![Some(out.fwd_grid), Some(out.inv_grid)],
                    reg,
                    observed: out.observed,
                })
            }
            (Augmenter::Dvae(d), AugNoise::Vae(eps)) => {
                let out = d.augment_graph(g, p, x, eps)?;
                Ok(AugPass {
                    views: vec![out.x_aug],
                    grids: vec![out.grid],
                    reg: out.reg,
                    observed: vec![],
                })
            }
            (Augmenter::Pvae(v), AugNoise::Vae(eps)) => {
                let out = v.augment_graph(g, p, x, eps)?;
                Ok(AugPass {
                    views: vec![out.x_aug],
                    grids: vec![None],
                    reg: out.reg,
                    observed: vec![],
                })
            }
            _ => Err(invalid(format!("noise kind does not match augmenter {}", self.kind()))),
        }
    }

    /// Architecture identifier: kind plus parameter names and shapes.
    pub fn fingerprint(&self) -> String {
        format!("{}:{}", self.kind(), self.params().layout_fingerprint())
    }
}
