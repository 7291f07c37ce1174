//! PNG panels: each sample next to every augmenter's views of it.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use onlineaug_tape::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augmenters::{AugNoise, Augmenter};
use crate::data::{DatasetHandle, TaskKind};
use crate::error::{invalid, Error, Result};
use crate::geometry::{self, GridMap, MaskBatch};
use crate::nn::Mode;

/// Upscaling factor of every panel.
pub const ZOOM: u32 = 4;
const GAP: u32 = 2;
const CONTOUR: [[u8; 3]; 4] = [[255, 255, 255], [40, 220, 40], [230, 40, 40], [60, 120, 255]];

/// One image (`[c, h, w]`) and its optional mask.
struct Panel {
    pixels: Vec<f64>,
    mask: Option<Vec<usize>>,
}

/// Panel titles in column order for the given augmenters.
pub fn columns(augs: &[Augmenter]) -> Vec<String> {
    let mut out = vec!["original".to_string()];
    for a in augs {
        match a {
            Augmenter::Astn(_) => out.extend(["astn-fwd".to_string(), "astn-inv".to_string()]),
            other => out.push(other.kind().to_string()),
        }
    }
    out
}

fn noise_for(a: &Augmenter, n: usize, rng: &mut ChaCha8Rng) -> Result<AugNoise> {
    match a {
        // deterministic network: no dropout, running statistics
        Augmenter::Astn(s) => {
            let mut z = s.sample_noise(n, rng, Mode::Eval);
            s.resample_degenerate(&mut z, rng, Mode::Eval)?;
            Ok(AugNoise::Astn(z))
        }
        other => other.sample_noise(n, rng),
    }
}

/// Views of `x` (and its masks) produced by `a`.
fn views(a: &Augmenter, x: &Tensor, masks: Option<&MaskBatch>, rng: &mut ChaCha8Rng) -> Result<Vec<(Tensor, Option<MaskBatch>)>> {
    let n = x.shape()[0];
    let noise = noise_for(a, n, rng)?;
    let mut g = Graph::new();
    let p = a.params().bind_const(&mut g);
    let xv = g.constant(x.clone());
    let pass = a.forward(&mut g, &p, xv, &noise, Mode::Eval)?;
    pass.views
        .iter()
        .zip(&pass.grids)
        .map(|(&v, grid)| {
            let m = match (masks, grid) {
                (Some(m), Some(gv)) => Some(geometry::grid_sample_nearest(m, &GridMap::new(g.value(*gv).clone())?)?),
                (Some(m), None) => Some(m.clone()),
                (None, _) => None,
            };
            Ok((g.value(v).clone(), m))
        })
        .collect()
}

/// Writes `sample_000.png`, ... for the first `n` items of `d`: one row per
/// sample with the original followed by every augmented view. All panels of
/// a row share the intensity scale of the original.
pub fn write_panels(augs: &[Augmenter], d: &DatasetHandle, n: usize, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Ok(vec![]);
    }
    if n > d.len() {
        return Err(invalid(format!("asked for {n} samples, split has {}", d.len())));
    }
    std::fs::create_dir_all(out_dir)?;
    let idx: Vec<usize> = (0..n).collect();
    let batch = d.batch(&idx);
    let masks = match d.task {
        TaskKind::Segmentation => Some(MaskBatch::new(n, d.height, d.width, batch.labels.clone(), d.classes)?),
        TaskKind::Classification => None,
    };
    let per = d.image_len();
    let hw = d.height * d.width;
    let split = |t: &Tensor, m: Option<&MaskBatch>, i: usize| Panel {
        pixels: t.data()[i * per..(i + 1) * per].to_vec(),
        mask: m.map(|m| m.labels()[i * hw..(i + 1) * hw].to_vec()),
    };
    let mut rows: Vec<Vec<Panel>> = (0..n).map(|i| vec![split(&batch.images, masks.as_ref(), i)]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in augs {
        for (t, m) in views(a, &batch.images, masks.as_ref(), &mut rng)? {
            for (i, row) in rows.iter_mut().enumerate() {
                row.push(split(&t, m.as_ref(), i));
            }
        }
    }
    let mut files = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let path = out_dir.join(format!("sample_{i:03}.png"));
        render_row(row, d.channels, d.height, d.width)
            .save(&path)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        files.push(path);
    }
    Ok(files)
}

fn render_row(row: &[Panel], c: usize, h: usize, w: usize) -> RgbImage {
    let (pw, ph) = (w as u32 * ZOOM, h as u32 * ZOOM);
    let cols = row.len() as u32;
    let mut img = RgbImage::from_pixel(cols * pw + (cols - 1) * GAP, ph, Rgb([0, 0, 0]));
    let (lo, hi) = row[0]
        .pixels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let level = |v: f64| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
    for (k, panel) in row.iter().enumerate() {
        let x0 = k as u32 * (pw + GAP);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| panel.pixels[(ch.min(c - 1)) * h * w + y * w + x];
                let mut rgb = if c >= 3 {
                    [level(px(0)), level(px(1)), level(px(2))]
                } else {
                    [level(px(0)); 3]
                };
                if let Some(m) = &panel.mask {
                    let l = m[y * w + x];
                    let edge = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && m[yy as usize * w + xx as usize] != l
                    });
                    if edge && l > 0 {
                        rgb = CONTOUR[l.min(CONTOUR.len() - 1)];
                    }
                }
                for dy in 0..ZOOM {
                    for dx in 0..ZOOM {
                        img.put_pixel(x0 + x as u32 * ZOOM + dx, y as u32 * ZOOM + dy, Rgb(rgb));
                    }
                }
            }
        }
    }
    img
}
