//! Datasets, the stratified reduction protocol and the procedural
//! desk-scale corpora.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use onlineaug_tape::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{self, GridMap, ImageBatch, MaskBatch};

/// Environment variable overriding the dataset cache root.
pub const DATA_DIR_ENV: &str = "ONLINEAUG_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// `(v - mean) / std` with statistics of the training split.
    MeanStd { mean: f64, std: f64 },
    /// Clamp to `[lo, hi]`, then scale to `[0, 1]`.
    Window { lo: f64, hi: f64 },
    None,
}

impl Normalization {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            Normalization::MeanStd { mean, std } => (v - mean) / std,
            Normalization::Window { lo, hi } => (v.clamp(lo, hi) - lo) / (hi - lo),
            Normalization::None => v,
        }
    }
}

/// Immutable in-memory dataset. Images are stored already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub split: String,
    pub task: TaskKind,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub norm: Normalization,
    images: Vec<f64>,
    /// One label per item (classification) or `h * w` per item (segmentation).
    labels: Vec<usize>,
}

/// A mini-batch ready for the target network.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    /// Class per item, or the flattened `[n, h, w]` masks.
    pub labels: Vec<usize>,
}

impl DatasetHandle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        split: impl Into<String>,
        task: TaskKind,
        classes: usize,
        (channels, height, width): (usize, usize, usize),
        norm: Normalization,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() % per != 0 {
            return Err(invalid(format!("{} pixel values do not split into {per}-value images", images.len())));
        }
        let n = images.len() / per;
        let per_label = match task {
            TaskKind::Classification => 1,
            TaskKind::Segmentation => height * width,
        };
        if labels.len() != n * per_label {
            return Err(invalid(format!("expected {} labels for {n} items, got {}", n * per_label, labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(format!("label {bad} outside [0, {classes})")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite pixel value"));
        }
        Ok(Self {
            name: name.into(),
            split: split.into(),
            task,
            classes,
            channels,
            height,
            width,
            norm,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn label_len(&self) -> usize {
        match self.task {
            TaskKind::Classification => 1,
            TaskKind::Segmentation => self.height * self.width,
        }
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let k = self.image_len();
        &self.images[i * k..(i + 1) * k]
    }

    pub fn label(&self, i: usize) -> &[usize] {
        let k = self.label_len();
        &self.labels[i * k..(i + 1) * k]
    }

    /// Stratum used by [`stratified_reduce`]: the class for classification,
    /// the largest label present for segmentation.
    pub fn stratum(&self, i: usize) -> usize {
        self.label(i).iter().copied().max().unwrap_or(0)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("index {i} out of range for {} items", self.len())));
            }
            images.extend_from_slice(self.image(i));
            labels.extend_from_slice(self.label(i));
        }
        Self::new(
            self.name.clone(),
            self.split.clone(),
            self.task,
            self.classes,
            (self.channels, self.height, self.width),
            self.norm.clone(),
            images,
            labels,
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len() * self.label_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.extend_from_slice(self.label(i));
        }
        Batch {
            images: Tensor::from_vec(&[indices.len(), self.channels, self.height, self.width], images),
            labels,
        }
    }
}

/// Deterministic class-stratified subsample of `n` items. Returns the
/// reduced dataset and the chosen indices in ascending order.
pub fn stratified_reduce(d: &DatasetHandle, n: usize, seed: u64) -> Result<(DatasetHandle, Vec<usize>)> {
    let idx = stratified_indices(d, n, seed)?;
    Ok((d.subset(&idx)?, idx))
}

pub fn stratified_indices(d: &DatasetHandle, n: usize, seed: u64) -> Result<Vec<usize>> {
    let total = d.len();
    if n > total {
        return Err(invalid(format!("cannot reduce {total} items to {n}")));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); d.classes];
    for i in 0..total {
        groups[d.stratum(i)].push(i);
    }
    let mut take: Vec<usize> = Vec::with_capacity(d.classes);
    let mut frac: Vec<(f64, usize)> = Vec::new();
    for (c, grp) in groups.iter().enumerate() {
        let exact = n as f64 * grp.len() as f64 / total as f64;
        let base = exact.floor() as usize;
        take.push(base);
        frac.push((exact - base as f64, c));
    }
    let mut rest = n - take.iter().sum::<usize>();
    // largest fractional part first, lower class id on ties
    frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in &frac {
        if rest == 0 {
            break;
        }
        if take[c] < groups[c].len() {
            take[c] += 1;
            rest -= 1;
        }
    }
    let mut out = Vec::with_capacity(n);
    for (c, mut grp) in groups.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64 + 1);
        grp.shuffle(&mut rng);
        out.extend_from_slice(&grp[..take[c]]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Root of the dataset cache: `$ONLINEAUG_DATA_DIR` or `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

pub fn reduced_index_path(root: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    root.join(format!("{name}-reduced-{n}-{seed}.txt"))
}

pub fn write_indices(path: &Path, idx: &[usize]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    for i in idx {
        writeln!(f, "{i}")?;
    }
    Ok(())
}

pub fn read_indices(path: &Path) -> Result<Vec<usize>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|_| invalid(format!("bad index line '{t}' in {}", path.display())))?);
    }
    Ok(out)
}

/// Stratified reduction that reuses (or creates) the persisted index list
/// under `root`.
pub fn reduce_cached(d: &DatasetHandle, n: usize, seed: u64, root: &Path) -> Result<DatasetHandle> {
    let path = reduced_index_path(root, &d.name, n, seed);
    let idx = if path.exists() {
        read_indices(&path)?
    } else {
        let idx = stratified_indices(d, n, seed)?;
        write_indices(&path, &idx)?;
        idx
    };
    d.subset(&idx)
}

/// Metadata of a dataset directory `data/<name>/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub task: TaskKind,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub norm: Normalization,
}

/// Writes `meta.json` and `<split>.csv` (one item per row: labels first,
/// then raw pixel values).
pub fn save_dir(root: &Path, d: &DatasetHandle, raw_images: &[f64]) -> Result<()> {
    let dir = root.join(&d.name);
    fs::create_dir_all(&dir)?;
    let meta = DatasetMeta {
        task: d.task,
        classes: d.classes,
        channels: d.channels,
        height: d.height,
        width: d.width,
        norm: d.norm.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(dir.join(format!("{}.csv", d.split)))
        .map_err(csv_err)?;
    let k = d.image_len();
    for i in 0..d.len() {
        let mut row: Vec<String> = d.label(i).iter().map(usize::to_string).collect();
        row.extend(raw_images[i * k..(i + 1) * k].iter().map(|v| format!("{v}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    invalid(format!("csv: {e}"))
}

/// Loads `data/<name>/<split>.csv` with its `meta.json`, applying the
/// recorded normalization.
pub fn load_dir(root: &Path, name: &str, split: &str) -> Result<DatasetHandle> {
    let dir = root.join(name);
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::NotFound(meta_path));
    }
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let csv_path = dir.join(format!("{split}.csv"));
    if !csv_path.exists() {
        return Err(Error::NotFound(csv_path));
    }
    let label_len = match meta.task {
        TaskKind::Classification => 1,
        TaskKind::Segmentation => meta.height * meta.width,
    };
    let image_len = meta.channels * meta.height * meta.width;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(&csv_path)
        .map_err(csv_err)?;
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for (row_no, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != label_len + image_len {
            return Err(invalid(format!(
                "{} row {row_no}: expected {} fields, got {}",
                csv_path.display(),
                label_len + image_len,
                rec.len()
            )));
        }
        for f in rec.iter().take(label_len) {
            labels.push(f.trim().parse().map_err(|_| invalid(format!("bad label '{f}'")))?);
        }
        for f in rec.iter().skip(label_len) {
            let v: f64 = f.trim().parse().map_err(|_| invalid(format!("bad pixel '{f}'")))?;
            images.push(meta.norm.apply(v));
        }
    }
    DatasetHandle::new(
        name,
        split,
        meta.task,
        meta.classes,
        (meta.channels, meta.height, meta.width),
        meta.norm,
        images,
        labels,
    )
}

/// Applies one grid to images (bilinear) and masks (nearest).
pub fn joint_transform(x: &ImageBatch, m: &MaskBatch, grid: &GridMap) -> Result<(ImageBatch, MaskBatch)> {
    let (n, _, h, w) = x.dims();
    if m.dims() != (n, h, w) {
        return Err(invalid(format!("mask dims {:?} do not pair with images {:?}", m.dims(), x.dims())));
    }
    Ok((geometry::grid_sample_bilinear(x, grid)?, geometry::grid_sample_nearest(m, grid)?))
}

type Stroke = &'static [(f64, f64)];

/// Digit-like strokes in a box `x in [-0.5, 0.5]`, `y in [-0.7, 0.7]` (y down).
const GLYPHS: [&[Stroke]; 10] = [
    &[&[(0.0, -0.7), (0.4, -0.45), (0.45, 0.0), (0.4, 0.45), (0.0, 0.7), (-0.4, 0.45), (-0.45, 0.0), (-0.4, -0.45), (0.0, -0.7)]],
    &[&[(-0.2, -0.45), (0.05, -0.7), (0.05, 0.7)], &[(-0.25, 0.7), (0.35, 0.7)]],
    &[&[(-0.4, -0.45), (0.0, -0.7), (0.4, -0.45), (0.35, -0.1), (-0.4, 0.7), (0.45, 0.7)]],
    &[&[(-0.4, -0.7), (0.4, -0.7), (0.0, -0.1), (0.4, 0.25), (0.25, 0.65), (-0.4, 0.6)]],
    &[&[(0.2, 0.7), (0.2, -0.7), (-0.45, 0.3), (0.5, 0.3)]],
    &[&[(0.4, -0.7), (-0.35, -0.7), (-0.4, -0.05), (0.25, -0.05), (0.45, 0.35), (0.15, 0.7), (-0.4, 0.6)]],
    &[&[(0.3, -0.7), (-0.3, -0.15), (-0.4, 0.4), (0.0, 0.7), (0.4, 0.4), (0.3, 0.05), (-0.35, 0.1)]],
    &[&[(-0.45, -0.7), (0.45, -0.7), (-0.1, 0.7)], &[(-0.2, 0.0), (0.3, 0.0)]],
    &[
        &[(0.0, -0.7), (0.35, -0.5), (0.3, -0.15), (0.0, 0.0), (-0.3, -0.15), (-0.35, -0.5), (0.0, -0.7)],
        &[(0.0, 0.0), (0.4, 0.3), (0.3, 0.65), (0.0, 0.72), (-0.3, 0.65), (-0.4, 0.3), (0.0, 0.0)],
    ],
    &[&[(0.35, -0.3), (0.0, -0.7), (-0.4, -0.35), (-0.05, 0.05), (0.35, -0.3), (0.3, 0.7)]],
];

fn seg_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt()
}

/// Renders one glyph with a random affine pose, stroke width, vertex wobble,
/// clutter strokes, contrast and pixel noise. Values roughly in `[0, 1]`.
fn render_glyph(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let angle = rng.random_range(-0.6..0.6);
    let scale = rng.random_range(0.6..1.15);
    let aspect = rng.random_range(0.8..1.2);
    let shear = rng.random_range(-0.45..0.45);
    let (tx, ty) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let width = rng.random_range(0.05..0.15);
    let (c, s) = (f64::cos(angle), f64::sin(angle));
    // glyph -> image: p = R * diag(scale * aspect, scale) * Sh * g + t
    let (sx, sy) = (scale * aspect, scale);
    let a = [c * sx, c * sx * shear - s * sy, s * sx, s * sx * shear + c * sy];
    let mut strokes: Vec<(f64, Vec<(f64, f64)>)> = GLYPHS[class]
        .iter()
        .map(|st| {
            let pts = st
                .iter()
                .map(|&(x, y)| {
                    let (x, y) = (x + 0.06 * normal.sample(rng), y + 0.06 * normal.sample(rng));
                    (a[0] * x + a[1] * y + tx, a[2] * x + a[3] * y + ty)
                })
                .collect();
            (1.0, pts)
        })
        .collect();
    for _ in 0..rng.random_range(0..=2usize) {
        let p0 = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let p1 = (p0.0 + rng.random_range(-0.4..0.4), p0.1 + rng.random_range(-0.4..0.4));
        strokes.push((rng.random_range(0.3..0.8), vec![p0, p1]));
    }
    let half = (size as f64 - 1.0) / 2.0;
    let span = 0.9 * size as f64 / 2.0 / 0.75;
    let pix = 1.0 / span;
    let contrast = rng.random_range(0.5..1.0);
    let noise = rng.random_range(0.05..0.25);
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let mut img = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let (px, py) = ((j as f64 - half) / span, (i as f64 - half) / span);
            let mut ink: f64 = 0.0;
            for (weight, st) in &strokes {
                let mut d = f64::INFINITY;
                for w in st.windows(2) {
                    d = d.min(seg_distance(px, py, w[0], w[1]));
                }
                ink = ink.max(weight * (1.0 - (d - width) / pix).clamp(0.0, 1.0));
            }
            img[i * size + j] = contrast * ink + gx * px + gy * py + noise * normal.sample(rng);
        }
    }
    img
}

/// Raw (unnormalized) glyph images and balanced labels.
pub fn glyph_pixels(n: usize, seed: u64, size: usize) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let class = k % 10;
        images.extend(render_glyph(class, size, &mut rng));
        labels.push(class);
    }
    (images, labels)
}

/// Procedural 10-class digit-like glyph corpus: train and test splits,
/// both normalized with the training split's mean and standard deviation.
pub fn glyphs_splits(n_train: usize, n_test: usize, seed: u64, size: usize) -> Result<(DatasetHandle, DatasetHandle)> {
    if size < 4 {
        return Err(invalid("glyph size must be at least 4"));
    }
    let (tr_raw, tr_lab) = glyph_pixels(n_train, seed, size);
    let (te_raw, te_lab) = glyph_pixels(n_test, seed ^ 0x9e37_79b9_7f4a_7c15, size);
    let mean = tr_raw.iter().sum::<f64>() / tr_raw.len().max(1) as f64;
    let var = tr_raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tr_raw.len().max(1) as f64;
    let norm = Normalization::MeanStd {
        mean,
        std: var.sqrt().max(1e-12),
    };
    let make = |split: &str, raw: Vec<f64>, lab: Vec<usize>| {
        DatasetHandle::new(
            "glyphs",
            split,
            TaskKind::Classification,
            10,
            (1, size, size),
            norm.clone(),
            raw.into_iter().map(|v| norm.apply(v)).collect(),
            lab,
        )
    };
    Ok((make("train", tr_raw, tr_lab)?, make("test", te_raw, te_lab)?))
}

pub const SHAPES_WINDOW: (f64, f64) = (-200.0, 250.0);

/// Raw Hounsfield-like values and masks of the synthetic shapes corpus.
pub fn shapes_raw(n: usize, seed: u64, size: usize) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sz = size as f64;
    let mut images = Vec::with_capacity(n * size * size);
    let mut masks = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        let (cx, cy) = (sz * rng.random_range(0.38..0.62), sz * rng.random_range(0.38..0.62));
        let (ra, rb) = (sz * rng.random_range(0.22..0.34), sz * rng.random_range(0.16..0.28));
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let organ_hu = rng.random_range(80.0..140.0);
        let lesion_hu = organ_hu - rng.random_range(60.0..110.0);
        let bg_hu = rng.random_range(-150.0..-60.0);
        let noise_hu = rng.random_range(12.0..25.0);
        let ell = |x: f64, y: f64| {
            let (dx, dy) = (x - cx, y - cy);
            let u = (dx * ct + dy * st) / ra;
            let v = (-dx * st + dy * ct) / rb;
            u * u + v * v
        };
        let lesions = rng.random_range(0..=2usize);
        let mut discs = Vec::with_capacity(lesions);
        for _ in 0..lesions {
            let r = sz * rng.random_range(0.05..0.1);
            // place the centre inside the shrunken ellipse
            let (u, v): (f64, f64) = loop {
                let (u, v) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
                if u * u + v * v <= 0.36 {
                    break (u, v);
                }
            };
            let (lx, ly) = (u * ra, v * rb);
            discs.push((cx + lx * ct - ly * st, cy + lx * st + ly * ct, r));
        }
        for i in 0..size {
            for j in 0..size {
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                let e = ell(x, y);
                let organ = e <= 1.0;
                let lesion = organ && discs.iter().any(|&(dx, dy, r)| (x - dx).powi(2) + (y - dy).powi(2) <= r * r);
                // soft organ edge
                let w = 1.0 / (1.0 + ((e.sqrt() - 1.0) * 12.0).exp());
                let mut hu = bg_hu + w * (organ_hu - bg_hu);
                for &(dx, dy, r) in &discs {
                    let d = ((x - dx).powi(2) + (y - dy).powi(2)).sqrt();
                    let lw = 1.0 / (1.0 + ((d - r) * 2.5).exp());
                    hu += w * lw * (lesion_hu - organ_hu);
                }
                hu += noise_hu * normal.sample(&mut rng);
                images.push(hu);
                masks.push(if lesion {
                    2
                } else if organ {
                    1
                } else {
                    0
                });
            }
        }
    }
    (images, masks)
}

/// Synthetic organ/lesion segmentation corpus (labels 0, 1, 2), windowed to `[0, 1]`.
pub fn synthetic_shapes_dataset(n: usize, seed: u64, size: usize) -> Result<DatasetHandle> {
    if size < 8 {
        return Err(invalid("shapes size must be at least 8"));
    }
    let (raw, masks) = shapes_raw(n, seed, size);
    let norm = Normalization::Window {
        lo: SHAPES_WINDOW.0,
        hi: SHAPES_WINDOW.1,
    };
    DatasetHandle::new(
        "shapes",
        "train",
        TaskKind::Segmentation,
        3,
        (1, size, size),
        norm.clone(),
        raw.into_iter().map(|v| norm.apply(v)).collect(),
        masks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_classes_render_distinct_ink() {
        let (img, lab) = glyph_pixels(20, 1, 16);
        assert_eq!(lab[..10], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        for k in 0..20 {
            let ink = img[k * 256..(k + 1) * 256].iter().filter(|&&v| v > 0.5).count();
            assert!(ink > 10 && ink < 160, "glyph {k} has {ink} ink pixels");
        }
    }

    #[test]
    fn shapes_labels_and_subset() {
        let d = synthetic_shapes_dataset(20, 4, 32).unwrap();
        for i in 0..d.len() {
            let m = d.label(i);
            assert!(m.iter().all(|&l| l <= 2));
            assert!(m.iter().filter(|&&l| l >= 1).count() > 50);
        }
        assert!(d.batch(&[0, 1]).images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
