//! Differentiable geometric kernels: grid generation, bilinear and nearest
//! sampling, affine inversion, and the two geometric regularizers.
//!
//! Coordinates are normalized and corner-aligned: `-1` is the centre of the
//! first pixel along an axis and `+1` the centre of the last one. A grid
//! entry stores `(x, y)`, x indexing columns. Samples falling outside the
//! image read zeros.

use onlineaug_tape::{Function, Graph, Tensor, Var};

use crate::error::{invalid, Error, Result};

/// Smallest `|det|` of the linear part accepted for inversion.
pub const SINGULAR_TOLERANCE: f64 = 1e-6;

/// Label written where nearest sampling leaves the source image.
pub const BACKGROUND_LABEL: usize = 0;

/// 2x3 affine map in normalized coordinates, rows `[a11 a12 tx; a21 a22 ty]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub m: [[f64; 3]; 2],
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        if m.iter().flatten().all(|v| v.is_finite()) {
            Ok(Self { m })
        } else {
            Err(invalid("affine parameters must be finite"))
        }
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(invalid(format!("affine parameters need 6 values, got {}", v.len())));
        }
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]]])
    }

    pub fn to_row_major(&self) -> [f64; 6] {
        let [r0, r1] = self.m;
        [r0[0], r0[1], r0[2], r1[0], r1[1], r1[2]]
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    pub fn scaling(s: f64) -> Self {
        Self {
            m: [[s, 0.0, 0.0], [0.0, s, 0.0]],
        }
    }

    pub fn rotation(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Self {
            m: [[c, -s, 0.0], [s, c, 0.0]],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Point map of `self` after `inner`: `p -> self(inner(p))`.
    pub fn compose(&self, inner: &AffineParams) -> AffineParams {
        let a = &self.m;
        let b = &inner.m;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            row[2] += a[r][2];
        }
        AffineParams { m }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }
}

/// Batch of images, `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 4 || t.shape()[0] == 0 {
            return Err(invalid(format!("image batch must be [n>=1, c, h, w], got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(invalid("image batch contains non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `(n, c, h, w)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Per-pixel integer class labels, `n x h x w` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBatch {
    n: usize,
    h: usize,
    w: usize,
    labels: Vec<usize>,
}

impl MaskBatch {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(invalid(format!(
                "mask needs {} labels, got {}",
                n * h * w,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { n, h, w, labels })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<usize> {
        self.labels
    }
}

/// Sampling coordinates, `[g, h, w, 2]`; `g` is the batch size or 1 for a
/// grid shared by the whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap(Tensor);

/// Additive offsets on the identity grid, `[n, h, w, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDelta(Tensor);

fn check_grid_tensor(t: &Tensor, what: &str) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[3] != 2 || s[0] == 0 || s[1] == 0 || s[2] == 0 {
        return Err(invalid(format!("{what} must be [g>=1, h>=1, w>=1, 2], got {s:?}")));
    }
    if !t.all_finite() {
        return Err(invalid(format!("{what} contains non-finite values")));
    }
    Ok(())
}

impl GridMap {
    pub fn new(t: Tensor) -> Result<Self> {
        check_grid_tensor(&t, "grid map")?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// `(g, h, w)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    /// `(x, y)` stored for grid `k` at output pixel `(i, j)`.
    pub fn coord(&self, k: usize, i: usize, j: usize) -> (f64, f64) {
        let (_, h, w) = self.dims();
        let o = ((k * h + i) * w + j) * 2;
        (self.0.data()[o], self.0.data()[o + 1])
    }
}

impl GridDelta {
    pub fn new(t: Tensor) -> Result<Self> {
        check_grid_tensor(&t, "grid delta")?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Identity grid plus this delta.
    pub fn to_grid(&self) -> GridMap {
        let s = self.0.shape();
        let id = identity_coords(s[1], s[2]);
        let mut t = self.0.clone();
        for chunk in t.data_mut().chunks_mut(id.len()) {
            for (v, base) in chunk.iter_mut().zip(&id) {
                *v += base;
            }
        }
        GridMap(t)
    }
}

#[inline]
fn axis_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Flat `h x w x 2` identity coordinates.
pub(crate) fn identity_coords(h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let y = axis_coord(i, h);
        for j in 0..w {
            out.push(axis_coord(j, w));
            out.push(y);
        }
    }
    out
}

pub fn identity_grid(h: usize, w: usize) -> Result<GridMap> {
    if h == 0 || w == 0 {
        return Err(invalid(format!("grid size must be positive, got {h}x{w}")));
    }
    Ok(GridMap(Tensor::from_vec(&[1, h, w, 2], identity_coords(h, w))))
}

pub fn affine_to_grid(a: &AffineParams, h: usize, w: usize) -> Result<GridMap> {
    if h == 0 || w == 0 {
        return Err(invalid(format!("grid size must be positive, got {h}x{w}")));
    }
    let theta = Tensor::from_vec(&[1, 6], a.to_row_major().to_vec());
    Ok(GridMap(affine_grid_forward(&theta, h, w)))
}

fn affine_grid_forward(theta: &Tensor, h: usize, w: usize) -> Tensor {
    let n = theta.shape()[0];
    let id = identity_coords(h, w);
    let mut out = Vec::with_capacity(n * id.len());
    for m in theta.data().chunks(6) {
        for p in id.chunks(2) {
            out.push(m[0] * p[0] + m[1] * p[1] + m[2]);
            out.push(m[3] * p[0] + m[4] * p[1] + m[5]);
        }
    }
    Tensor::from_vec(&[n, h, w, 2], out)
}

fn check_sample_shapes(x: &Tensor, grid: &Tensor) -> Result<()> {
    let n = x.shape()[0];
    let g = grid.shape()[0];
    if g != n && g != 1 {
        return Err(invalid(format!(
            "grid batch {g} incompatible with image batch {n} (need {n} or 1)"
        )));
    }
    Ok(())
}

/// Bilinear sampling with zero padding; one output per grid location.
pub fn grid_sample_bilinear(x: &ImageBatch, g: &GridMap) -> Result<ImageBatch> {
    check_sample_shapes(x.tensor(), g.tensor())?;
    Ok(ImageBatch(bilinear_forward(x.tensor(), g.tensor())))
}

/// Nearest-pixel label copy; locations outside the source read
/// [`BACKGROUND_LABEL`]. Rounding is half away from zero.
pub fn grid_sample_nearest(m: &MaskBatch, g: &GridMap) -> Result<MaskBatch> {
    let (n, h, w) = m.dims();
    let (gn, oh, ow) = g.dims();
    if gn != n && gn != 1 {
        return Err(invalid(format!(
            "grid batch {gn} incompatible with mask batch {n} (need {n} or 1)"
        )));
    }
    let mut labels = Vec::with_capacity(n * oh * ow);
    for k in 0..n {
        let gk = if gn == 1 { 0 } else { k };
        let src = &m.labels[k * h * w..(k + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let (gx, gy) = g.coord(gk, i, j);
                let px = to_pixel(gx, w).round();
                let py = to_pixel(gy, h).round();
                let inside = px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h;
                labels.push(if inside {
                    src[py as usize * w + px as usize]
                } else {
                    BACKGROUND_LABEL
                });
            }
        }
    }
    Ok(MaskBatch {
        n,
        h: oh,
        w: ow,
        labels,
    })
}

pub fn invert_affine(a: &AffineParams) -> Result<AffineParams> {
    let inv = invert_row_major(&a.to_row_major())?;
    AffineParams::from_row_major(&inv)
}

fn invert_row_major(m: &[f64]) -> Result<[f64; 6]> {
    let det = m[0] * m[4] - m[1] * m[3];
    if !(det.abs() >= SINGULAR_TOLERANCE) {
        return Err(Error::SingularTransform {
            det,
            tolerance: SINGULAR_TOLERANCE,
        });
    }
    let (i00, i01, i10, i11) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
    Ok([
        i00,
        i01,
        -(i00 * m[2] + i01 * m[5]),
        i10,
        i11,
        -(i10 * m[2] + i11 * m[5]),
    ])
}

/// Double cycle-consistency of one affine transform over a batch:
/// `mean |T^-1(T(x)) - x|^2 + mean |T(T^-1(x)) - x|^2`.
pub fn double_cycle_loss(x: &ImageBatch, a: &AffineParams) -> Result<f64> {
    invert_affine(a)?;
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let theta = g.constant(Tensor::from_vec(&[1, 6], a.to_row_major().to_vec()));
    let loss = ops::double_cycle_loss(&mut g, xv, theta)?;
    Ok(g.value(loss).item())
}

/// Mean over directed 4-neighbour pairs of the squared offset difference.
pub fn smoothness_loss(d: &GridDelta) -> f64 {
    smoothness_forward(d.tensor())
}

#[inline]
fn to_pixel(coord: f64, size: usize) -> f64 {
    (coord + 1.0) * 0.5 * (size - 1) as f64
}

struct Corners {
    x0: isize,
    y0: isize,
    wx: f64,
    wy: f64,
}

#[inline]
fn corners(gx: f64, gy: f64, h: usize, w: usize) -> Corners {
    let px = to_pixel(gx, w);
    let py = to_pixel(gy, h);
    let x0 = px.floor();
    let y0 = py.floor();
    Corners {
        x0: x0 as isize,
        y0: y0 as isize,
        wx: px - x0,
        wy: py - y0,
    }
}

#[inline]
fn pixel(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

fn bilinear_forward(x: &Tensor, grid: &Tensor) -> Tensor {
    let &[n, c, h, w] = x.shape() else { unreachable!() };
    let &[gn, oh, ow, _] = grid.shape() else { unreachable!() };
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for k in 0..n {
        let gk = if gn == 1 { 0 } else { k };
        let gd = &grid.data()[gk * oh * ow * 2..(gk + 1) * oh * ow * 2];
        for (p, coord) in gd.chunks(2).enumerate() {
            let cr = corners(coord[0], coord[1], h, w);
            for ch in 0..c {
                let plane = &x.data()[(k * c + ch) * h * w..(k * c + ch + 1) * h * w];
                let v00 = pixel(plane, h, w, cr.y0, cr.x0);
                let v01 = pixel(plane, h, w, cr.y0, cr.x0 + 1);
                let v10 = pixel(plane, h, w, cr.y0 + 1, cr.x0);
                let v11 = pixel(plane, h, w, cr.y0 + 1, cr.x0 + 1);
                let top = v00 * (1.0 - cr.wx) + v01 * cr.wx;
                let bot = v10 * (1.0 - cr.wx) + v11 * cr.wx;
                od[(k * c + ch) * oh * ow + p] = top * (1.0 - cr.wy) + bot * cr.wy;
            }
        }
    }
    out
}

fn smoothness_forward(d: &Tensor) -> f64 {
    let &[n, h, w, _] = d.shape() else { unreachable!() };
    let pairs = directed_pairs(h, w) * n;
    if pairs == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..n {
        let m = &d.data()[k * h * w * 2..(k + 1) * h * w * 2];
        let diff = |a: usize, b: usize| {
            let dx = m[a * 2] - m[b * 2];
            let dy = m[a * 2 + 1] - m[b * 2 + 1];
            dx * dx + dy * dy
        };
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                if j + 1 < w {
                    total += 2.0 * diff(p, p + 1);
                }
                if i + 1 < h {
                    total += 2.0 * diff(p, p + w);
                }
            }
        }
    }
    total / pairs as f64
}

/// Number of ordered 4-neighbour pairs in an `h x w` map.
fn directed_pairs(h: usize, w: usize) -> usize {
    2 * (h * w.saturating_sub(1) + w * h.saturating_sub(1))
}

struct AffineGridFn {
    h: usize,
    w: usize,
}

impl Function for AffineGridFn {
    fn name(&self) -> &'static str {
        "affine_grid"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        affine_grid_forward(inputs[0], self.h, self.w)
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = inputs[0].shape()[0];
        let id = identity_coords(self.h, self.w);
        let mut dt = Tensor::zeros(&[n, 6]);
        let per = id.len();
        for k in 0..n {
            let gk = &grad.data()[k * per..(k + 1) * per];
            let d = &mut dt.data_mut()[k * 6..(k + 1) * 6];
            for (p, g) in id.chunks(2).zip(gk.chunks(2)) {
                d[0] += g[0] * p[0];
                d[1] += g[0] * p[1];
                d[2] += g[0];
                d[3] += g[1] * p[0];
                d[4] += g[1] * p[1];
                d[5] += g[1];
            }
        }
        vec![Some(dt)]
    }
}

struct GridSampleFn;

impl Function for GridSampleFn {
    fn name(&self) -> &'static str {
        "grid_sample_bilinear"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        bilinear_forward(inputs[0], inputs[1])
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, grid) = (inputs[0], inputs[1]);
        let &[n, c, h, w] = x.shape() else { unreachable!() };
        let &[gn, oh, ow, _] = grid.shape() else { unreachable!() };
        let mut dx = Tensor::zeros(x.shape());
        let mut dg = Tensor::zeros(grid.shape());
        let sx = 0.5 * (w - 1) as f64;
        let sy = 0.5 * (h - 1) as f64;
        for k in 0..n {
            let gk = if gn == 1 { 0 } else { k };
            for p in 0..oh * ow {
                let gi = (gk * oh * ow + p) * 2;
                let cr = corners(grid.data()[gi], grid.data()[gi + 1], h, w);
                let (mut dpx, mut dpy) = (0.0, 0.0);
                for ch in 0..c {
                    let base = (k * c + ch) * h * w;
                    let go = grad.data()[(k * c + ch) * oh * ow + p];
                    if go == 0.0 {
                        continue;
                    }
                    let plane = &x.data()[base..base + h * w];
                    let v00 = pixel(plane, h, w, cr.y0, cr.x0);
                    let v01 = pixel(plane, h, w, cr.y0, cr.x0 + 1);
                    let v10 = pixel(plane, h, w, cr.y0 + 1, cr.x0);
                    let v11 = pixel(plane, h, w, cr.y0 + 1, cr.x0 + 1);
                    dpx += go * ((v01 - v00) * (1.0 - cr.wy) + (v11 - v10) * cr.wy);
                    dpy += go * ((v10 - v00) * (1.0 - cr.wx) + (v11 - v01) * cr.wx);
                    let dplane = &mut dx.data_mut()[base..base + h * w];
                    let weights = [
                        (cr.y0, cr.x0, (1.0 - cr.wx) * (1.0 - cr.wy)),
                        (cr.y0, cr.x0 + 1, cr.wx * (1.0 - cr.wy)),
                        (cr.y0 + 1, cr.x0, (1.0 - cr.wx) * cr.wy),
                        (cr.y0 + 1, cr.x0 + 1, cr.wx * cr.wy),
                    ];
                    for (yy, xx, wt) in weights {
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            dplane[yy as usize * w + xx as usize] += go * wt;
                        }
                    }
                }
                dg.data_mut()[gi] += dpx * sx;
                dg.data_mut()[gi + 1] += dpy * sy;
            }
        }
        vec![Some(dx), Some(dg)]
    }
}

struct AffineInvertFn;

impl Function for AffineInvertFn {
    fn name(&self) -> &'static str {
        "invert_affine"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let t = inputs[0];
        let mut out = Vec::with_capacity(t.len());
        for m in t.data().chunks(6) {
            let inv = invert_row_major(m).expect("invertibility is checked before graph insertion");
            out.extend_from_slice(&inv);
        }
        Tensor::from_vec(t.shape(), out)
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        // With B = L^-1 and s = -B t:  dL = -B^T (G_B - G_s t^T) B^T and
        // dt = -B^T G_s, where G_B, G_s are the output cotangents.
        let mut d = Tensor::zeros(out.shape());
        for (((m, o), g), dd) in inputs[0]
            .data()
            .chunks(6)
            .zip(out.data().chunks(6))
            .zip(grad.data().chunks(6))
            .zip(d.data_mut().chunks_mut(6))
        {
            let b = [[o[0], o[1]], [o[3], o[4]]];
            let t = [m[2], m[5]];
            let gb = [[g[0], g[1]], [g[3], g[4]]];
            let gs = [g[2], g[5]];
            // total cotangent on B including the path through s = -B t
            let mut gb_total = gb;
            for r in 0..2 {
                for c in 0..2 {
                    gb_total[r][c] -= gs[r] * t[c];
                }
            }
            // dL = -B^T gb_total B^T
            let mut tmp = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    tmp[r][c] = (0..2).map(|k| b[k][r] * gb_total[k][c]).sum();
                }
            }
            let mut dl = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    dl[r][c] = -(0..2).map(|k| tmp[r][k] * b[c][k]).sum::<f64>();
                }
            }
            let dt: [f64; 2] = [
                -(b[0][0] * gs[0] + b[1][0] * gs[1]),
                -(b[0][1] * gs[0] + b[1][1] * gs[1]),
            ];
            dd.copy_from_slice(&[dl[0][0], dl[0][1], dt[0], dl[1][0], dl[1][1], dt[1]]);
        }
        vec![Some(d)]
    }
}

struct SmoothnessFn;

impl Function for SmoothnessFn {
    fn name(&self) -> &'static str {
        "smoothness_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        Tensor::scalar(smoothness_forward(inputs[0]))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = inputs[0];
        let &[n, h, w, _] = d.shape() else { unreachable!() };
        let pairs = directed_pairs(h, w) * n;
        let mut out = Tensor::zeros(d.shape());
        if pairs == 0 {
            return vec![Some(out)];
        }
        // each undirected edge appears twice, each contributing 2 * diff
        let s = grad.item() * 4.0 / pairs as f64;
        for k in 0..n {
            let off = k * h * w * 2;
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let mut edge = |q: usize| {
                        for ch in 0..2 {
                            let diff = d.data()[off + p * 2 + ch] - d.data()[off + q * 2 + ch];
                            out.data_mut()[off + p * 2 + ch] += s * diff;
                            out.data_mut()[off + q * 2 + ch] -= s * diff;
                        }
                    };
                    if j + 1 < w {
                        edge(p + 1);
                    }
                    if i + 1 < h {
                        edge(p + w);
                    }
                }
            }
        }
        vec![Some(out)]
    }
}

/// Graph-level versions of the kernels above.
pub mod ops {
    use super::*;

    /// `theta: [n, 6]` -> grid `[n, h, w, 2]`.
    pub fn affine_grid(g: &mut Graph, theta: Var, h: usize, w: usize) -> Var {
        let s = g.value(theta).shape();
        assert!(s.len() == 2 && s[1] == 6, "theta must be [n, 6], got {s:?}");
        g.custom(&[theta], Box::new(AffineGridFn { h, w }))
    }

    pub fn grid_sample(g: &mut Graph, x: Var, grid: Var) -> Result<Var> {
        let (xs, gs) = (g.value(x).shape(), g.value(grid).shape());
        if xs.len() != 4 || gs.len() != 4 || gs[3] != 2 {
            return Err(invalid(format!("grid_sample shapes {xs:?} / {gs:?}")));
        }
        check_sample_shapes(g.value(x), g.value(grid))?;
        Ok(g.custom(&[x, grid], Box::new(GridSampleFn)))
    }

    /// Inverse of each `[n, 6]` affine row; errors if any is near-singular.
    pub fn invert_affine(g: &mut Graph, theta: Var) -> Result<Var> {
        for m in g.value(theta).data().chunks(6) {
            invert_row_major(m)?;
        }
        Ok(g.custom(&[theta], Box::new(AffineInvertFn)))
    }

    /// Double cycle-consistency of `x: [n, c, h, w]` under `theta: [n or 1, 6]`.
    pub fn double_cycle_loss(g: &mut Graph, x: Var, theta: Var) -> Result<Var> {
        let inv = invert_affine(g, theta)?;
        let (h, w) = (g.value(x).shape()[2], g.value(x).shape()[3]);
        let fwd_grid = affine_grid(g, theta, h, w);
        let inv_grid = affine_grid(g, inv, h, w);
        Ok(cycle_pair(g, x, fwd_grid, inv_grid)?.0)
    }

    /// Returns `(loss, T(x), T^-1(x))` where the transformed images reuse the
    /// first pass of each cycle.
    pub(crate) fn cycle_pair(g: &mut Graph, x: Var, fwd_grid: Var, inv_grid: Var) -> Result<(Var, Var, Var)> {
        let fx = grid_sample(g, x, fwd_grid)?;
        let back = grid_sample(g, fx, inv_grid)?;
        let ix = grid_sample(g, x, inv_grid)?;
        let forth = grid_sample(g, ix, fwd_grid)?;
        let d1 = g.sub(back, x);
        let d2 = g.sub(forth, x);
        let t1 = g.mean_square(d1);
        let t2 = g.mean_square(d2);
        Ok((g.add(t1, t2), fx, ix))
    }

    pub fn smoothness_loss(g: &mut Graph, delta: Var) -> Var {
        let s = g.value(delta).shape();
        assert!(s.len() == 4 && s[3] == 2, "delta must be [n, h, w, 2], got {s:?}");
        g.custom(&[delta], Box::new(SmoothnessFn))
    }

    /// Identity grid plus `delta: [n, h, w, 2]`.
    pub fn delta_to_grid(g: &mut Graph, delta: Var) -> Var {
        let s = g.value(delta).shape().to_vec();
        let id = identity_coords(s[1], s[2]);
        let mut base = Vec::with_capacity(id.len() * s[0]);
        for _ in 0..s[0] {
            base.extend_from_slice(&id);
        }
        let base = g.constant(Tensor::from_vec(&s, base));
        g.add(delta, base)
    }
}
