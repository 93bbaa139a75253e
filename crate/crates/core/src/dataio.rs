//! Dataset layout, PNG loading, augmentation and the synthetic generator.
//!
//! On-disk layout for one field of view:
//!
//! ```text
//! <root>/<3M|6M>/images/<id>.png   8-bit grayscale en-face image
//! <root>/<3M|6M>/rv/<id>.png       vessel mask
//! <root>/<3M|6M>/faz/<id>.png      FAZ mask
//! <root>/<3M|6M>/<split>.txt       one sample id per line
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Field;
use crate::error::{DataError, Result};

/// Gray level above which an 8-bit mask pixel counts as foreground.
pub const MASK_THRESHOLD: f64 = 127.5;

/// Binary `H x W` map stored as 0/1 bytes in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Panics unless `data` has `height * width` entries in {0, 1}.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width);
        assert!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.data[i * self.width + j] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `[1, 1, H, W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| b as f32).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Thresholds an `[H, W]` (or `[1, 1, H, W]`) probability tensor at 0.5.
    pub fn from_prob(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self::from_fn(h, w, |i, j| v[i * w + j] >= 0.5))
    }

    pub fn to_png(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    fn from_png(img: &GrayImage) -> Self {
        Self::from_fn(img.height() as usize, img.width() as usize, |i, j| {
            f64::from(img.get_pixel(j as u32, i as u32)[0]) > MASK_THRESHOLD
        })
    }

    /// Whether any foreground pixel falls in the centred `size x size` window.
    pub fn touches_center(&self, size: usize) -> bool {
        let top = self.height.saturating_sub(size) / 2;
        let left = self.width.saturating_sub(size) / 2;
        (top..(top + size).min(self.height))
            .any(|i| (left..(left + size).min(self.width)).any(|j| self.get(i, j)))
    }
}

/// `C x H x W` image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_vec(self.data.clone(), (1, self.channels, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    fn from_png(img: &GrayImage) -> Self {
        let data = img.pixels().map(|p| f32::from(p[0]) / 255.0).collect();
        Self::new(1, img.height() as usize, img.width() as usize, data)
    }

    /// First channel quantized to 8 bits.
    pub fn to_png(&self) -> GrayImage {
        let plane = self.plane(0);
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = plane[y as usize * self.width + x as usize];
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OctaSample {
    pub id: String,
    pub image: Image,
    pub rv_mask: Mask,
    pub faz_mask: Mask,
}

impl OctaSample {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::UnknownSplit(other.to_string())),
        }
    }
}

fn field_dir(root: &Path, field: Field) -> PathBuf {
    root.join(field.as_str())
}

fn read_png(path: &Path) -> std::result::Result<GrayImage, DataError> {
    let img = image::open(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

/// Sample ids listed in the split manifest, sorted.
pub fn read_manifest(root: &Path, split: Split, field: Field) -> Result<Vec<String>> {
    let path = field_dir(root, field).join(format!("{split}.txt"));
    let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    let mut ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn load_sample(root: &Path, field: Field, id: &str) -> Result<OctaSample> {
    let dir = field_dir(root, field);
    let image = Image::from_png(&read_png(&dir.join("images").join(format!("{id}.png")))?);
    let mut masks = Vec::with_capacity(2);
    for kind in ["rv", "faz"] {
        let path = dir.join(kind).join(format!("{id}.png"));
        if !path.exists() {
            return Err(DataError::MissingMask {
                id: id.to_string(),
                kind,
                path,
            }
            .into());
        }
        let m = Mask::from_png(&read_png(&path)?);
        if m.dims() != image.dims() {
            return Err(DataError::ShapeMismatch {
                id: id.to_string(),
                what: if kind == "rv" { "rv mask" } else { "faz mask" },
                expected: image.dims(),
                got: m.dims(),
            }
            .into());
        }
        masks.push(m);
    }
    let faz_mask = masks.pop().expect("two masks");
    let rv_mask = masks.pop().expect("two masks");
    Ok(OctaSample {
        id: id.to_string(),
        image,
        rv_mask,
        faz_mask,
    })
}

/// Loads every sample of `split`, ordered by id. Logs a warning for FAZ masks
/// that miss the centred `roi_size` window.
pub fn load_dataset(root: &Path, split: Split, field: Field, roi_size: usize) -> Result<Vec<OctaSample>> {
    let ids = read_manifest(root, split, field)?;
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let s = load_sample(root, field, &id)?;
        if !s.faz_mask.is_empty() && !s.faz_mask.touches_center(roi_size) {
            log::warn!("sample {id}: FAZ lies outside the centred {roi_size}px window");
        }
        out.push(s);
    }
    Ok(out)
}

/// Writes samples and split manifests in the layout [`load_dataset`] reads.
pub fn write_dataset(
    root: &Path,
    field: Field,
    splits: &[(Split, &[OctaSample])],
) -> Result<()> {
    let dir = field_dir(root, field);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    for sub in ["images", "rv", "faz"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
    }
    let save = |img: GrayImage, path: PathBuf| -> Result<()> {
        img.save(&path)
            .map_err(|source| DataError::Image { path, source })?;
        Ok(())
    };
    for (split, samples) in splits {
        let mut manifest = String::new();
        for s in samples.iter() {
            save(s.image.to_png(), dir.join("images").join(format!("{}.png", s.id)))?;
            save(s.rv_mask.to_png(), dir.join("rv").join(format!("{}.png", s.id)))?;
            save(s.faz_mask.to_png(), dir.join("faz").join(format!("{}.png", s.id)))?;
            manifest.push_str(&s.id);
            manifest.push('\n');
        }
        let path = dir.join(format!("{split}.txt"));
        std::fs::write(&path, manifest).map_err(io(&path))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation

/// Application probability of each transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformProbs {
    pub brightness_contrast: f64,
    pub clahe: f64,
    pub rotate: f64,
    pub hflip: f64,
    pub vflip: f64,
    pub piecewise_affine: f64,
}

impl TransformProbs {
    pub fn uniform(p: f64) -> Self {
        Self {
            brightness_contrast: p,
            clahe: p,
            rotate: p,
            hflip: p,
            vflip: p,
            piecewise_affine: p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    pub probs: TransformProbs,
    pub rotation_limit_deg: f64,
    pub brightness_limit: f64,
    pub contrast_limit: f64,
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    pub pwa_grid: usize,
    /// Control-point displacement std as a fraction of `min(H, W)`.
    pub pwa_scale: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            probs: TransformProbs::uniform(0.2),
            rotation_limit_deg: 15.0,
            brightness_limit: 0.2,
            contrast_limit: 0.2,
            clahe_clip: 2.0,
            clahe_tiles: 8,
            pwa_grid: 4,
            pwa_scale: 0.03,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            probs: TransformProbs::uniform(0.0),
            ..Self::default()
        }
    }
}

fn reflect101(k: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut k = k.rem_euclid(period);
    if k >= n as i64 {
        k = period - k;
    }
    k as usize
}

/// Inverse coordinate map of a geometric transform: destination pixel to
/// fractional source position (row, col).
#[derive(Debug, Clone)]
pub enum Warp {
    HFlip,
    VFlip,
    Rotate { degrees: f64 },
    /// Piecewise affine over a triangulated control grid; `offsets` holds the
    /// (row, col) displacement of each control point, row-major.
    PiecewiseAffine { grid: usize, offsets: Vec<(f64, f64)> },
}

impl Warp {
    pub fn source(&self, h: usize, w: usize, i: usize, j: usize) -> (f64, f64) {
        let (y, x) = (i as f64, j as f64);
        match self {
            Warp::HFlip => (y, (w - 1) as f64 - x),
            Warp::VFlip => ((h - 1) as f64 - y, x),
            Warp::Rotate { degrees } => {
                let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                let (s, c) = degrees.to_radians().sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                // Inverse rotation of the destination offset.
                (cy + c * dy - s * dx, cx + s * dy + c * dx)
            }
            Warp::PiecewiseAffine { grid, offsets } => {
                let cells = (grid - 1) as f64;
                let gy = if h > 1 { y / (h - 1) as f64 * cells } else { 0.0 };
                let gx = if w > 1 { x / (w - 1) as f64 * cells } else { 0.0 };
                let (ci, cj) = ((gy.floor() as usize).min(grid - 2), (gx.floor() as usize).min(grid - 2));
                let (u, v) = (gy - ci as f64, gx - cj as f64);
                let at = |a: usize, b: usize| offsets[(ci + a) * grid + cj + b];
                let lerp = |p: (f64, f64), q: (f64, f64), r: (f64, f64), s: f64, t: f64| {
                    (p.0 + s * (q.0 - p.0) + t * (r.0 - p.0), p.1 + s * (q.1 - p.1) + t * (r.1 - p.1))
                };
                let d = if u + v <= 1.0 {
                    lerp(at(0, 0), at(1, 0), at(0, 1), u, v)
                } else {
                    lerp(at(1, 1), at(0, 1), at(1, 0), 1.0 - u, 1.0 - v)
                };
                (y + d.0, x + d.1)
            }
        }
    }

    pub fn apply_mask(&self, m: &Mask) -> Mask {
        let (h, w) = m.dims();
        Mask::from_fn(h, w, |i, j| {
            let (sy, sx) = self.source(h, w, i, j);
            m.get(reflect101(sy.round() as i64, h), reflect101(sx.round() as i64, w))
        })
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let (h, w) = img.dims();
        let mut out = img.clone();
        for c in 0..img.channels {
            let src = img.plane(c);
            let dst = out.plane_mut(c);
            for i in 0..h {
                for j in 0..w {
                    let (sy, sx) = self.source(h, w, i, j);
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
                    let px = |dy: i64, dx: i64| {
                        src[reflect101(y0 as i64 + dy, h) * w + reflect101(x0 as i64 + dx, w)]
                    };
                    let top = px(0, 0) * (1.0 - fx) + px(0, 1) * fx;
                    let bottom = px(1, 0) * (1.0 - fx) + px(1, 1) * fx;
                    dst[i * w + j] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        out
    }

    fn apply(&self, s: &mut OctaSample) {
        s.image = self.apply_image(&s.image);
        s.rv_mask = self.apply_mask(&s.rv_mask);
        s.faz_mask = self.apply_mask(&s.faz_mask);
    }
}

/// Contrast-limited adaptive histogram equalization on the 8-bit quantized
/// image, bilinearly blending the per-tile lookup tables.
pub fn clahe(img: &Image, clip: f64, tiles: usize) -> Image {
    let (h, w) = img.dims();
    let (th, tw) = (h.div_ceil(tiles), w.div_ceil(tiles));
    let (ny, nx) = (h.div_ceil(th), w.div_ceil(tw));
    let mut out = img.clone();
    for c in 0..img.channels {
        let q: Vec<u8> = img
            .plane(c)
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut luts = vec![[0f32; 256]; ny * nx];
        for ty in 0..ny {
            for tx in 0..nx {
                let mut hist = [0usize; 256];
                let (r0, r1) = (ty * th, ((ty + 1) * th).min(h));
                let (c0, c1) = (tx * tw, ((tx + 1) * tw).min(w));
                for i in r0..r1 {
                    for j in c0..c1 {
                        hist[q[i * w + j] as usize] += 1;
                    }
                }
                let area = (r1 - r0) * (c1 - c0);
                let limit = ((clip * area as f64 / 256.0) as usize).max(1);
                let mut excess = 0;
                for b in hist.iter_mut() {
                    if *b > limit {
                        excess += *b - limit;
                        *b = limit;
                    }
                }
                let (batch, residual) = (excess / 256, excess % 256);
                for (k, b) in hist.iter_mut().enumerate() {
                    *b += batch + usize::from(k < residual);
                }
                let mut cdf = 0;
                let lut = &mut luts[ty * nx + tx];
                for (k, b) in hist.iter().enumerate() {
                    cdf += b;
                    lut[k] = (cdf as f32 * 255.0 / area as f32).round().min(255.0) / 255.0;
                }
            }
        }
        let axis = |p: usize, size: usize, n: usize| {
            let f = (p as f64 + 0.5) / size as f64 - 0.5;
            let lo = f.floor();
            let a = (lo.max(0.0) as usize).min(n - 1);
            let b = ((lo + 1.0).max(0.0) as usize).min(n - 1);
            let t = if f < 0.0 || a == b { 0.0 } else { (f - lo) as f32 };
            (a, b, t)
        };
        let dst = out.plane_mut(c);
        for i in 0..h {
            let (y1, y2, wy) = axis(i, th, ny);
            for j in 0..w {
                let (x1, x2, wx) = axis(j, tw, nx);
                let v = q[i * w + j] as usize;
                let top = luts[y1 * nx + x1][v] * (1.0 - wx) + luts[y1 * nx + x2][v] * wx;
                let bottom = luts[y2 * nx + x1][v] * (1.0 - wx) + luts[y2 * nx + x2][v] * wx;
                dst[i * w + j] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

/// Applies each transform of `policy` independently with its probability.
/// Photometric transforms touch the image only; geometric ones warp the image
/// bilinearly and both masks with nearest-neighbour sampling.
pub fn augment(sample: &OctaSample, rng: &mut ChaCha8Rng, policy: &AugmentationPolicy) -> OctaSample {
    let mut s = sample.clone();
    let p = policy.probs;
    let (h, w) = s.dims();
    if rng.random_bool(p.brightness_contrast) {
        let alpha = 1.0 + rng.random_range(-policy.contrast_limit..=policy.contrast_limit) as f32;
        let beta = rng.random_range(-policy.brightness_limit..=policy.brightness_limit) as f32;
        s.image.data.iter_mut().for_each(|v| *v = (*v * alpha + beta).clamp(0.0, 1.0));
    }
    if rng.random_bool(p.clahe) {
        s.image = clahe(&s.image, policy.clahe_clip, policy.clahe_tiles);
    }
    if rng.random_bool(p.rotate) {
        let lim = policy.rotation_limit_deg;
        Warp::Rotate {
            degrees: rng.random_range(-lim..=lim),
        }
        .apply(&mut s);
    }
    if rng.random_bool(p.hflip) {
        Warp::HFlip.apply(&mut s);
    }
    if rng.random_bool(p.vflip) {
        Warp::VFlip.apply(&mut s);
    }
    if rng.random_bool(p.piecewise_affine) {
        let std = policy.pwa_scale * h.min(w) as f64;
        let normal = Normal::new(0.0, std).expect("finite std");
        let grid = policy.pwa_grid.max(2);
        let offsets = (0..grid * grid)
            .map(|_| (normal.sample(rng), normal.sample(rng)))
            .collect();
        Warp::PiecewiseAffine { grid, offsets }.apply(&mut s);
    }
    s
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Generator constants, frozen after measuring FAZ coverage over 100 seeds.
const FAZ_MIN_DIV: f64 = 10.0;
const FAZ_MAX_DIV: f64 = 6.5;
const NOISE_STD: f64 = 0.02;

fn paint_disc(m: &mut Mask, cy: f64, cx: f64, width: usize) {
    let (h, w) = m.dims();
    let r = (width as f64 - 1.0) / 2.0;
    let (i0, i1) = ((cy - r).floor().max(0.0) as i64, (cy + r).ceil() as i64);
    let (j0, j1) = ((cx - r).floor().max(0.0) as i64, (cx + r).ceil() as i64);
    for i in i0..=i1.min(h as i64 - 1) {
        for j in j0..=j1.min(w as i64 - 1) {
            let (dy, dx) = (i as f64 - cy.round(), j as f64 - cx.round());
            if dy * dy + dx * dx <= r * r + 0.25 {
                m.set(i as usize, j as usize, true);
            }
        }
    }
}

struct Branch {
    y: f64,
    x: f64,
    angle: f64,
    width: usize,
    steps: usize,
}

fn grow_tree(m: &mut Mask, rng: &mut ChaCha8Rng, root: Branch) {
    let (h, w) = m.dims();
    let mut stack = vec![root];
    let turn = Normal::new(0.0, 0.12).expect("finite std");
    let mut budget = 4000;
    while let Some(mut b) = stack.pop() {
        for _ in 0..b.steps {
            if budget == 0 {
                return;
            }
            budget -= 1;
            paint_disc(m, b.y, b.x, b.width);
            b.angle += turn.sample(rng);
            b.y += b.angle.sin();
            b.x += b.angle.cos();
            if b.y < -2.0 || b.x < -2.0 || b.y > h as f64 + 1.0 || b.x > w as f64 + 1.0 {
                break;
            }
            if rng.random_bool(0.025) {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                stack.push(Branch {
                    y: b.y,
                    x: b.x,
                    angle: b.angle + side * rng.random_range(0.35..0.9),
                    width: b.width.saturating_sub(1).max(1),
                    steps: rng.random_range(15..60),
                });
            }
        }
    }
}

fn box_blur(v: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    let kernel = [1.0f32 / 6.0, 4.0 / 6.0, 1.0 / 6.0];
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = (0..3)
                .map(|k| kernel[k] * v[i * w + reflect101(j as i64 + k as i64 - 1, w)])
                .sum();
        }
    }
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (0..3)
                .map(|k| kernel[k] * tmp[reflect101(i as i64 + k as i64 - 1, h) * w + j])
                .sum();
        }
    }
    out
}

/// One synthetic sample: a branching vessel tree around a dark central
/// elliptical FAZ, rendered with light smoothing and Gaussian noise.
pub fn synth_sample(id: impl Into<String>, (h, w): (usize, usize), rng: &mut ChaCha8Rng) -> OctaSample {
    let side = h.min(w) as f64;
    let (a, b) = (
        rng.random_range(side / FAZ_MIN_DIV..side / FAZ_MAX_DIV),
        rng.random_range(side / FAZ_MIN_DIV..side / FAZ_MAX_DIV),
    );
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let jitter = side / 20.0;
    let cy = (h as f64 - 1.0) / 2.0 + rng.random_range(-jitter..jitter);
    let cx = (w as f64 - 1.0) / 2.0 + rng.random_range(-jitter..jitter);
    let (st, ct) = theta.sin_cos();
    let faz = Mask::from_fn(h, w, |i, j| {
        let (dy, dx) = (i as f64 - cy, j as f64 - cx);
        let u = ct * dx + st * dy;
        let v = -st * dx + ct * dy;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    });

    let mut vessels = Mask::zeros(h, w);
    let roots = rng.random_range(6..10);
    for k in 0..roots {
        // Trees start just outside the FAZ rim and grow outwards.
        let phi = std::f64::consts::TAU * (k as f64 + rng.random_range(0.0..0.8)) / roots as f64;
        let r = a.max(b) + 2.0;
        let root = Branch {
            y: cy + r * phi.sin(),
            x: cx + r * phi.cos(),
            angle: phi + rng.random_range(-0.3..0.3),
            width: rng.random_range(2..=4),
            steps: rng.random_range(60..140),
        };
        grow_tree(&mut vessels, rng, root);
    }
    for (k, v) in faz.data().iter().enumerate() {
        if *v == 1 {
            vessels.data[k] = 0;
        }
    }

    let render: Vec<f32> = vessels.data().iter().map(|&v| if v == 1 { 0.85 } else { 0.12 }).collect();
    let mut render = box_blur(&render, h, w);
    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    for (k, px) in render.iter_mut().enumerate() {
        if faz.data()[k] == 1 {
            *px = 0.03;
        }
        *px = (*px + noise.sample(rng) as f32).clamp(0.0, 1.0);
    }
    OctaSample {
        id: id.into(),
        image: Image::new(1, h, w, render),
        rv_mask: vessels,
        faz_mask: faz,
    }
}

/// `n` samples with ids `synth_000`, `synth_001`, ...; deterministic in `seed`.
pub fn synth_generate(n: usize, hw: (usize, usize), seed: u64) -> Vec<OctaSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synth_sample(format!("synth_{i:03}"), hw, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::digest_bytes;

    fn sample_bytes(s: &OctaSample) -> Vec<u8> {
        let mut v: Vec<u8> = s.image.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        v.extend(s.rv_mask.data());
        v.extend(s.faz_mask.data());
        v
    }

    fn only(f: impl Fn(&mut TransformProbs)) -> AugmentationPolicy {
        let mut p = AugmentationPolicy::none();
        f(&mut p.probs);
        p
    }

    #[test]
    fn synth_is_deterministic_and_disjoint() {
        let a = synth_generate(4, (128, 128), 0);
        let b = synth_generate(4, (128, 128), 0);
        assert_eq!(a, b);
        for s in &a {
            assert!(s.rv_mask.data().iter().zip(s.faz_mask.data()).all(|(r, f)| r & f == 0));
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.faz_mask.touches_center(96));
        }
        assert_ne!(a[0], synth_generate(1, (128, 128), 1)[0]);
    }

    #[test]
    fn synth_faz_fraction_over_seeds() {
        for seed in 0..100 {
            let s = &synth_generate(1, (128, 128), seed)[0];
            let frac = s.faz_mask.count() as f64 / (128.0 * 128.0);
            assert!((0.005..=0.08).contains(&frac), "seed {seed}: {frac}");
            let rv = s.rv_mask.count() as f64 / (128.0 * 128.0);
            assert!(rv > 0.03 && rv < 0.5, "seed {seed}: vessel fraction {rv}");
        }
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = &synth_generate(1, (48, 40), 3)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(&augment(s, &mut rng, &AugmentationPolicy::none()), s);
    }

    #[test]
    fn forced_hflip_mirrors_everything() {
        let s = &synth_generate(1, (32, 24), 4)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(s, &mut rng, &only(|p| p.hflip = 1.0));
        for i in 0..32 {
            for j in 0..24 {
                assert_eq!(out.image.data[i * 24 + j], s.image.data[i * 24 + 23 - j]);
                assert_eq!(out.rv_mask.get(i, j), s.rv_mask.get(i, 23 - j));
                assert_eq!(out.faz_mask.get(i, j), s.faz_mask.get(i, 23 - j));
            }
        }
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let s = &synth_generate(1, (40, 40), 5)[0];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            digest_bytes(&sample_bytes(&augment(s, &mut rng, &AugmentationPolicy::default())))
        };
        assert_eq!(run(0), run(0));
    }

    #[test]
    fn augmentation_keeps_masks_binary_and_shapes() {
        let s = &synth_generate(1, (24, 20), 6)[0];
        let policy = AugmentationPolicy {
            probs: TransformProbs::uniform(0.5),
            ..AugmentationPolicy::default()
        };
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(s, &mut rng, &policy);
            assert_eq!(out.dims(), s.dims());
            assert_eq!(out.rv_mask.dims(), s.dims());
            assert!(out.rv_mask.data().iter().all(|&v| v <= 1));
            assert!(out.faz_mask.data().iter().all(|&v| v <= 1));
            assert!(out.image.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn geometric_warps_share_one_index_map() {
        let (h, w) = (20, 17);
        let warps = [
            Warp::Rotate { degrees: 11.0 },
            Warp::PiecewiseAffine {
                grid: 4,
                offsets: (0..16).map(|k| ((k as f64 * 0.37).sin(), (k as f64 * 0.91).cos())).collect(),
            },
            Warp::VFlip,
        ];
        for warp in &warps {
            // Each mask bit selects a pixel; warping all of them must agree
            // with warping the index image through the same nearest map.
            let index = |i: usize, j: usize| i * w + j;
            for bit in 0..9 {
                let m = Mask::from_fn(h, w, |i, j| (index(i, j) >> bit) & 1 == 1);
                let out = warp.apply_mask(&m);
                for i in 0..h {
                    for j in 0..w {
                        let (sy, sx) = warp.source(h, w, i, j);
                        let src = index(reflect101(sy.round() as i64, h), reflect101(sx.round() as i64, w));
                        assert_eq!(out.get(i, j), (src >> bit) & 1 == 1);
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_by_zero_and_pwa_without_offsets_are_identity() {
        let s = &synth_generate(1, (16, 16), 7)[0];
        let r = Warp::Rotate { degrees: 0.0 };
        assert_eq!(r.apply_mask(&s.rv_mask), s.rv_mask);
        let p = Warp::PiecewiseAffine {
            grid: 4,
            offsets: vec![(0.0, 0.0); 16],
        };
        let img = p.apply_image(&s.image);
        assert!(img.data.iter().zip(&s.image.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn clahe_stays_in_range_and_spreads_contrast() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..256 * 256).map(|_| rng.random_range(0.4..0.5)).collect();
        let img = Image::new(1, 256, 256, data);
        let out = clahe(&img, 2.0, 8);
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let span = |d: &[f32]| {
            d.iter().cloned().fold(f32::MIN, f32::max) - d.iter().cloned().fold(f32::MAX, f32::min)
        };
        assert!(span(&out.data) > span(&img.data));
    }

    #[test]
    fn loader_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(3, (20, 20), 8);
        write_dataset(dir.path(), Field::ThreeMm, &[(Split::Train, &samples)]).unwrap();
        let loaded = load_dataset(dir.path(), Split::Train, Field::ThreeMm, 16).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.rv_mask, b.rv_mask);
            assert_eq!(a.faz_mask, b.faz_mask);
            let quant = b.image.to_png();
            assert!(a.image.data.iter().zip(quant.pixels()).all(|(x, p)| *x == f32::from(p[0]) / 255.0));
        }
        assert!(matches!("holdout".parse::<Split>(), Err(DataError::UnknownSplit(_))));

        // Gray 128 binarizes to foreground.
        let root = dir.path().join("3M");
        let mut gray = GrayImage::new(20, 20);
        gray.put_pixel(3, 4, Luma([128]));
        gray.put_pixel(5, 6, Luma([127]));
        gray.save(root.join("rv").join("synth_000.png")).unwrap();
        let s = load_sample(dir.path(), Field::ThreeMm, "synth_000").unwrap();
        assert_eq!(s.rv_mask.count(), 1);
        assert!(s.rv_mask.get(4, 3));

        GrayImage::new(19, 20).save(root.join("faz").join("synth_001.png")).unwrap();
        let err = load_sample(dir.path(), Field::ThreeMm, "synth_001").unwrap_err();
        assert!(matches!(err, crate::Error::Data(DataError::ShapeMismatch { .. })));

        std::fs::remove_file(root.join("rv").join("synth_002.png")).unwrap();
        let err = load_sample(dir.path(), Field::ThreeMm, "synth_002").unwrap_err();
        assert!(matches!(err, crate::Error::Data(DataError::MissingMask { kind: "rv", .. })));
    }
}
