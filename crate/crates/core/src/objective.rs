//! Segmentation losses and overlap metrics.
//!
//! Losses take a ground-truth tensor `y` and a probability tensor `p` of the
//! same shape `[B, 1, H, W]` and return a differentiable scalar. Distance
//! transforms are computed from masks and enter the graph as constants.

use candle_core::{DType, Tensor};

use crate::config::{FazWeights, LossWeights, RvWeights};
use crate::dataio::Mask;
use crate::error::{Error, Result};
use crate::layers::scalar;

/// Smoothing term of the soft overlap losses.
pub const EPS: f64 = 1e-6;
pub const TVERSKY_ALPHA: f64 = 0.3;
pub const TVERSKY_BETA: f64 = 0.7;

/// Overlap counts of a ground-truth and a predicted mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub truth: u64,
    pub pred: u64,
    pub both: u64,
}

impl Overlap {
    pub fn count(y: &Mask, p: &Mask) -> Self {
        assert_eq!(y.dims(), p.dims(), "mask shapes differ");
        let mut o = Overlap::default();
        for (&a, &b) in y.data().iter().zip(p.data()) {
            o.truth += a as u64;
            o.pred += b as u64;
            o.both += (a & b) as u64;
        }
        o
    }

    pub fn dice(&self) -> f64 {
        let denom = self.truth + self.pred;
        if denom == 0 {
            1.0
        } else {
            (2 * self.both) as f64 / denom as f64
        }
    }

    pub fn jaccard(&self) -> f64 {
        let union = self.truth + self.pred - self.both;
        if union == 0 {
            1.0
        } else {
            self.both as f64 / union as f64
        }
    }
}

/// `2|Y n P| / (|Y| + |P|)`, 1 when both masks are empty.
pub fn dice_metric(y: &Mask, p: &Mask) -> f64 {
    Overlap::count(y, p).dice()
}

/// `|Y n P| / |Y u P|`, 1 when both masks are empty.
pub fn jaccard_metric(y: &Mask, p: &Mask) -> f64 {
    Overlap::count(y, p).jaccard()
}

const INF: f64 = 1e20;

/// Squared distance transform of a sampled function along one line.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Euclidean distance from every pixel to the nearest pixel where `source`
/// is true (0 on sources). Returns `None` when there are no sources.
pub fn distance_to(source: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    assert_eq!(source.len(), h * w);
    if !source.iter().any(|&s| s) {
        return None;
    }
    let mut grid: Vec<f64> = source.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    let n = h.max(w);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for i in 0..h {
        let row = &mut grid[i * w..(i + 1) * w];
        f[..w].copy_from_slice(row);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        row.copy_from_slice(&d[..w]);
    }
    for j in 0..w {
        for i in 0..h {
            f[i] = grid[i * w + j];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for i in 0..h {
            grid[i * w + j] = d[i];
        }
    }
    Some(grid.into_iter().map(f64::sqrt).collect())
}

/// Signed distance to the mask boundary: distance to the nearest foreground
/// pixel outside the mask, minus the distance to the nearest background pixel
/// inside it. All zeros when the mask is empty or full.
pub fn signed_distance(mask: &Mask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let fg: Vec<bool> = mask.data().iter().map(|&v| v == 1).collect();
    let bg: Vec<bool> = fg.iter().map(|&v| !v).collect();
    match (distance_to(&fg, h, w), distance_to(&bg, h, w)) {
        (Some(out), Some(inside)) => out.iter().zip(&inside).map(|(o, i)| o - i).collect(),
        _ => vec![0.0; h * w],
    }
}

/// Unsigned distance to the mask boundary, `|signed_distance|`.
pub fn boundary_distance(mask: &Mask) -> Vec<f64> {
    signed_distance(mask).into_iter().map(f64::abs).collect()
}

/// Masks of a `[B, 1, H, W]` tensor thresholded at 0.5.
pub fn masks_of(t: &Tensor) -> Result<Vec<Mask>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(candle_core::Error::Msg(format!("expected one channel, got {c}")).into());
    }
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.chunks(h * w)
        .take(b)
        .map(|c| Mask::from_fn(h, w, |i, j| c[i * w + j] >= 0.5))
        .collect())
}

/// Stacks per-sample maps back into a tensor shaped like `like`.
fn constant_like(maps: Vec<Vec<f64>>, like: &Tensor) -> Result<Tensor> {
    let flat: Vec<f64> = maps.into_iter().flatten().collect();
    Ok(Tensor::from_vec(flat, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// `1 - (2 sum(YP) + eps) / (sum(Y) + sum(P) + eps)`.
pub fn dice_loss_eps(y: &Tensor, p: &Tensor, eps: f64) -> Result<Tensor> {
    let inter = (y * p)?.sum_all()?;
    let num = inter.affine(2.0, eps)?;
    let den = (y.sum_all()? + p.sum_all()?)?.affine(1.0, eps)?;
    Ok((num / den)?.affine(-1.0, 1.0)?)
}

pub fn dice_loss(y: &Tensor, p: &Tensor) -> Result<Tensor> {
    dice_loss_eps(y, p, EPS)
}

/// `1 - (TP + eps) / (TP + alpha FP + beta FN + eps)` on soft counts.
pub fn tversky_loss_with(y: &Tensor, p: &Tensor, alpha: f64, beta: f64, eps: f64) -> Result<Tensor> {
    let tp = (y * p)?.sum_all()?;
    let fp = (p.sum_all()? - &tp)?;
    let fnn = (y.sum_all()? - &tp)?;
    let num = tp.affine(1.0, eps)?;
    let den = ((&tp + fp.affine(alpha, 0.0)?)? + fnn.affine(beta, eps)?)?;
    Ok((num / den)?.affine(-1.0, 1.0)?)
}

pub fn tversky_loss(y: &Tensor, p: &Tensor) -> Result<Tensor> {
    tversky_loss_with(y, p, TVERSKY_ALPHA, TVERSKY_BETA, EPS)
}

/// Surface loss: `mean(P * sdf(Y))`.
pub fn boundary_loss(y: &Tensor, p: &Tensor) -> Result<Tensor> {
    let sdf = masks_of(y)?.iter().map(signed_distance).collect();
    let sdf = constant_like(sdf, p)?;
    Ok((p * sdf)?.mean_all()?)
}

/// Distance-transform Hausdorff surrogate:
/// `mean((P - Y)^2 * (dt(Y)^2 + dt(bin P)^2))`. The transform of the
/// binarized prediction is a constant.
pub fn hausdorff_loss(y: &Tensor, p: &Tensor) -> Result<Tensor> {
    let ys = masks_of(y)?;
    let ps = masks_of(&p.detach())?;
    let field = ys
        .iter()
        .zip(&ps)
        .map(|(ym, pm)| {
            boundary_distance(ym)
                .iter()
                .zip(boundary_distance(pm))
                .map(|(a, b)| a * a + b * b)
                .collect()
        })
        .collect();
    let field = constant_like(field, p)?;
    Ok(((p - y)?.sqr()? * field)?.mean_all()?)
}

impl RvWeights {
    pub fn combine(&self, dice: f64, boundary: f64, tversky: f64, hausdorff: f64) -> f64 {
        self.dice * dice + self.boundary * boundary + self.tversky * tversky + self.hausdorff * hausdorff
    }
}

impl FazWeights {
    pub fn combine(&self, dice: f64, boundary: f64) -> f64 {
        self.dice * dice + self.boundary * boundary
    }
}

impl LossWeights {
    pub fn combine(&self, rv: f64, faz: f64) -> f64 {
        self.lambda_rv * rv + self.lambda_faz * faz
    }
}

/// Scalar values of every loss term, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub rv_dice: f64,
    pub rv_boundary: f64,
    pub rv_tversky: f64,
    pub rv_hausdorff: f64,
    pub faz_dice: f64,
    pub faz_boundary: f64,
    pub rv: f64,
    pub faz: f64,
    pub total: f64,
}

pub fn rv_loss(y: &Tensor, p: &Tensor, w: &RvWeights) -> Result<(Tensor, [f64; 4])> {
    let terms = [
        dice_loss(y, p)?,
        boundary_loss(y, p)?,
        tversky_loss(y, p)?,
        hausdorff_loss(y, p)?,
    ];
    let coef = [w.dice, w.boundary, w.tversky, w.hausdorff];
    let mut total = terms[0].affine(coef[0], 0.0)?;
    for (t, c) in terms.iter().zip(coef).skip(1) {
        total = (total + t.affine(c, 0.0)?)?;
    }
    let mut values = [0.0; 4];
    for (v, t) in values.iter_mut().zip(&terms) {
        *v = scalar(t)?;
    }
    Ok((total, values))
}

pub fn faz_loss(y: &Tensor, p: &Tensor, w: &FazWeights) -> Result<(Tensor, [f64; 2])> {
    let dice = dice_loss(y, p)?;
    let boundary = boundary_loss(y, p)?;
    let total = (dice.affine(w.dice, 0.0)? + boundary.affine(w.boundary, 0.0)?)?;
    Ok((total, [scalar(&dice)?, scalar(&boundary)?]))
}

/// `lambda_rv * L_rv + lambda_faz * L_faz`.
pub fn total_loss(
    rv: (&Tensor, &Tensor),
    faz: (&Tensor, &Tensor),
    w: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let (lrv, [rd, rb, rt, rh]) = rv_loss(rv.0, rv.1, &w.rv)?;
    let (lfaz, [fd, fb]) = faz_loss(faz.0, faz.1, &w.faz)?;
    let total = (lrv.affine(w.lambda_rv, 0.0)? + lfaz.affine(w.lambda_faz, 0.0)?)?;
    let breakdown = LossBreakdown {
        rv_dice: rd,
        rv_boundary: rb,
        rv_tversky: rt,
        rv_hausdorff: rh,
        faz_dice: fd,
        faz_boundary: fb,
        rv: scalar(&lrv)?,
        faz: scalar(&lfaz)?,
        total: scalar(&total)?,
    };
    Ok((total, breakdown))
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Per-sample overlap scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub rv_dice: f64,
    pub rv_jaccard: f64,
    pub faz_dice: f64,
    pub faz_jaccard: f64,
}

impl SampleMetrics {
    pub fn compute(id: impl Into<String>, rv: (&Mask, &Mask), faz: (&Mask, &Mask)) -> Self {
        let r = Overlap::count(rv.0, rv.1);
        let f = Overlap::count(faz.0, faz.1);
        Self {
            id: id.into(),
            rv_dice: r.dice(),
            rv_jaccard: r.jaccard(),
            faz_dice: f.dice(),
            faz_jaccard: f.jaccard(),
        }
    }
}

/// Column means and standard deviations over a metrics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub rv_dice: (f64, f64),
    pub rv_jaccard: (f64, f64),
    pub faz_dice: (f64, f64),
    pub faz_jaccard: (f64, f64),
}

pub fn summarize(rows: &[SampleMetrics]) -> Result<MetricsSummary> {
    let col = |f: fn(&SampleMetrics) -> f64| aggregate(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsSummary {
        rv_dice: col(|r| r.rv_dice)?,
        rv_jaccard: col(|r| r.rv_jaccard)?,
        faz_dice: col(|r| r.faz_dice)?,
        faz_jaccard: col(|r| r.faz_jaccard)?,
    })
}

pub const METRICS_HEADER: [&str; 5] = ["id", "rv_dice", "rv_jaccard", "faz_dice", "faz_jaccard"];

/// CSV with one row per sample and a final `mean±std` row.
pub fn metrics_csv(rows: &[SampleMetrics]) -> Result<String> {
    let summary = summarize(rows)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            format!("{:.6}", r.rv_dice),
            format!("{:.6}", r.rv_jaccard),
            format!("{:.6}", r.faz_dice),
            format!("{:.6}", r.faz_jaccard),
        ])
        .map_err(io)?;
    }
    let pm = |(m, s): (f64, f64)| format!("{m:.6}±{s:.6}");
    w.write_record([
        "mean±std".to_string(),
        pm(summary.rv_dice),
        pm(summary.rv_jaccard),
        pm(summary.faz_dice),
        pm(summary.faz_jaccard),
    ])
    .map_err(io)?;
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        Mask::from_fn(h, w, |i, j| on.contains(&(i, j)))
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
        Mask::from_fn(h, w, |_, _| rng.random_bool(p))
    }

    fn t(m: &Mask) -> Tensor {
        m.to_tensor(DType::F64, &Device::Cpu).unwrap()
    }

    fn val(x: Result<Tensor>) -> f64 {
        scalar(&x.unwrap()).unwrap()
    }

    fn brute_edt(source: &[bool], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; h * w];
        for i in 0..h {
            for j in 0..w {
                for a in 0..h {
                    for b in 0..w {
                        if source[a * w + b] {
                            let d = ((i as f64 - a as f64).powi(2) + (j as f64 - b as f64).powi(2)).sqrt();
                            out[i * w + j] = out[i * w + j].min(d);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn metric_examples() {
        let y = mask(3, 3, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let p = mask(3, 3, &[(0, 0), (1, 1)]);
        assert!((dice_metric(&y, &p) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard_metric(&y, &p), 0.5);
        assert_eq!(dice_metric(&y, &y), 1.0);
        let q = mask(3, 3, &[(2, 2)]);
        assert_eq!(dice_metric(&y, &q), 0.0);
        let empty = Mask::zeros(3, 3);
        assert_eq!(dice_metric(&empty, &empty), 1.0);
        assert_eq!(jaccard_metric(&empty, &empty), 1.0);
        assert_eq!(dice_metric(&empty, &q), 0.0);
    }

    #[test]
    fn metrics_are_symmetric_and_linked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let y = random_mask(&mut rng, 6, 7, 0.3);
            let p = random_mask(&mut rng, 6, 7, 0.3);
            let d = dice_metric(&y, &p);
            let j = jaccard_metric(&y, &p);
            assert_eq!(d, dice_metric(&p, &y));
            assert!(j <= d);
            assert!((j - d / (2.0 - d)).abs() < 1e-12);
        }
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..40 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let src: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.15)).collect();
            match distance_to(&src, h, w) {
                None => assert!(!src.iter().any(|&s| s)),
                Some(d) => {
                    let b = brute_edt(&src, h, w);
                    for (x, y) in d.iter().zip(&b) {
                        assert!((x - y).abs() < 1e-9, "case {case}: {x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn signed_distance_on_a_line() {
        let y = mask(1, 4, &[(0, 1), (0, 2)]);
        assert_eq!(signed_distance(&y), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(signed_distance(&Mask::zeros(2, 2)), vec![0.0; 4]);
    }

    #[test]
    fn dice_loss_examples() {
        let y = mask(2, 2, &[(0, 0), (0, 1)]);
        let half = Tensor::full(0.5f64, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let expected = 1.0 - (2.0 * 1.0 + EPS) / (4.0 + EPS);
        assert!((val(dice_loss(&t(&y), &half)) - expected).abs() < 1e-15);
        assert!(val(dice_loss(&t(&y), &t(&y))) < 1e-5);
        let inv = t(&y).affine(-1.0, 1.0).unwrap();
        assert!((val(dice_loss(&t(&y), &inv)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tversky_examples() {
        // 2 TP, 2 FP, 1 FN.
        let y = mask(3, 3, &[(0, 0), (0, 1), (2, 2)]);
        let p = mask(3, 3, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let expected = 1.0 - (2.0 + EPS) / (2.0 + 0.3 * 2.0 + 0.7 * 1.0 + EPS);
        assert!((val(tversky_loss(&t(&y), &t(&p))) - expected).abs() < 1e-15);
        assert!(val(tversky_loss(&t(&y), &t(&y))) < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let y = t(&random_mask(&mut rng, 5, 5, 0.4));
            let v: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = Tensor::from_vec(v, (1, 1, 5, 5), &Device::Cpu).unwrap();
            let tv = val(tversky_loss_with(&y, &p, 0.5, 0.5, EPS));
            let dl = val(dice_loss_eps(&y, &p, 2.0 * EPS));
            assert!((tv - dl).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_loss_examples() {
        let y = mask(1, 4, &[(0, 1), (0, 2)]);
        let p = mask(1, 4, &[(0, 1)]);
        assert!((val(boundary_loss(&t(&y), &t(&p))) + 0.25).abs() < 1e-15);
        let zero = t(&y).zeros_like().unwrap();
        assert_eq!(val(boundary_loss(&t(&y), &zero)), 0.0);
        let blob = Mask::from_fn(9, 9, |i, j| (2..7).contains(&i) && (2..7).contains(&j));
        assert!(val(boundary_loss(&t(&blob), &t(&blob))) < 0.0);
    }

    #[test]
    fn hausdorff_shifted_pixel() {
        let y = mask(5, 5, &[(2, 2)]);
        let p = mask(5, 5, &[(2, 3)]);
        // Brute-force transforms: both differing pixels see 1^2 + 1^2.
        let field = |m: &Mask| -> Vec<f64> {
            let fg: Vec<bool> = m.data().iter().map(|&v| v == 1).collect();
            let bg: Vec<bool> = fg.iter().map(|v| !v).collect();
            let (o, i) = (brute_edt(&fg, 5, 5), brute_edt(&bg, 5, 5));
            o.iter().zip(&i).map(|(a, b)| if *a == 0.0 { *b } else { *a }).collect()
        };
        let (dy, dp) = (field(&y), field(&p));
        let mut expected = 0.0;
        for k in 0..25 {
            let diff = y.data()[k] as f64 - p.data()[k] as f64;
            expected += diff * diff * (dy[k] * dy[k] + dp[k] * dp[k]);
        }
        expected /= 25.0;
        assert_eq!(expected, 0.16);
        assert!((val(hausdorff_loss(&t(&y), &t(&p))) - expected).abs() < 1e-15);
        assert_eq!(val(hausdorff_loss(&t(&y), &t(&y))), 0.0);
    }

    #[test]
    fn losses_have_matching_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = t(&random_mask(&mut rng, 8, 8, 0.4));
        let v: Vec<f64> = (0..64).map(|_| rng.random_range(0.05..0.95)).collect();
        let p = Tensor::from_vec(v, (1, 1, 8, 8), &Device::Cpu).unwrap();
        type LossFn = fn(&Tensor, &Tensor) -> Result<Tensor>;
        let losses: [(&str, LossFn); 4] = [
            ("dice", dice_loss),
            ("tversky", tversky_loss),
            ("boundary", boundary_loss),
            ("hausdorff", hausdorff_loss),
        ];
        for (name, f) in losses {
            let r = gradcheck::check(|q| f(&y, q), &p, 1e-6).unwrap();
            assert!(r.rel_error < 1e-5, "{name}: {r:?}");
        }
    }

    #[test]
    fn weighted_combinations() {
        let w = LossWeights::default();
        assert!((w.rv.combine(0.1, 0.2, 0.3, 0.4) - 0.17).abs() < 1e-15);
        assert!((w.faz.combine(0.5, 0.1) - 0.42).abs() < 1e-15);
        assert!((w.combine(1.0, 1.0) - 7.1).abs() < 1e-15);
        let six = LossWeights::for_field(crate::Field::SixMm);
        assert_eq!(six.combine(1.0, 1.0), 5.0);
    }

    #[test]
    fn total_loss_matches_combined_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = t(&random_mask(&mut rng, 6, 6, 0.3));
        let v: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..1.0)).collect();
        let p = Tensor::from_vec(v, (1, 1, 6, 6), &Device::Cpu).unwrap();
        let w = LossWeights::default();
        let (total, b) = total_loss((&y, &p), (&y, &p), &w).unwrap();
        let rv = w.rv.combine(b.rv_dice, b.rv_boundary, b.rv_tversky, b.rv_hausdorff);
        let faz = w.faz.combine(b.faz_dice, b.faz_boundary);
        assert!((b.rv - rv).abs() < 1e-12);
        assert!((b.faz - faz).abs() < 1e-12);
        assert!((scalar(&total).unwrap() - w.combine(rv, faz)).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[0.9, 0.9]).unwrap(), (0.9, 0.0));
        let (m, s) = aggregate(&[0.8, 1.0]).unwrap();
        assert!((m - 0.9).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
        assert!(matches!(aggregate(&[]), Err(Error::EmptySet)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut sum = 0.0;
        for x in &v {
            sum += x;
        }
        let mean = sum / 30.0;
        let mut ss = 0.0;
        for x in &v {
            ss += (x - mean).powi(2);
        }
        let (m, s) = aggregate(&v).unwrap();
        assert!((m - mean).abs() < 1e-12);
        assert!((s - (ss / 30.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_has_summary_row() {
        let rows = vec![
            SampleMetrics {
                id: "a".into(),
                rv_dice: 0.8,
                rv_jaccard: 0.8 / 1.2,
                faz_dice: 1.0,
                faz_jaccard: 1.0,
            },
            SampleMetrics {
                id: "b".into(),
                rv_dice: 1.0,
                rv_jaccard: 1.0,
                faz_dice: 1.0,
                faz_jaccard: 1.0,
            },
        ];
        let text = metrics_csv(&rows).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,rv_dice,rv_jaccard,faz_dice,faz_jaccard");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean±std,0.900000±0.100000,"));
        assert!(metrics_csv(&[]).is_err());
    }
}
