//! File artifacts: prediction overlays, probability maps, gate dumps and
//! ablation bar charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};

use octaseg_core::dataio::{Mask, OctaSample};
use octaseg_core::error::DataError;
use octaseg_core::vmaf::VmafGates;

use crate::ablate::{AblationRow, Study};
use crate::error::{io_err, HarnessError, Result};

pub const RV_PRED: [u8; 3] = [255, 0, 0];
pub const RV_GT: [u8; 3] = [0, 255, 0];
pub const FAZ_PRED: [u8; 3] = [0, 0, 255];
pub const FAZ_GT: [u8; 3] = [255, 255, 0];

/// Pixels of `m` with at least one 4-neighbour outside it (or on the border).
pub fn boundary(m: &Mask) -> Mask {
    let (h, w) = m.dims();
    Mask::from_fn(h, w, |i, j| {
        m.get(i, j)
            && (i == 0
                || j == 0
                || i + 1 == h
                || j + 1 == w
                || !m.get(i - 1, j)
                || !m.get(i + 1, j)
                || !m.get(i, j - 1)
                || !m.get(i, j + 1))
    })
}

fn shape_err(id: &str, what: &'static str, expected: (usize, usize), got: (usize, usize)) -> HarnessError {
    octaseg_core::Error::Data(DataError::ShapeMismatch {
        id: id.to_string(),
        what,
        expected,
        got,
    })
    .into()
}

/// Grayscale base with predictions filled and ground-truth contours drawn
/// on top, in the order RV pred, FAZ pred, RV contour, FAZ contour.
pub fn render_overlay(sample: &OctaSample, rv_pred: &Mask, faz_pred: &Mask) -> Result<RgbImage> {
    let (h, w) = sample.dims();
    for (what, m) in [("RV prediction", rv_pred), ("FAZ prediction", faz_pred)] {
        if m.dims() != (h, w) {
            return Err(shape_err(&sample.id, what, (h, w), m.dims()));
        }
    }
    let base = sample.image.to_png();
    let rv_gt = boundary(&sample.rv_mask);
    let faz_gt = boundary(&sample.faz_mask);
    let layers = [(rv_pred, RV_PRED), (faz_pred, FAZ_PRED), (&rv_gt, RV_GT), (&faz_gt, FAZ_GT)];
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let g = base.get_pixel(x, y)[0];
        let mut px = [g, g, g];
        for (m, color) in layers {
            if m.get(i, j) {
                px = color;
            }
        }
        Rgb(px)
    }))
}

/// `[1, 1, H, W]` probabilities as an 8-bit grayscale image.
pub fn prob_to_png(prob: &Tensor) -> Result<GrayImage> {
    let (_, _, h, w) = prob.dims4()?;
    let v = prob.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let p = v[y as usize * w + x as usize].clamp(0.0, 1.0);
        Luma([(p * 255.0).round() as u8])
    }))
}

fn save_png(img: impl Into<image::DynamicImage>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.into().save(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Writes `<id>_overlay.png`, `<id>_rv.png` and `<id>_faz.png` for one sample
/// from its probability maps. Returns the written paths.
pub fn write_prediction(
    out_dir: &Path,
    sample: &OctaSample,
    rv_prob: &Tensor,
    faz_prob: &Tensor,
) -> Result<[PathBuf; 3]> {
    let rv = Mask::from_prob(rv_prob)?;
    let faz = Mask::from_prob(faz_prob)?;
    let overlay = render_overlay(sample, &rv, &faz)?;
    let paths = [
        out_dir.join(format!("{}_overlay.png", sample.id)),
        out_dir.join(format!("{}_rv.png", sample.id)),
        out_dir.join(format!("{}_faz.png", sample.id)),
    ];
    save_png(overlay, &paths[0])?;
    save_png(prob_to_png(rv_prob)?, &paths[1])?;
    save_png(prob_to_png(faz_prob)?, &paths[2])?;
    Ok(paths)
}

/// Min-max normalized grayscale of a `[1, 1, H, W]` map.
fn normalized_png(t: &Tensor) -> Result<GrayImage> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let (_, _, h, w) = t.dims4()?;
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([((v[y as usize * w + x as usize] - lo) / span * 255.0).round() as u8])
    }))
}

/// Dumps the bottleneck gates of the first batch element: spatial and
/// structural maps as PNGs, channel gates and fusion weights as text.
pub fn write_gate_dump(out_dir: &Path, id: &str, gates: &VmafGates) -> Result<Vec<PathBuf>> {
    let spatial = out_dir.join(format!("{id}_gate_spatial.png"));
    let structural = out_dir.join(format!("{id}_gate_structural.png"));
    save_png(normalized_png(&gates.spatial.narrow(0, 0, 1)?)?, &spatial)?;
    save_png(normalized_png(&gates.structural.narrow(0, 0, 1)?)?, &structural)?;
    let weights = gates.weights.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let channel = gates.channel.get(0)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut text = format!(
        "fusion_weights channel={:.6} spatial={:.6} structural={:.6}\nchannel_gates",
        weights[0], weights[1], weights[2]
    );
    for c in &channel {
        let _ = write!(text, " {c:.6}");
    }
    text.push('\n');
    let txt = out_dir.join(format!("{id}_gates.txt"));
    std::fs::write(&txt, text).map_err(io_err(&txt))?;
    Ok(vec![spatial, structural, txt])
}

/// Monospace bar table of an ablation study.
pub fn ablation_bars_text(study: Study, rows: &[AblationRow]) -> String {
    let cols = study.columns();
    let mut s = String::new();
    for r in rows {
        let on: Vec<&str> = cols.iter().zip(r.flags).filter(|(_, f)| *f).map(|(c, _)| *c).collect();
        let label = if on.is_empty() { "none".to_string() } else { on.join("+") };
        let bar = |v: f64| "#".repeat((v.clamp(0.0, 1.0) * 40.0).round() as usize);
        let _ = writeln!(s, "{:>2} {label:<26} RV  {:.4} {}", r.id, r.metrics.rv_dice.0, bar(r.metrics.rv_dice.0));
        let _ = writeln!(s, "{:>2} {:<26} FAZ {:.4} {}", "", "", r.metrics.faz_dice.0, bar(r.metrics.faz_dice.0));
    }
    s
}

/// Bar chart PNG: per row, an RV-Dice (red) and a FAZ-Dice (blue) bar.
pub fn ablation_bars_png(rows: &[AblationRow]) -> RgbImage {
    const BAR: u32 = 12;
    const HEIGHT: u32 = 200;
    let width = rows.len() as u32 * (3 * BAR) + BAR;
    let mut img = RgbImage::from_pixel(width.max(1), HEIGHT, Rgb([255, 255, 255]));
    for (k, r) in rows.iter().enumerate() {
        let x0 = BAR + k as u32 * 3 * BAR;
        for (dx, v, color) in [(0, r.metrics.rv_dice.0, RV_PRED), (BAR, r.metrics.faz_dice.0, FAZ_PRED)] {
            let len = (v.clamp(0.0, 1.0) * (HEIGHT - 1) as f64).round() as u32;
            for x in x0 + dx..x0 + dx + BAR {
                for y in HEIGHT - len..HEIGHT {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
        }
    }
    img
}

pub fn write_ablation_bars(out_dir: &Path, study: Study, rows: &[AblationRow]) -> Result<[PathBuf; 2]> {
    let txt = out_dir.join(format!("ablation_{study}_bars.txt"));
    let png = out_dir.join(format!("ablation_{study}_bars.png"));
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    std::fs::write(&txt, ablation_bars_text(study, rows)).map_err(io_err(&txt))?;
    save_png(ablation_bars_png(rows), &png)?;
    Ok([txt, png])
}

#[cfg(test)]
mod tests {
    use super::*;
    use octaseg_core::dataio::Image;

    fn sample(h: usize, w: usize) -> OctaSample {
        OctaSample {
            id: "s".into(),
            image: Image::new(1, h, w, (0..h * w).map(|k| (k % 7) as f32 / 7.0).collect()),
            rv_mask: Mask::from_fn(h, w, |i, _| i == h / 2),
            faz_mask: Mask::from_fn(h, w, |i, j| (i as i64 - 3).pow(2) + (j as i64 - 3).pow(2) <= 4),
        }
    }

    #[test]
    fn boundary_of_square_is_its_ring() {
        let m = Mask::from_fn(7, 7, |i, j| (1..6).contains(&i) && (1..6).contains(&j));
        assert_eq!(boundary(&m).count(), 16);
        assert!(!boundary(&m).get(3, 3));
    }

    #[test]
    fn empty_predictions_show_base_and_contours_only() {
        let s = sample(9, 11);
        let empty = Mask::zeros(9, 11);
        let img = render_overlay(&s, &empty, &empty).unwrap();
        assert_eq!(img.dimensions(), (11, 9));
        let base = s.image.to_png();
        let rv_b = boundary(&s.rv_mask);
        let faz_b = boundary(&s.faz_mask);
        for i in 0..9 {
            for j in 0..11 {
                let px = img.get_pixel(j as u32, i as u32).0;
                let g = base.get_pixel(j as u32, i as u32)[0];
                let want = if faz_b.get(i, j) {
                    FAZ_GT
                } else if rv_b.get(i, j) {
                    RV_GT
                } else {
                    [g, g, g]
                };
                assert_eq!(px, want, "({i},{j})");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let s = sample(9, 11);
        assert!(render_overlay(&s, &Mask::zeros(9, 10), &Mask::zeros(9, 11)).is_err());
    }

    #[test]
    fn files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(16, 16);
        let p = Tensor::rand(0f32, 1.0, (1, 1, 16, 16), &candle_core::Device::Cpu).unwrap();
        let a = write_prediction(&dir.path().join("a"), &s, &p, &p).unwrap();
        let b = write_prediction(&dir.path().join("b"), &s, &p, &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        assert!(a[0].ends_with("s_overlay.png"));
    }
}
