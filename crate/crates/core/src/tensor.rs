//! The rank-4 feature map passed between blocks, and tensor helpers that
//! candle does not provide directly.

use candle_core::{DType, Tensor, D};

use crate::error::{BlockError, Result};

/// A `(batch, channels, height, width)` tensor with every dimension at least 1.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        if dims.len() != 4 || dims.iter().any(|&d| d == 0) {
            return Err(BlockError::NotRank4(dims).into());
        }
        Ok(Self(t))
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("rank checked at construction")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn is_finite(&self) -> Result<bool> {
        all_finite(&self.0)
    }
}

impl AsRef<Tensor> for FeatureMap {
    fn as_ref(&self) -> &Tensor {
        &self.0
    }
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

pub fn expect_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(BlockError::ShapeMismatch(a.dims().to_vec(), b.dims().to_vec()).into());
    }
    Ok(())
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// log(1 + e^x), stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Mean over the spatial axes, keeping them as size 1.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(3)?.mean_keepdim(2)?)
}

pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_keepdim(3)?.max_keepdim(2)?)
}

/// 3x3 max pooling, stride 1, output the same size as the input.
pub fn max_pool3_same(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    // Replicated borders only repeat values already inside each window.
    let xp = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let tap = xp.narrow(2, dy, h)?.narrow(3, dx, w)?;
            acc = Some(match acc {
                None => tap.contiguous()?,
                Some(a) => a.maximum(&tap)?,
            });
        }
    }
    Ok(acc.expect("nine taps"))
}

/// 3x3 average pooling, stride 1, zero padding counted in the denominator.
pub fn avg_pool3_same(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let tap = xp.narrow(2, dy, h)?.narrow(3, dx, w)?;
            acc = Some(match acc {
                None => tap.contiguous()?,
                Some(a) => (a + tap)?,
            });
        }
    }
    Ok((acc.expect("nine taps") / 9.0)?)
}

/// Bilinear 2x upsampling with half-pixel centres and clamped borders.
pub fn upsample2x_bilinear(x: &Tensor) -> Result<Tensor> {
    let x = upsample2x_axis(x, 2)?;
    upsample2x_axis(&x, 3)
}

fn upsample2x_axis(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let xp = x.pad_with_same(dim, 1, 1)?;
    let prev = xp.narrow(dim, 0, n)?;
    let cur = xp.narrow(dim, 1, n)?;
    let next = xp.narrow(dim, 2, n)?;
    let even = ((prev * 0.25)? + (&cur * 0.75)?)?;
    let odd = ((cur * 0.75)? + (next * 0.25)?)?;
    let stacked = Tensor::stack(&[even, odd], dim + 1)?;
    let mut dims = x.dims().to_vec();
    dims[dim] *= 2;
    Ok(stacked.reshape(dims)?)
}

/// Rotates the spatial plane 90 degrees counter-clockwise.
pub fn rot90(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.flip(&[3])?.transpose(2, 3)?.contiguous()?)
}

/// Inverse of [`rot90`].
pub fn rot90_inv(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(2, 3)?.contiguous()?.flip(&[3])?)
}

pub fn hflip(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.flip(&[3])?)
}

pub fn vflip(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.flip(&[2])?)
}

/// Centre crop of the spatial plane to `size x size`. Offsets floor towards
/// the top-left when the margin is odd.
pub fn center_crop(x: &Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let top = (h - size) / 2;
    let left = (w - size) / 2;
    Ok(x.narrow(2, top, size)?.narrow(3, left, size)?)
}

/// Places `x` (`size x size`) on a zero canvas of `h x w` at the window
/// [`center_crop`] would extract.
pub fn paste_center(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, s, _) = x.dims4()?;
    let top = (h - s) / 2;
    let left = (w - s) / 2;
    Ok(x
        .pad_with_zeros(2, top, h - s - top)?
        .pad_with_zeros(3, left, w - s - left)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn grid(h: usize, w: usize) -> Tensor {
        Tensor::arange(0f64, (h * w) as f64, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, h, w))
            .unwrap()
    }

    #[test]
    fn feature_map_rejects_bad_rank() {
        let t = Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(FeatureMap::new(t).is_err());
        let t = Tensor::zeros((1, 0, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(FeatureMap::new(t).is_err());
    }

    #[test]
    fn rot90_round_trip_and_direction() {
        let x = grid(2, 3);
        let r = rot90(&x).unwrap();
        // CCW: the last column becomes the first row.
        assert_eq!(
            r.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap(),
            vec![vec![2.0, 5.0], vec![1.0, 4.0], vec![0.0, 3.0]]
        );
        let back = rot90_inv(&r).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn bilinear_upsample_matches_half_pixel_formula() {
        let x = Tensor::new(&[[[[0f64, 4.0]]]], &Device::Cpu).unwrap();
        let up = upsample2x_bilinear(&x).unwrap();
        assert_eq!(up.dims(), &[1, 1, 2, 4]);
        let row = up.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(&row[..4], &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(&row[4..], &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn pools_keep_shape_and_values() {
        let x = grid(3, 3);
        let m = max_pool3_same(&x).unwrap();
        assert_eq!(
            m.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![4.0, 5.0, 5.0, 7.0, 8.0, 8.0, 7.0, 8.0, 8.0]
        );
        let a = avg_pool3_same(&x).unwrap();
        let v = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((v[4] - 4.0).abs() < 1e-12);
        assert!((v[0] - (0.0 + 1.0 + 3.0 + 4.0) / 9.0).abs() < 1e-12);
    }

    #[test]
    fn crop_then_paste_zeroes_border() {
        let x = grid(6, 6);
        let c = center_crop(&x, 2).unwrap();
        assert_eq!(c.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![14.0, 15.0, 20.0, 21.0]);
        let p = paste_center(&c, 6, 6).unwrap();
        let v = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 4);
        assert_eq!(v[14], 14.0);
        assert_eq!(v[21], 21.0);
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-800f64, 0.0, 800.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[2], 800.0);
    }
}
