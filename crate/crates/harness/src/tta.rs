//! Flip test-time augmentation.

use candle_core::Tensor;

use octaseg_core::networks::{JointModel, Mode};
use octaseg_core::tensor::{hflip, vflip};

use crate::error::Result;

type Flip = fn(&Tensor) -> octaseg_core::Result<Tensor>;

fn identity(x: &Tensor) -> octaseg_core::Result<Tensor> {
    Ok(x.clone())
}

/// The transforms averaged over. Each flip is its own inverse.
pub const TRANSFORMS: [Flip; 3] = [identity, hflip, vflip];

/// Mean of `predict` over the flipped inputs, each output mapped back.
/// `predict` returns any number of probability maps per input.
pub fn tta_average<const K: usize>(
    image: &Tensor,
    mut predict: impl FnMut(&Tensor) -> Result<[Tensor; K]>,
) -> Result<[Tensor; K]> {
    let mut sums: Option<[Tensor; K]> = None;
    for t in TRANSFORMS {
        let maps = predict(&t(image)?)?;
        let back: Vec<Tensor> = maps.iter().map(t).collect::<octaseg_core::Result<_>>()?;
        sums = Some(match sums {
            None => back.try_into().expect("K maps"),
            Some(acc) => {
                let summed: Vec<Tensor> = acc
                    .iter()
                    .zip(&back)
                    .map(|(a, b)| a + b)
                    .collect::<candle_core::Result<_>>()?;
                summed.try_into().expect("K maps")
            }
        });
    }
    let n = TRANSFORMS.len() as f64;
    let avg: Vec<Tensor> = sums
        .expect("at least one transform")
        .iter()
        .map(|s| s.affine(1.0 / n, 0.0))
        .collect::<candle_core::Result<_>>()?;
    Ok(avg.try_into().expect("K maps"))
}

/// TTA probabilities of the joint model: `[rv, faz_full]`.
pub fn tta_predict(model: &JointModel, image: &Tensor) -> Result<[Tensor; 2]> {
    tta_average(image, |x| {
        let out = model.forward(x, &mut Mode::Eval)?;
        Ok([out.rv.prob, out.faz_full])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, DType};

    fn ramp() -> Tensor {
        Tensor::arange(0f32, 20.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 5))
            .unwrap()
    }

    #[test]
    fn constant_model_gives_constant() {
        let x = ramp();
        let [p] = tta_average(&x, |x| Ok([x.ones_like()?.affine(0.3, 0.0)?])).unwrap();
        for v in p.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 0.3).abs() < 1e-7);
        }
    }

    #[test]
    fn equivariant_model_is_unchanged() {
        let x = ramp();
        let f = |x: &Tensor| -> Result<[Tensor; 1]> { Ok([(x * 2.0)?.tanh()?]) };
        let [plain] = f(&x).unwrap();
        let [avg] = tta_average(&x, f).unwrap();
        let d = (plain - avg).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() < 1e-6);
    }

    #[test]
    fn hflip_of_input_flips_output() {
        let x = ramp().to_dtype(DType::F64).unwrap();
        // Varies by row only: commutes with hflip, not with vflip.
        let weight = Tensor::arange(1f64, 5.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 1))
            .unwrap()
            .broadcast_as((1, 1, 4, 5))
            .unwrap()
            .contiguous()
            .unwrap();
        let f = |x: &Tensor| -> Result<[Tensor; 1]> { Ok([(x * &weight)?.sin()?]) };
        let [a] = tta_average(&x, f).unwrap();
        let [b] = tta_average(&hflip(&x).unwrap(), f).unwrap();
        let d = (hflip(&a).unwrap() - b).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }
}
