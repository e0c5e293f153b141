//! Small conversions between candle tensors and ndarray images.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn all_finite(x: &Tensor) -> Result<bool> {
    let v: Vec<f64> = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

pub fn max_abs(x: &Tensor) -> Result<f64> {
    let v: Vec<f64> = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(v.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Standard normal draws from a seeded generator, materialised as a tensor.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Stacks 2D images into a `(B, 1, H, W)` tensor.
pub fn images_to_tensor(images: &[&Array2<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::shape(format!("image {:?} in batch of {:?}", img.dim(), (h, w))));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Splits a `(B, 1, H, W)` tensor back into images.
pub fn tensor_to_images(x: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("expected one channel, got {c}")));
    }
    let flat: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec()).unwrap())
        .collect())
}

pub fn array2_to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

pub fn array3_to_f32(a: &Array3<f64>) -> Array3<f32> {
    a.mapv(|x| x as f32)
}
