//! Reassembling per-orientation slice predictions into volumes and fusing
//! the orientations in a 3D Haar wavelet domain.

use ndarray::{Array2, Array3, ArrayViewMut1, Axis};

use crate::data::Orientation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OrientedVolume {
    /// Canonical `(D, H, W)` axis order regardless of orientation.
    pub data: Array3<f64>,
    pub orientation: Orientation,
    pub subject_id: String,
}

/// Stacks slices along the orientation's axis of the canonical volume.
pub fn stack_orientation(slices: &[Array2<f64>], orientation: Orientation, subject_id: &str) -> Result<OrientedVolume> {
    let first = slices.first().ok_or_else(|| Error::invalid("no slices to stack"))?;
    if let Some(bad) = slices.iter().position(|s| s.dim() != first.dim()) {
        return Err(Error::shape(format!("slice {bad} has shape {:?}, expected {:?}", slices[bad].dim(), first.dim())));
    }
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    let data = ndarray::stack(Axis(orientation.axis()), &views).expect("shapes checked");
    Ok(OrientedVolume { data, orientation, subject_id: subject_id.to_string() })
}

pub fn unstack(vol: &OrientedVolume) -> Vec<Array2<f64>> {
    vol.data.axis_iter(Axis(vol.orientation.axis())).map(|s| s.to_owned()).collect()
}

fn haar_forward_1d(mut v: ArrayViewMut1<f64>, n: usize) {
    let h = n / 2;
    let src: Vec<f64> = v.iter().take(n).cloned().collect();
    for i in 0..h {
        let (a, b) = (src[2 * i], src[2 * i + 1]);
        v[i] = (a + b) * std::f64::consts::FRAC_1_SQRT_2;
        v[h + i] = (a - b) * std::f64::consts::FRAC_1_SQRT_2;
    }
}

fn haar_inverse_1d(mut v: ArrayViewMut1<f64>, n: usize) {
    let h = n / 2;
    let src: Vec<f64> = v.iter().take(n).cloned().collect();
    for i in 0..h {
        let (s, d) = (src[i], src[h + i]);
        v[2 * i] = (s + d) * std::f64::consts::FRAC_1_SQRT_2;
        v[2 * i + 1] = (s - d) * std::f64::consts::FRAC_1_SQRT_2;
    }
}

/// Decomposition depth used for a (padded) shape.
pub fn haar_depth(shape: (usize, usize, usize)) -> usize {
    let m = shape.0.min(shape.1).min(shape.2);
    (m.max(1).ilog2() as usize).saturating_sub(1)
}

fn apply_levels(x: &mut Array3<f64>, depth: usize, inverse: bool) {
    let dims = x.dim();
    let levels: Vec<usize> = if inverse { (0..depth).rev().collect() } else { (0..depth).collect() };
    for l in levels {
        let sub = [dims.0 >> l, dims.1 >> l, dims.2 >> l];
        let mut block = x.slice_mut(ndarray::s![..sub[0], ..sub[1], ..sub[2]]);
        for ax in 0..3 {
            for lane in block.lanes_mut(Axis(ax)) {
                if inverse {
                    haar_inverse_1d(lane, sub[ax]);
                } else {
                    haar_forward_1d(lane, sub[ax]);
                }
            }
        }
    }
}

/// Multilevel orthonormal 3D Haar transform. Every dimension must be
/// divisible by `2^depth`.
pub fn haar3(x: &Array3<f64>, depth: usize) -> Result<Array3<f64>> {
    check_dyadic(x.dim(), depth)?;
    let mut y = x.clone();
    apply_levels(&mut y, depth, false);
    Ok(y)
}

pub fn ihaar3(c: &Array3<f64>, depth: usize) -> Result<Array3<f64>> {
    check_dyadic(c.dim(), depth)?;
    let mut y = c.clone();
    apply_levels(&mut y, depth, true);
    Ok(y)
}

fn check_dyadic(dims: (usize, usize, usize), depth: usize) -> Result<()> {
    let m = 1usize << depth;
    if dims.0 % m != 0 || dims.1 % m != 0 || dims.2 % m != 0 {
        return Err(Error::shape(format!("shape {dims:?} not divisible by 2^{depth}")));
    }
    Ok(())
}

/// Half-sample symmetric index into `0..n`.
fn mirror(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let r = i % period;
    if r < n {
        r
    } else {
        period - 1 - r
    }
}

fn pad_symmetric(x: &Array3<f64>, to: (usize, usize, usize)) -> Array3<f64> {
    let (d, h, w) = x.dim();
    Array3::from_shape_fn(to, |(i, j, k)| x[(mirror(i, d), mirror(j, h), mirror(k, w))])
}

/// Averages the volumes' Haar coefficients and inverts, clipping to [0, 1].
/// Non-power-of-two shapes are symmetrically padded and cropped back.
pub fn fuse_volumes(vols: &[OrientedVolume]) -> Result<Array3<f64>> {
    let first = vols.first().ok_or_else(|| Error::invalid("no volumes to fuse"))?;
    let shape = first.data.dim();
    if let Some(v) = vols.iter().find(|v| v.data.dim() != shape) {
        return Err(Error::shape(format!("{} volume {:?} vs {:?}", v.orientation, v.data.dim(), shape)));
    }
    let padded = (shape.0.next_power_of_two(), shape.1.next_power_of_two(), shape.2.next_power_of_two());
    let depth = haar_depth(padded);
    let mut acc = Array3::<f64>::zeros(padded);
    for v in vols {
        acc += &haar3(&pad_symmetric(&v.data, padded), depth)?;
    }
    acc /= vols.len() as f64;
    let out = ihaar3(&acc, depth)?;
    Ok(out.slice(ndarray::s![..shape.0, ..shape.1, ..shape.2]).mapv(|v| v.clamp(0.0, 1.0)))
}
