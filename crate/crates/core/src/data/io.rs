//! Raw float arrays with a text header, and 16-bit grayscale PNG.
//!
//! Raw layout: `DDARRAY v1 dtype=f32 shape=H,W\n` followed by the values in
//! row-major order as little-endian f32.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &str = "DDARRAY v1";

pub fn write_raw(path: &Path, a: &Array2<f32>) -> Result<()> {
    write_raw_nd(path, a.shape(), a.iter().copied())
}

pub fn write_raw3(path: &Path, a: &Array3<f32>) -> Result<()> {
    write_raw_nd(path, a.shape(), a.iter().copied())
}

fn write_raw_nd(path: &Path, shape: &[usize], values: impl Iterator<Item = f32>) -> Result<()> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let mut buf = format!("{MAGIC} dtype=f32 shape={}\n", dims.join(",")).into_bytes();
    buf.reserve(4 * shape.iter().product::<usize>());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Array2<f32>> {
    read_raw_nd(path)?
        .into_dimensionality()
        .map_err(|_| Error::Data(format!("{}: expected a 2D array", path.display())))
}

pub fn read_raw3(path: &Path) -> Result<Array3<f32>> {
    read_raw_nd(path)?
        .into_dimensionality()
        .map_err(|_| Error::Data(format!("{}: expected a 3D array", path.display())))
}

fn read_raw_nd(path: &Path) -> Result<ArrayD<f32>> {
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| bad(e.to_string()))?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let rest = header.trim_end().strip_prefix(MAGIC).ok_or_else(|| bad("missing raw array header".into()))?;
    let mut dtype = None;
    let mut shape = None;
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("dtype", v)) => dtype = Some(v.to_string()),
            Some(("shape", v)) => {
                let dims: std::result::Result<Vec<usize>, _> = v.split(',').map(str::parse).collect();
                shape = Some(dims.map_err(|_| bad(format!("bad shape '{v}'")))?);
            }
            _ => return Err(bad(format!("unknown header field '{field}'"))),
        }
    }
    if dtype.as_deref() != Some("f32") {
        return Err(bad(format!("unsupported dtype {dtype:?}")));
    }
    let shape = shape.ok_or_else(|| bad("header lacks shape".into()))?;
    let n: usize = shape.iter().product();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * n {
        return Err(bad(format!("expected {} data bytes, found {}", 4 * n, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length checked"))
}

/// Writes an image in [0, 1] as 16-bit grayscale; values are clamped.
pub fn write_png16(path: &Path, a: &Array2<f32>) -> Result<()> {
    let (h, w) = a.dim();
    let px: Vec<u16> = a.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, px).expect("sized above");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png16(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("image dims"))
}
