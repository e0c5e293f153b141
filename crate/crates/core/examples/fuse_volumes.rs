//! Rebuilds a volume from axial, coronal and sagittal slice stacks and fuses
//! them in the 3D Haar domain.

use dualdiff::data::phantom::generate_phantom;
use dualdiff::data::Orientation;
use dualdiff::fusion::{fuse_volumes, stack_orientation};
use dualdiff::metrics::psnr;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dualdiff::Result<()> {
    let truth = generate_phantom(4, (32, 32, 32))?.sd_pet;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut vols = Vec::new();
    for o in Orientation::ALL {
        // Stand-in for per-orientation predictions: truth plus independent noise.
        let slices: Vec<Array2<f64>> = truth
            .axis_iter(Axis(o.axis()))
            .map(|s| s.mapv(|v| (v + 0.1 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)))
            .collect();
        let vol = stack_orientation(&slices, o, "sub0004")?;
        let mid = vol.data.index_axis(Axis(0), 16).to_owned();
        println!("{:<9} mid-slice PSNR {:.2} dB", o.to_string(), psnr(&mid, &truth.index_axis(Axis(0), 16).to_owned())?);
        vols.push(vol);
    }
    let fused = fuse_volumes(&vols)?;
    let mid = fused.index_axis(Axis(0), 16).to_owned();
    println!("fused     mid-slice PSNR {:.2} dB", psnr(&mid, &truth.index_axis(Axis(0), 16).to_owned())?);
    Ok(())
}
