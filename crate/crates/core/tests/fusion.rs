use dualdiff::data::Orientation;
use dualdiff::fusion::{fuse_volumes, haar3, haar_depth, ihaar3, stack_orientation, unstack, OrientedVolume};
use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn volume(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.random::<f64>())
}

fn oriented(data: Array3<f64>, o: Orientation) -> OrientedVolume {
    OrientedVolume { data, orientation: o, subject_id: "sub0000".into() }
}

fn max_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn native_slices_restack_to_one_canonical_volume() {
    let v = volume(1, (6, 7, 5));
    let stacks: Vec<OrientedVolume> = Orientation::ALL
        .iter()
        .map(|&o| {
            let slices: Vec<Array2<f64>> = v.axis_iter(Axis(o.axis())).map(|s| s.to_owned()).collect();
            let s = stack_orientation(&slices, o, "sub0000").unwrap();
            assert_eq!(unstack(&s), slices);
            s
        })
        .collect();
    for s in &stacks {
        assert_eq!(s.data, v);
    }
    assert!(max_diff(&fuse_volumes(&stacks).unwrap(), &v) < 1e-6);
    let one = stack_orientation(&[Array2::zeros((4, 4))], Orientation::Axial, "s").unwrap();
    assert_eq!(one.data.dim(), (1, 4, 4));
    assert!(stack_orientation(&[Array2::zeros((4, 4)), Array2::zeros((4, 5))], Orientation::Axial, "s").is_err());
}

#[test]
fn depth_rule() {
    assert_eq!(haar_depth((32, 32, 32)), 4);
    assert_eq!(haar_depth((8, 16, 64)), 2);
    assert_eq!(haar_depth((2, 2, 2)), 0);
}

fn shapes() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..12, 1usize..12, 1usize..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn haar_round_trip_on_dyadic_shapes(seed in any::<u64>(), e in (1u32..5, 1u32..5, 1u32..5)) {
        let shape = (1usize << e.0, 1usize << e.1, 1usize << e.2);
        let v = volume(seed, shape);
        let depth = haar_depth(shape);
        let c = haar3(&v, depth).unwrap();
        let energy = |a: &Array3<f64>| a.iter().map(|x| x * x).sum::<f64>();
        prop_assert!((energy(&c) - energy(&v)).abs() < 1e-9 * energy(&v).max(1.0));
        prop_assert!(max_diff(&ihaar3(&c, depth).unwrap(), &v) < 1e-9);
    }

    #[test]
    fn fusion_is_the_mean_and_order_free(seed in any::<u64>(), shape in shapes()) {
        let (a, b, c) = (volume(seed, shape), volume(seed ^ 1, shape), volume(seed ^ 2, shape));
        let mean = (&a + &b + &c) / 3.0;
        let vols = [
            oriented(a.clone(), Orientation::Axial),
            oriented(b.clone(), Orientation::Coronal),
            oriented(c.clone(), Orientation::Sagittal),
        ];
        let fused = fuse_volumes(&vols).unwrap();
        prop_assert!(max_diff(&fused, &mean) < 1e-6);
        prop_assert!(fused.iter().all(|v| (0.0..=1.0).contains(v)));
        let swapped = [vols[2].clone(), vols[0].clone(), vols[1].clone()];
        prop_assert!(max_diff(&fuse_volumes(&swapped).unwrap(), &fused) < 1e-12);
        prop_assert!(max_diff(&fuse_volumes(&vols[..1]).unwrap(), &a) < 1e-6);
        let same = vec![vols[0].clone(); 3];
        prop_assert!(max_diff(&fuse_volumes(&same).unwrap(), &a) < 1e-6);
    }

    #[test]
    fn mismatched_shapes_rejected(shape in shapes()) {
        let a = oriented(volume(0, shape), Orientation::Axial);
        let b = oriented(volume(1, (shape.0 + 1, shape.1, shape.2)), Orientation::Coronal);
        prop_assert!(fuse_volumes(&[a.clone(), b, a]).is_err());
    }
}
