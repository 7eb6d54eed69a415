use dentseg::preprocess::*;
use dentseg::synth::*;
use dentseg::volume::*;
use proptest::prelude::*;

fn dims_strategy(max: usize) -> impl Strategy<Value = Dims> {
    (1..=max, 1..=max, 1..=max).prop_map(|(d, h, w)| Dims::new(d, h, w).unwrap())
}

proptest! {
    #[test]
    fn volume_codec_round_trips(dims in dims_strategy(6), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..dims.len()).map(|_| rng.random_range(-3000.0..3000.0)).collect();
        let v = Volume::new(dims, data, ValueUnit::Raw).unwrap();
        prop_assert_eq!(decode_volume(&encode_volume(&v), ValueUnit::Raw).unwrap(), v);
        let m = MaskVolume::new(dims, (0..dims.len()).map(|_| rng.random_bool(0.4) as u8).collect()).unwrap();
        let bytes = encode_mask(&m);
        prop_assert_eq!(bytes.len(), 17 + dims.len());
        prop_assert_eq!(decode_mask(&bytes).unwrap(), m.clone());
        prop_assert_eq!(to_voxel_set(&m).len(), m.data().iter().filter(|&&v| v == 1).count());
        prop_assert_eq!(to_voxel_set(&m).to_mask(), m);
    }

    #[test]
    fn slice_count_is_sum_of_extents(dims in dims_strategy(12)) {
        let v = Volume::filled(dims, 0.5, ValueUnit::Normalized).unwrap();
        let slices = slice_volume(&v, "s");
        prop_assert_eq!(slices.len(), dims.depth + dims.height + dims.width);
        prop_assert_eq!(SliceManifest::for_volume("s", dims).len(), slices.len());
        let z: Vec<Slice2D> = slices.into_iter().filter(|s| s.axis == Axis::Z).collect();
        prop_assert_eq!(stack_z_slices(&z).unwrap(), v);
    }
}

#[test]
fn large_scan_slice_count() {
    let dims = Dims::new(400, 640, 640).unwrap();
    let n: usize = Axis::ALL.iter().map(|a| a.extent(dims)).sum();
    assert_eq!(n, 1680);
    let manifest = SliceManifest::for_volume("cbct", dims);
    assert_eq!(manifest.len(), 1680);
    let split = split_train_val(&manifest, DEFAULT_VAL_FRACTION, 1).unwrap();
    assert_eq!((split.count(Split::Train), split.count(Split::Val)), (1512, 168));
}

#[test]
fn slices_hold_the_right_voxels() {
    let dims = Dims::new(3, 4, 5).unwrap();
    let v = Volume::new(dims, (0..dims.len()).map(|i| i as f32).collect(), ValueUnit::Raw).unwrap();
    for s in slice_volume(&v, "v") {
        for r in 0..s.height {
            for c in 0..s.width {
                let (x, y, z) = s.axis.voxel(s.index, r, c);
                assert_eq!(s.data[r * s.width + c], v.get(x, y, z));
            }
        }
        let (id, index, axis) = parse_slice_file_name(&s.file_name()).unwrap();
        assert_eq!((id.as_str(), index, axis), ("v", s.index, s.axis));
    }
}

#[test]
fn windowing_clamps_and_rescales() {
    let dims = Dims::new(1, 1, 5).unwrap();
    let v = Volume::new(dims, vec![0.0, 500.0, 1250.0, 2000.0, 3000.0], ValueUnit::Raw).unwrap();
    let n = window_normalize(&v, WindowSpec::default()).unwrap();
    assert_eq!(n.data(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
    assert_eq!(n.unit(), ValueUnit::Normalized);
    assert!(window_normalize(&n, WindowSpec::default()).is_err());
    assert!(WindowSpec::new(2000.0, 500.0).is_err());
}

#[test]
fn manifest_round_trips_through_csv() {
    let m = split_train_val(&SliceManifest::for_volume("a", Dims::new(2, 3, 4).unwrap()), 0.25, 3).unwrap();
    assert_eq!(SliceManifest::from_csv(&m.to_csv()).unwrap(), m);
    assert_eq!(m, split_train_val(&SliceManifest::for_volume("a", Dims::new(2, 3, 4).unwrap()), 0.25, 3).unwrap());
}

fn noiseless(count: usize, seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: Dims::new(20, 24, 24).unwrap(),
        count,
        radius_min: [2.0, 2.0, 2.0],
        radius_max: [4.0, 4.0, 4.0],
        foreground: Intensity { mean: 1500.0, std: 0.0 },
        background: Intensity { mean: 400.0, std: 0.0 },
        seed,
    }
}

#[test]
fn noiseless_phantoms_separate_exactly() {
    for seed in 0..10 {
        let spec = noiseless(4, seed);
        let (v, m, shapes) = gen_phantom_with_layout(&spec).unwrap();
        assert_eq!(shapes.len(), 4);
        for (i, (&x, &l)) in v.data().iter().zip(m.data()).enumerate() {
            let [cx, cy, cz] = v.dims().coords(i);
            let inside = shapes.iter().any(|e| e.contains(cx, cy, cz));
            assert_eq!(l == 1, inside);
            assert_eq!(x, if inside { 1500.0 } else { 400.0 });
        }
        assert_eq!(gen_phantom(&spec).unwrap(), (v, m));
    }
}

#[test]
fn impossible_packing_is_a_placement_error() {
    let mut spec = noiseless(200, 1);
    spec.radius_min = [4.0; 3];
    assert!(matches!(gen_phantom(&spec), Err(dentseg::Error::Placement { .. })));
}

#[test]
fn shift_identity_linearity_and_mask_invariance() {
    let mut spec = noiseless(3, 2);
    spec.background.std = 50.0;
    let (v, _) = gen_phantom(&spec).unwrap();
    assert_eq!(apply_domain_shift(&v, &ShiftSpec::IDENTITY).unwrap(), v);
    let doubled = apply_domain_shift(&v, &ShiftSpec { gain: 2.0, ..ShiftSpec::IDENTITY }).unwrap();
    assert_eq!(doubled.mean(), 2.0 * v.mean());

    let bench = BenchmarkSpec {
        labeled: 1,
        unlabeled: 1,
        val: 1,
        ..BenchmarkSpec::default()
    };
    let unshifted = BenchmarkSpec {
        target_shift: ShiftSpec::IDENTITY,
        ..bench.clone()
    };
    let (a, b) = (bench.generate().unwrap(), unshifted.generate().unwrap());
    assert_eq!(a.val[0].mask, b.val[0].mask);
    assert_ne!(a.val[0].volume, b.val[0].volume);
    assert_eq!(a, bench.generate().unwrap());
}

#[test]
fn bias_field_is_smooth_and_bounded() {
    for seed in 0..20 {
        let dims = Dims::new(32, 32, 32).unwrap();
        let amp = 250.0;
        let f = bias_field(dims, amp, seed);
        let mut worst = 0.0f64;
        for z in 0..dims.depth {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let here = f[dims.index(x, y, z)];
                    assert!(here.abs() <= amp + 1e-9);
                    for (dx, dy, dz) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                        let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                        if nx < dims.width && ny < dims.height && nz < dims.depth {
                            worst = worst.max((f[dims.index(nx, ny, nz)] - here).abs());
                        }
                    }
                }
            }
        }
        assert!(worst < 0.1 * amp, "seed {seed}: step {worst}");
    }
}
