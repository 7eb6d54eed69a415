use dentseg::metrics::*;
use dentseg::volume::{to_voxel_set, Dims, MaskVolume, VoxelSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, dims: Dims, density: f64) -> MaskVolume {
    MaskVolume::new(dims, (0..dims.len()).map(|_| rng.random_bool(density) as u8).collect()).unwrap()
}

fn random_dims(rng: &mut ChaCha8Rng, max: usize) -> Dims {
    Dims::new(rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max)).unwrap()
}

#[test]
fn overlap_matches_voxel_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let dims = random_dims(&mut rng, 8);
        let (da, db) = (rng.random::<f64>(), rng.random::<f64>());
        let (a, b) = (random_mask(&mut rng, dims, da), random_mask(&mut rng, dims, db));
        let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            both += (x & y) as usize;
            na += x as usize;
            nb += y as usize;
        }
        let union = na + nb - both;
        let (want_d, want_i) = if na + nb == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * both as f64 / (na + nb) as f64, both as f64 / union as f64)
        };
        assert_eq!(dice(&a, &b).unwrap(), want_d);
        assert_eq!(iou(&a, &b).unwrap(), want_i);
    }
}

fn l1(p: &[usize; 3], q: &[usize; 3]) -> usize {
    (0..3).map(|i| p[i].abs_diff(q[i])).sum()
}

fn random_set(rng: &mut ChaCha8Rng, dims: Dims) -> VoxelSet {
    let n = rng.random_range(1..=50);
    let coords: Vec<[usize; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0..dims.width),
                rng.random_range(0..dims.height),
                rng.random_range(0..dims.depth),
            ]
        })
        .collect();
    VoxelSet::from_coords(dims, coords).unwrap()
}

#[test]
fn distances_match_pairwise_scans() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let dims = random_dims(&mut rng, 12);
        let (a, b) = (random_set(&mut rng, dims), random_set(&mut rng, dims));
        let directed = |x: &VoxelSet, y: &VoxelSet| {
            x.coords()
                .iter()
                .map(|p| y.coords().iter().map(|q| l1(p, q)).min().unwrap())
                .max()
                .unwrap()
        };
        let hd = directed(&a, &b).max(directed(&b, &a));
        let sep = a
            .coords()
            .iter()
            .flat_map(|p| b.coords().iter().map(move |q| l1(p, q)))
            .min()
            .unwrap();
        assert_eq!(hausdorff_l1(&a, &b).unwrap(), hd);
        assert_eq!(min_l1_separation(&a, &b).unwrap(), sep);
    }
}

#[test]
fn metric_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let dims = random_dims(&mut rng, 7);
        let (a, b) = (random_mask(&mut rng, dims, 0.3), random_mask(&mut rng, dims, 0.3));
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let (d, i) = (dice(&a, &b).unwrap(), iou(&a, &b).unwrap());
        assert!(i <= d + 1e-15 && (0.0..=1.0).contains(&d));
        if a.count() > 0 && b.count() > 0 {
            let (sa, sb) = (to_voxel_set(&a), to_voxel_set(&b));
            assert_eq!(hausdorff_l1(&sa, &sb).unwrap(), hausdorff_l1(&sb, &sa).unwrap());
            assert_eq!(hausdorff_l1(&sa, &sa).unwrap(), 0);
            let r = evaluate(&a, &b, DistanceKind::Hausdorff).unwrap();
            assert!((0.0..=1.0).contains(&r.hd_norm) && (0.0..=1.0).contains(&r.score));
        }
    }
}

#[test]
fn published_rows_reproduce() {
    for (d, i, h, s) in [
        (0.8442, 0.8661, 0.1595, 0.8497),
        (0.8343, 0.8583, 0.1615, 0.8427),
        (0.8058, 0.8376, 0.1599, 0.8256),
        (0.8070, 0.8386, 0.1689, 0.8237),
        (0.7932, 0.8290, 0.1708, 0.8147),
    ] {
        let got = challenge_score(d, i, h).unwrap();
        assert!((got - s).abs() < 5e-4, "{got} vs {s}");
    }
}
