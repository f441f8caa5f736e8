use std::path::Path;

use approx::assert_relative_eq;
use proptest::prelude::*;
use scenekit_core::backend::{rgba_pack, rgba_unpack};
use scenekit_core::dataprep::{augment_mask, augmentation_plan, AugmentConfig, MorphOp};
use scenekit_core::io::{decode_png_image, encode_png_image};
use scenekit_core::metrics::{chamfer, fscore, nearest_distance_brute_force};
use scenekit_core::morphology::{dilate, erode};
use scenekit_core::{ImageBuffer, InstanceMask, PointCloud, Vec3};

fn cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64), 1..max)
        .prop_map(|v| PointCloud::from_points(v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect()).unwrap())
}

fn mask() -> impl Strategy<Value = InstanceMask> {
    (3usize..20, 3usize..20)
        .prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(prop::bool::weighted(0.3), w * h)))
        .prop_map(|(w, h, bits)| InstanceMask::new(1, w, h, bits).unwrap())
}

fn disk_pixels(m: &InstanceMask, x: usize, y: usize, r: u32) -> impl Iterator<Item = (usize, usize)> + '_ {
    let r = r as i64;
    let (w, h) = (m.width() as i64, m.height() as i64);
    (-r..=r)
        .flat_map(move |dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(move |(dx, dy)| dx * dx + dy * dy <= r * r)
        .map(move |(dx, dy)| (x as i64 + dx, y as i64 + dy))
        .filter(move |(u, v)| (0..w).contains(u) && (0..h).contains(v))
        .map(|(u, v)| (u as usize, v as usize))
}

fn subset(a: &InstanceMask, b: &InstanceMask) -> bool {
    a.bits().iter().zip(b.bits()).all(|(x, y)| !x || *y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_matches_brute_force_and_is_symmetric(a in cloud(60), b in cloud(60)) {
        let brute = |p: &PointCloud, q: &PointCloud| {
            p.points().iter().map(|x| nearest_distance_brute_force(x, q)).sum::<f64>() / p.len() as f64
        };
        let ab = chamfer(&a, &b).unwrap();
        assert_relative_eq!(ab, brute(&a, &b) + brute(&b, &a), max_relative = 1e-12);
        assert_relative_eq!(ab, chamfer(&b, &a).unwrap(), max_relative = 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn fscore_is_bounded_and_grows_with_tau(a in cloud(40), b in cloud(40), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let (f_lo, f_hi) = (fscore(&a, &b, lo).unwrap(), fscore(&a, &b, hi).unwrap());
        for f in [f_lo, f_hi] {
            prop_assert!((0.0..=1.0).contains(&f.precision) && (0.0..=1.0).contains(&f.recall) && (0.0..=1.0).contains(&f.fscore));
        }
        prop_assert!(f_lo.precision <= f_hi.precision && f_lo.recall <= f_hi.recall && f_lo.fscore <= f_hi.fscore);
    }

    #[test]
    fn morphology_matches_disk_oracle(m in mask(), r in 0u32..4) {
        let d = dilate(&m, r);
        let e = erode(&m, r);
        for y in 0..m.height() {
            for x in 0..m.width() {
                let near = disk_pixels(&m, x, y, r).any(|(u, v)| m.contains(u, v));
                let interior = m.contains(x, y) && disk_pixels(&m, x, y, r).all(|(u, v)| m.contains(u, v));
                prop_assert_eq!(d.contains(x, y), near, "dilate at {},{}", x, y);
                prop_assert_eq!(e.contains(x, y), interior, "erode at {},{}", x, y);
            }
        }
        prop_assert!(subset(&e, &m) && subset(&m, &d));
        prop_assert!(subset(&d, &dilate(&m, r + 1)));
        prop_assert!(subset(&erode(&m, r + 1), &e));
    }

    #[test]
    fn augmentation_follows_its_plan(m in mask(), seed in any::<u64>(), max_radius in 1u32..5) {
        let cfg = AugmentConfig { max_radius };
        let out = augment_mask(&m, seed, &cfg).unwrap();
        prop_assert_eq!(&out, &augment_mask(&m, seed, &cfg).unwrap());
        let (op, r) = augmentation_plan(seed, &cfg).unwrap();
        prop_assert!((1..=max_radius).contains(&r));
        match op {
            MorphOp::Dilate => prop_assert_eq!(out, dilate(&m, r)),
            MorphOp::Erode => {
                let e = erode(&m, r);
                prop_assert_eq!(out, if e.is_empty() { m.clone() } else { e });
            }
        }
    }

    #[test]
    fn rgba_and_png_round_trip(m in mask(), seed in any::<u64>()) {
        let (w, h) = (m.width(), m.height());
        let data: Vec<f64> = (0..w * h * 3).map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 7) % 256) as f64 / 255.0).collect();
        let img = ImageBuffer::new(w, h, 3, data).unwrap();
        let packed = rgba_pack(&img, &m).unwrap();
        let decoded = decode_png_image(&encode_png_image(&packed).unwrap(), Path::new("mem.png")).unwrap();
        let (rgb, back) = rgba_unpack(&decoded).unwrap();
        prop_assert_eq!(back.bits(), m.bits());
        for (x, y) in rgb.data().iter().zip(img.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
