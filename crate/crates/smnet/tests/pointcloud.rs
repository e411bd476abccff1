//! Preprocessing and sampling oracles: exhaustive scans, brute-force FPS,
//! lattice shell counts, and round-trip checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smnet::pointcloud::{
    ball_query_group, center_and_normalize, dist2, farthest_point_sample,
    random_downsample, read_cloud, read_pcd1, read_ply, read_xyz,
    remove_interior_points, voxel_average_downsample, write_pcd1, write_xyz,
    NeighborhoodIndex, Point3, PointCloud,
};

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts: Vec<Point3> = (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    PointCloud::new(pts).unwrap()
}

// ---------------------------------------------------------------------------
// construction invariants
// ---------------------------------------------------------------------------

#[test]
fn nan_coordinates_rejected() {
    assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
}

#[test]
fn reference_length_mismatch_rejected() {
    let r = PointCloud::with_reference(vec![[0.0; 3], [1.0; 3]], Some(vec![[0.0; 3]]));
    assert!(r.is_err());
}

// ---------------------------------------------------------------------------
// remove_interior_points
// ---------------------------------------------------------------------------

#[test]
fn sphere_surface_fully_retained() {
    let mut pts = Vec::new();
    let n = 24;
    for i in 0..n {
        for j in 1..n {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let phi = std::f64::consts::PI * j as f64 / n as f64;
            pts.push([phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos()]);
        }
    }
    let cloud = PointCloud::new(pts).unwrap();
    let out = remove_interior_points(&cloud, 0.05).unwrap();
    assert_eq!(out.len(), cloud.len());
}

#[test]
fn solid_lattice_sheds_exactly_its_interior() {
    let mut pts = Vec::new();
    for x in 0..5 {
        for y in 0..5 {
            for z in 0..5 {
                pts.push([x as f64, y as f64, z as f64]);
            }
        }
    }
    let cloud = PointCloud::new(pts).unwrap();
    let out = remove_interior_points(&cloud, 1.0).unwrap();
    assert_eq!(out.len(), 98); // 125 − 27 strictly-interior

    // exhaustive shell oracle: a lattice point survives iff any coordinate
    // is 0 or 4
    let expected: usize = (0..125)
        .filter(|i| {
            let (x, y, z) = (i / 25, (i / 5) % 5, i % 5);
            [x, y, z].iter().any(|&c| c == 0 || c == 4)
        })
        .count();
    assert_eq!(out.len(), expected);
}

#[test]
fn single_point_is_retained() {
    let cloud = PointCloud::new(vec![[0.3, 0.4, 0.5]]).unwrap();
    let out = remove_interior_points(&cloud, 1.0).unwrap();
    assert_eq!(out.len(), 1);
}

#[test]
fn interior_output_is_subset_of_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cloud = random_cloud(&mut rng, 300);
    let out = remove_interior_points(&cloud, 0.25).unwrap();
    for p in out.points() {
        assert!(cloud.points().contains(p));
    }
}

// ---------------------------------------------------------------------------
// voxel_average_downsample
// ---------------------------------------------------------------------------

#[test]
fn voxel_average_of_one_cell_is_the_mean() {
    let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]]).unwrap();
    let out = voxel_average_downsample(&cloud, 1.0).unwrap();
    assert_eq!(out.len(), 1);
    let p = out.points()[0];
    assert!((p[0] - 0.1).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);
}

#[test]
fn well_separated_points_pass_through() {
    let pts = vec![[0.1, 0.1, 0.1], [2.1, 0.1, 0.1], [0.1, 2.1, 0.1]];
    let cloud = PointCloud::new(pts.clone()).unwrap();
    let out = voxel_average_downsample(&cloud, 1.0).unwrap();
    assert_eq!(out.len(), 3);
    for p in pts {
        assert!(out.points().iter().any(|q| dist2(*q, p) < 1e-18));
    }
}

#[test]
fn voxel_average_matches_naive_regrouping() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = random_cloud(&mut rng, 1000);
    let cell = 0.3;
    let out = voxel_average_downsample(&cloud, cell).unwrap();

    // naive oracle: group by floored world-origin cell and average
    use std::collections::HashMap;
    let mut groups: HashMap<[i64; 3], Vec<Point3>> = HashMap::new();
    for &p in cloud.points() {
        let key = [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ];
        groups.entry(key).or_default().push(p);
    }
    assert_eq!(out.len(), groups.len());
    for members in groups.values() {
        let n = members.len() as f64;
        let c = members.iter().fold([0.0; 3], |acc, p| {
            [acc[0] + p[0] / n, acc[1] + p[1] / n, acc[2] + p[2] / n]
        });
        assert!(
            out.points().iter().any(|q| dist2(*q, c) < 1e-18),
            "missing centroid {c:?}"
        );
    }
}

#[test]
fn voxel_average_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cloud = random_cloud(&mut rng, 500);
    let once = voxel_average_downsample(&cloud, 0.4).unwrap();
    let twice = voxel_average_downsample(&once, 0.4).unwrap();
    assert_eq!(once.len(), twice.len());
    for p in once.points() {
        assert!(twice.points().iter().any(|q| dist2(*q, *p) < 1e-18));
    }
}

// ---------------------------------------------------------------------------
// random_downsample
// ---------------------------------------------------------------------------

#[test]
fn full_size_downsample_is_the_same_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&mut rng, 50);
    let out = random_downsample(&cloud, 50, 7).unwrap();
    assert_eq!(out.len(), 50);
    for p in cloud.points() {
        assert!(out.points().contains(p));
    }
}

#[test]
fn seeded_single_draw_is_reproducible() {
    let cloud = PointCloud::new(vec![[0.0; 3], [1.0; 3], [2.0; 3]]).unwrap();
    let a = random_downsample(&cloud, 1, 42).unwrap();
    let b = random_downsample(&cloud, 1, 42).unwrap();
    assert_eq!(a.points(), b.points());
    assert!(cloud.points().contains(&a.points()[0]));
}

#[test]
fn oversized_request_errors() {
    let cloud = PointCloud::new(vec![[0.0; 3]]).unwrap();
    assert!(random_downsample(&cloud, 2, 0).is_err());
}

#[test]
fn one_of_three_draws_are_uniform() {
    let cloud = PointCloud::new(vec![[0.0; 3], [1.0; 3], [2.0; 3]]).unwrap();
    let mut counts = [0usize; 3];
    let n = 10_000;
    for seed in 0..n {
        let out = random_downsample(&cloud, 1, seed).unwrap();
        let idx = out.points()[0][0] as usize;
        counts[idx] += 1;
    }
    // binomial 3σ band around n/3
    let sigma = ((n as f64) * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - n as f64 / 3.0).abs();
        assert!(dev < 3.0 * sigma, "index {i} drawn {c} times (dev {dev:.1})");
    }
}

// ---------------------------------------------------------------------------
// center_and_normalize
// ---------------------------------------------------------------------------

fn cube_corners(half: f64) -> Vec<Point3> {
    let mut pts = Vec::new();
    for &x in &[-half, half] {
        for &y in &[-half, half] {
            for &z in &[-half, half] {
                pts.push([x, y, z]);
            }
        }
    }
    pts
}

#[test]
fn cube_corners_normalize_to_half_unit() {
    let cloud = PointCloud::new(cube_corners(3.0)).unwrap();
    let (out, record) = center_and_normalize(&cloud).unwrap();
    for p in out.points() {
        for &v in p {
            assert!((v.abs() - 0.5).abs() < 1e-12);
        }
    }
    assert!((record.scale - 1.0 / 6.0).abs() < 1e-12);
}

#[test]
fn already_normalized_cloud_gets_identity_record() {
    let cloud = PointCloud::new(cube_corners(0.5)).unwrap();
    let (_, record) = center_and_normalize(&cloud).unwrap();
    assert!(record.is_identity(1e-9), "{record:?}");
}

#[test]
fn transform_record_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = random_cloud(&mut rng, 64);
    let (out, record) = center_and_normalize(&cloud).unwrap();
    for (orig, norm) in cloud.points().iter().zip(out.points()) {
        let back = record.invert(*norm);
        for a in 0..3 {
            assert!((back[a] - orig[a]).abs() < 1e-6);
        }
    }
}

#[test]
fn normalized_bbox_contained_and_touching() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let n = rng.gen_range(4..80);
        let cloud = random_cloud(&mut rng, n);
        let (out, _) = center_and_normalize(&cloud).unwrap();
        let (lo, hi) = out.bounding_box().unwrap();
        let mut longest = 0.0f64;
        for a in 0..3 {
            assert!(lo[a] >= -0.5 - 1e-12 && hi[a] <= 0.5 + 1e-12);
            longest = longest.max(hi[a] - lo[a]);
        }
        assert!((longest - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_extent_errors() {
    let cloud = PointCloud::new(vec![[1.0; 3], [1.0; 3]]).unwrap();
    assert!(center_and_normalize(&cloud).is_err());
}

// ---------------------------------------------------------------------------
// farthest_point_sample
// ---------------------------------------------------------------------------

fn fps_brute_force(points: &[Point3], n_samples: usize, start: usize) -> Vec<usize> {
    let mut selected = vec![start];
    while selected.len() < n_samples {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &p) in points.iter().enumerate() {
            let d = selected
                .iter()
                .map(|&s| dist2(points[s], p))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
    }
    selected
}

#[test]
fn fps_all_points_returns_all_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cloud = random_cloud(&mut rng, 12);
    let mut got = farthest_point_sample(&cloud, 12, 0).unwrap();
    got.sort_unstable();
    assert_eq!(got, (0..12).collect::<Vec<_>>());
}

#[test]
fn fps_collinear_tie_breaks_to_lowest_index() {
    let pts: Vec<Point3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
    let cloud = PointCloud::new(pts).unwrap();
    let got = farthest_point_sample(&cloud, 3, 0).unwrap();
    assert_eq!(got, vec![0, 9, 4]);
}

#[test]
fn fps_matches_brute_force_oracle() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(4..=64);
        let cloud = random_cloud(&mut rng, n);
        let k = rng.gen_range(1..=n);
        let got = farthest_point_sample(&cloud, k, 0).unwrap();
        let want = fps_brute_force(cloud.points(), k, 0);
        assert_eq!(got, want, "seed {seed}");
    }
}

#[test]
fn fps_max_min_radius_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cloud = random_cloud(&mut rng, 100);
    let sel = farthest_point_sample(&cloud, 40, 0).unwrap();
    let mut last = f64::INFINITY;
    for k in 1..sel.len() {
        let d = (0..k)
            .map(|j| dist2(cloud.points()[sel[j]], cloud.points()[sel[k]]))
            .fold(f64::INFINITY, f64::min);
        assert!(d <= last + 1e-12, "radius grew at step {k}");
        last = d;
    }
}

// ---------------------------------------------------------------------------
// ball query and spatial index
// ---------------------------------------------------------------------------

#[test]
fn giant_radius_groups_whole_cloud() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cloud = random_cloud(&mut rng, 20);
    let index = NeighborhoodIndex::build(cloud.points(), 0.5).unwrap();
    let groups = ball_query_group(&cloud, &[0, 7], 100.0, 50, &index);
    for g in groups {
        assert_eq!(g.len(), 20);
    }
}

#[test]
fn isolated_centroid_groups_alone() {
    let pts = vec![[0.0; 3], [100.0, 0.0, 0.0], [100.1, 0.0, 0.0]];
    let cloud = PointCloud::new(pts).unwrap();
    let index = NeighborhoodIndex::build(cloud.points(), 0.5).unwrap();
    let groups = ball_query_group(&cloud, &[0], 1.0, 8, &index);
    assert_eq!(groups[0], vec![0]);
}

#[test]
fn ball_query_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let cloud = random_cloud(&mut rng, 200);
    let index = NeighborhoodIndex::build(cloud.points(), 0.3).unwrap();
    let centroids: Vec<usize> = (0..20).map(|_| rng.gen_range(0..200)).collect();
    let r = 0.35;
    let groups = ball_query_group(&cloud, &centroids, r, 500, &index);
    for (g, &c) in groups.iter().zip(&centroids) {
        let mut expect: Vec<usize> = (0..200)
            .filter(|&i| dist2(cloud.points()[i], cloud.points()[c]) <= r * r)
            .collect();
        expect.sort_by(|&a, &b| {
            let da = dist2(cloud.points()[a], cloud.points()[c]);
            let db = dist2(cloud.points()[b], cloud.points()[c]);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        assert_eq!(g, &expect);
    }
}

#[test]
fn radius_query_equals_exhaustive_scan_on_100_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let cloud = random_cloud(&mut rng, 300);
    let index = NeighborhoodIndex::build(cloud.points(), 0.2).unwrap();
    for _ in 0..100 {
        let q: Point3 = [
            rng.gen_range(-1.2..1.2),
            rng.gen_range(-1.2..1.2),
            rng.gen_range(-1.2..1.2),
        ];
        let r = rng.gen_range(0.05..0.6);
        let got = index.radius_query(q, r);
        let expect: Vec<usize> = (0..300)
            .filter(|&i| dist2(cloud.points()[i], q) <= r * r)
            .collect();
        assert_eq!(got, expect);
    }
}

#[test]
fn k_nearest_matches_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let cloud = random_cloud(&mut rng, 150);
    let index = NeighborhoodIndex::build(cloud.points(), 0.25).unwrap();
    for _ in 0..50 {
        let q: Point3 = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let k = rng.gen_range(1..=5);
        let got = index.k_nearest(q, k);
        let mut all: Vec<usize> = (0..150).collect();
        all.sort_by(|&a, &b| {
            let da = dist2(cloud.points()[a], q);
            let db = dist2(cloud.points()[b], q);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        assert_eq!(got, all[..k].to_vec());
    }
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

#[test]
fn xyz_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.xyz");
    let cloud = PointCloud::new(vec![[1.5, -2.25, 3.0], [0.0, 0.5, -0.125]]).unwrap();
    write_xyz(&cloud, &path).unwrap();
    let back = read_xyz(&path).unwrap();
    assert_eq!(cloud.points(), back.points());
}

#[test]
fn ply_with_extra_properties_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    std::fs::write(
        &path,
        "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nend_header\n\
         1.0 2.0 3.0 255\n-1.0 0.5 0.25 0\n",
    )
    .unwrap();
    let cloud = read_ply(&path).unwrap();
    assert_eq!(cloud.points(), &[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]]);
}

#[test]
fn pcd1_round_trip_with_reference() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.pcd1");
    let cloud = PointCloud::with_reference(
        vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
        Some(vec![[0.5, 0.5, 0.5], [1.5, 1.5, 1.5]]),
    )
    .unwrap();
    write_pcd1(&cloud, &path).unwrap();
    let back = read_pcd1(&path).unwrap();
    assert_eq!(cloud.points(), back.points());
    assert_eq!(cloud.reference_points(), back.reference_points());
    // extension-based dispatch lands on the binary reader
    let via_auto = read_cloud(&path).unwrap();
    assert_eq!(via_auto.points(), cloud.points());
}

#[test]
fn pcd1_bad_magic_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.bin");
    std::fs::write(&path, b"NOPE\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    assert!(read_pcd1(&path).is_err());
}
