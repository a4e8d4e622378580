use super::io::{load_cloud_drpc, load_mesh, save_cloud_drpc, save_cloud_xyz, save_obj};
use super::*;
use approx::assert_relative_eq;
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::Write;

pub(crate) fn unit_cube() -> TriangleMesh {
    // 8 corners, 12 triangles, 2 per face.
    let v = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(1.0, 1.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(0.0, 0.0, 1.0),
        Point3::new(1.0, 0.0, 1.0),
        Point3::new(1.0, 1.0, 1.0),
        Point3::new(0.0, 1.0, 1.0),
    ];
    let t = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [2, 3, 7],
        [2, 7, 6],
        [1, 2, 6],
        [1, 6, 5],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriangleMesh::new(v, t).unwrap()
}

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| Point3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    PointCloud::new(points, ShapeId::UNASSIGNED, seed)
}

#[test]
fn cube_obj_has_18_unique_edges() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cube.obj");
    save_obj(&unit_cube(), &path).unwrap();
    let mesh = load_mesh(&path).unwrap();
    assert_eq!(mesh.vertices().len(), 8);
    assert_eq!(mesh.triangles().len(), 12);
    assert_eq!(mesh.edges().len(), 18);
}

#[test]
fn tetrahedron_off_topology() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tet.off");
    std::fs::write(
        &path,
        "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n",
    )
    .unwrap();
    let mesh = load_mesh(&path).unwrap();
    assert_eq!(mesh.vertices().len(), 4);
    assert_eq!(mesh.triangles().len(), 4);
    assert_eq!(mesh.edges().len(), 6);
}

#[test]
fn pentagon_face_fans_into_three_triangles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pent.obj");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "v 0 0 0\nv 1 0 0\nv 1.5 1 0\nv 0.5 1.8 0\nv -0.5 1 0").unwrap();
    writeln!(f, "f 1 2 3 4 5").unwrap();
    drop(f);
    let mesh = load_mesh(&path).unwrap();
    // Hand fan rooted at vertex 0: (0,1,2), (0,2,3), (0,3,4).
    assert_eq!(mesh.triangles(), &[[0, 1, 2], [0, 2, 3], [0, 3, 4]]);
}

#[test]
fn ply_ascii_and_binary_agree() {
    let dir = tempfile::tempdir().unwrap();
    let ascii = dir.path().join("tri.ply");
    std::fs::write(
        &ascii,
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n",
    )
    .unwrap();
    let a = load_mesh(&ascii).unwrap();

    let bin = dir.path().join("tri_bin.ply");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n");
    for p in [[0f32, 0., 0.], [1., 0., 0.], [0., 1., 0.]] {
        for c in p {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    bytes.push(3);
    for i in [0i32, 1, 2] {
        bytes.extend_from_slice(&i.to_le_bytes());
    }
    std::fs::write(&bin, bytes).unwrap();
    let b = load_mesh(&bin).unwrap();

    assert_eq!(a.vertices(), b.vertices());
    assert_eq!(a.triangles(), b.triangles());
}

#[test]
fn load_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_mesh(dir.path().join("missing.obj")).is_err());

    let empty = dir.path().join("empty.obj");
    std::fs::write(&empty, "# nothing\n").unwrap();
    assert!(matches!(
        load_mesh(&empty),
        Err(super::io::MeshIoError::Geometry { .. })
    ));

    let bad = dir.path().join("bad.obj");
    std::fs::write(&bad, "v 0 0 0\nf 1 2 3\n").unwrap();
    assert!(load_mesh(&bad).is_err());
}

#[test]
fn normalize_unit_cube_translated() {
    let mut mesh = unit_cube();
    let verts: Vec<_> = mesh
        .vertices()
        .iter()
        .map(|v| Point3::new(v.x + 10.0, v.y + 10.0, v.z + 10.0))
        .collect();
    mesh = mesh.with_vertices(verts);
    let n = normalize(&mesh).unwrap();
    let (lo, hi) = n.bbox();
    assert_relative_eq!((hi - lo).norm(), 1.0, epsilon = 1e-12);
    assert_relative_eq!(nalgebra::center(&lo, &hi).coords.norm(), 0.0, epsilon = 1e-12);
}

#[test]
fn normalize_is_idempotent() {
    let n1 = normalize(&unit_cube()).unwrap();
    let n2 = normalize(&n1).unwrap();
    for (a, b) in n1.vertices().iter().zip(n2.vertices()) {
        assert_relative_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
    }
}

#[test]
fn normalize_preserves_aspect() {
    // A 2x1x1 box has diagonal sqrt(6); sides scale to (2,1,1)/sqrt(6).
    let mesh = unit_cube();
    let verts: Vec<_> = mesh
        .vertices()
        .iter()
        .map(|v| Point3::new(v.x * 2.0, v.y, v.z))
        .collect();
    let n = normalize(&mesh.with_vertices(verts)).unwrap();
    let (lo, hi) = n.bbox();
    let s6 = 6.0f64.sqrt();
    assert_relative_eq!(hi.x - lo.x, 2.0 / s6, epsilon = 1e-12);
    assert_relative_eq!(hi.y - lo.y, 1.0 / s6, epsilon = 1e-12);
    assert_relative_eq!(hi.z - lo.z, 1.0 / s6, epsilon = 1e-12);
}

#[test]
fn normalize_rejects_degenerate_bbox() {
    let mesh = TriangleMesh::new(vec![Point3::new(1.0, 2.0, 3.0); 3], vec![[0, 1, 2]]).unwrap();
    assert!(matches!(
        normalize(&mesh),
        Err(GeometryError::DegenerateBoundingBox)
    ));
}

#[test]
fn normalize_commutes_with_axis_aligned_rotation() {
    // Covariance is only promised up to the bbox definition, so probe with a
    // rotation that maps the bbox onto itself: 90 degrees about z.
    let mesh = unit_cube();
    let stretched: Vec<_> = mesh
        .vertices()
        .iter()
        .map(|v| Point3::new(v.x * 3.0 + 1.0, v.y * 2.0 - 4.0, v.z))
        .collect();
    let mesh = mesh.with_vertices(stretched);
    let rot = |p: &Point3<f64>| Point3::new(-p.y, p.x, p.z);
    let rotated = mesh.with_vertices(mesh.vertices().iter().map(rot).collect());

    let n_then_r: Vec<_> = normalize(&mesh).unwrap().vertices().iter().map(rot).collect();
    let r_then_n = normalize(&rotated).unwrap();
    for (a, b) in n_then_r.iter().zip(r_then_n.vertices()) {
        assert_relative_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
    }
}

#[test]
fn sample_single_triangle_points_lie_in_plane() {
    let mesh = TriangleMesh::new(
        vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ],
        vec![[0, 1, 2]],
    )
    .unwrap();
    let cloud = sample_surface(&mesh, 3, 7).unwrap();
    assert_eq!(cloud.len(), 3);
    for p in &cloud.points {
        assert_eq!(p.z, 0.0);
        assert!(p.x >= 0.0 && p.y >= 0.0 && p.x + p.y <= 1.0 + 1e-12);
    }
}

#[test]
fn sample_counts_follow_area_ratio() {
    // Two triangles with area ratio 9:1, n = 10_000. Binomial 3-sigma bound:
    // sigma = sqrt(n * 0.9 * 0.1) = 30, so |count - 9000| <= 90.
    let mesh = TriangleMesh::new(
        vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(9.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.0),
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(11.0, 0.0, 0.0),
            Point3::new(10.0, 2.0, 0.0),
        ],
        vec![[0, 1, 2], [3, 4, 5]],
    )
    .unwrap();
    let pat = SamplePattern::draw(&mesh, 10_000, 99).unwrap();
    let big = pat.triangle_ids.iter().filter(|&&t| t == 0).count() as i64;
    assert!((big - 9000).abs() <= 90, "count {big} outside 3-sigma bound");
}

#[test]
fn sample_chi_square_on_area_proportionality() {
    // Six triangles with distinct areas, n = 1e5. Chi-square with df = 5 at
    // p = 0.001 has critical value 20.515.
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    let widths = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
    for (i, w) in widths.iter().enumerate() {
        let x0 = i as f64 * 10.0;
        let base = verts.len() as u32;
        verts.push(Point3::new(x0, 0.0, 0.0));
        verts.push(Point3::new(x0 + w, 0.0, 0.0));
        verts.push(Point3::new(x0, 2.0, 0.0));
        tris.push([base, base + 1, base + 2]);
    }
    let mesh = TriangleMesh::new(verts, tris).unwrap();
    let n = 100_000usize;
    let pat = SamplePattern::draw(&mesh, n, 1234).unwrap();
    let mut counts = [0usize; 6];
    for &t in &pat.triangle_ids {
        counts[t as usize] += 1;
    }
    let total_area: f64 = widths.iter().sum();
    let mut chi2 = 0.0;
    for (c, w) in counts.iter().zip(widths) {
        let expected = n as f64 * w / total_area;
        chi2 += (*c as f64 - expected).powi(2) / expected;
    }
    assert!(chi2 < 20.515, "chi-square {chi2:.3} exceeds critical value");
}

#[test]
fn sample_is_deterministic() {
    let mesh = unit_cube();
    let a = sample_surface(&mesh, 500, 42).unwrap();
    let b = sample_surface(&mesh, 500, 42).unwrap();
    assert_eq!(a.points, b.points);
    let c = sample_surface(&mesh, 500, 43).unwrap();
    assert_ne!(a.points, c.points);
}

#[test]
fn sample_rejects_zero_area() {
    let mesh = TriangleMesh::new(
        vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)],
        vec![[0, 0, 1]],
    )
    .unwrap();
    assert!(matches!(
        sample_surface(&mesh, 10, 1),
        Err(GeometryError::NoSampleableArea)
    ));
}

#[test]
fn pattern_transport_matches_direct_sampling() {
    let mesh = normalize(&unit_cube()).unwrap();
    let pat = SamplePattern::draw(&mesh, 256, 5).unwrap();
    let direct = sample_surface(&mesh, 256, 5).unwrap();
    assert_eq!(pat.evaluate(&mesh).points, direct.points);
}

#[test]
fn chamfer_identical_clouds_is_zero() {
    let a = random_cloud(128, 3);
    assert_eq!(chamfer_pp(&a, &a).unwrap(), 0.0);
}

#[test]
fn chamfer_two_singletons() {
    let a = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)], ShapeId::UNASSIGNED, 0);
    let b = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)], ShapeId::UNASSIGNED, 0);
    assert_eq!(chamfer_pp(&a, &b).unwrap(), 2.0);
    assert_relative_eq!(
        chamfer_pp_variant(&a, &b, ChamferVariant::Unsquared).unwrap(),
        2.0,
        epsilon = 1e-15
    );
}

#[test]
fn chamfer_is_symmetric_and_rejects_empty() {
    let a = random_cloud(100, 1);
    let b = random_cloud(80, 2);
    assert_eq!(chamfer_pp(&a, &b).unwrap(), chamfer_pp(&b, &a).unwrap());
    let empty = PointCloud::new(vec![], ShapeId::UNASSIGNED, 0);
    assert!(matches!(
        chamfer_pp(&a, &empty),
        Err(GeometryError::EmptyCloud)
    ));
}

#[test]
fn kdtree_matches_brute_force_exactly() {
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    for trial in 0..50 {
        let n = 1 + (trial * 11) % 256;
        let cloud = random_cloud(n, 1000 + trial as u64);
        let index = SpatialIndex::build(&cloud.points);
        for _ in 0..20 {
            let q = Point3::new(
                rng.random::<f64>() * 2.0 - 0.5,
                rng.random::<f64>() * 2.0 - 0.5,
                rng.random::<f64>() * 2.0 - 0.5,
            );
            let got = index.nearest(&q);
            let want = SpatialIndex::nearest_brute_force(&cloud.points, &q);
            assert_eq!(got, want);
        }
    }
}

#[test]
fn kdtree_breaks_ties_by_lowest_index() {
    // Duplicate points guarantee exact distance ties.
    let pts = vec![
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
    ];
    let index = SpatialIndex::build(&pts);
    let (i, _) = index.nearest(&Point3::new(0.5, 0.5, 0.0));
    assert_eq!(i, 0);
}

#[test]
fn point_triangle_distance_cases() {
    let tri = [
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
    ];
    let centroid = Point3::new(1.0 / 3.0, 1.0 / 3.0, 0.7);
    assert_relative_eq!(point_triangle_distance(&centroid, &tri), 0.7, epsilon = 1e-12);
    assert_eq!(point_triangle_distance(&tri[0], &tri), 0.0);
    // Beyond the hypotenuse edge: distance to the edge line.
    let p = Point3::new(1.0, 1.0, 0.0);
    assert_relative_eq!(
        point_triangle_distance(&p, &tri),
        (2.0f64).sqrt() / 2.0,
        epsilon = 1e-12
    );
}

#[test]
fn point_triangle_distance_matches_dense_sampling() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let tri = [
        Point3::new(0.2, -0.1, 0.3),
        Point3::new(1.1, 0.4, -0.2),
        Point3::new(-0.3, 0.9, 0.5),
    ];
    for _ in 0..50 {
        let p = Point3::new(
            rng.random::<f64>() * 4.0 - 2.0,
            rng.random::<f64>() * 4.0 - 2.0,
            rng.random::<f64>() * 4.0 - 2.0,
        );
        let exact = point_triangle_distance(&p, &tri);
        // Dense barycentric grid oracle; upper bound that converges to exact.
        let mut best = f64::INFINITY;
        let m = 200;
        for i in 0..=m {
            for j in 0..=(m - i) {
                let (u, v) = (i as f64 / m as f64, j as f64 / m as f64);
                let q = tri[0] + (tri[1] - tri[0]) * u + (tri[2] - tri[0]) * v;
                best = best.min((p - q).norm());
            }
        }
        assert!(exact <= best + 1e-12);
        assert!(best - exact <= 0.02, "grid oracle {best} vs exact {exact}");
    }
}

#[test]
fn degenerate_triangle_falls_back_to_segment() {
    // Collinear triangle: distance equals point-to-segment distance.
    let tri = [
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(2.0, 0.0, 0.0),
    ];
    let p = Point3::new(1.0, 1.0, 0.0);
    assert_relative_eq!(point_triangle_distance(&p, &tri), 1.0, epsilon = 1e-12);
    let q = Point3::new(3.0, 0.0, 0.0);
    assert_relative_eq!(point_triangle_distance(&q, &tri), 1.0, epsilon = 1e-12);
}

#[test]
fn bvh_matches_brute_force() {
    let mesh = normalize(&unit_cube()).unwrap();
    let bvh = TriangleBvh::build(&mesh);
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    for _ in 0..500 {
        let p = Point3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        assert_eq!(bvh.distance_sq(&p), bvh.distance_sq_brute_force(&p));
    }
}

fn square_sheet(z: f64) -> TriangleMesh {
    TriangleMesh::new(
        vec![
            Point3::new(0.0, 0.0, z),
            Point3::new(1.0, 0.0, z),
            Point3::new(1.0, 1.0, z),
            Point3::new(0.0, 1.0, z),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap()
}

fn sheet_record(id: u32, z: f64, n_eval: usize) -> ShapeRecord {
    let mesh = square_sheet(z);
    let mut cloud_train = sample_surface(&mesh, 256, 11 + id as u64).unwrap();
    cloud_train.source_shape_id = ShapeId(id);
    let mut cloud_eval = sample_surface(&mesh, n_eval, 17 + id as u64).unwrap();
    cloud_eval.source_shape_id = ShapeId(id);
    ShapeRecord {
        id: ShapeId(id),
        mesh,
        cloud_train,
        cloud_eval: Some(cloud_eval),
    }
}

#[test]
fn chamfer_pm_self_is_zero_and_symmetric() {
    let a = sheet_record(0, 0.0, 2000);
    let b = sheet_record(1, 0.25, 2000);
    assert!(chamfer_pm(&a, &a).unwrap() <= 1e-10);
    assert_eq!(chamfer_pm(&a, &b).unwrap(), chamfer_pm(&b, &a).unwrap());
}

#[test]
fn chamfer_pm_parallel_sheets_is_twice_gap_squared() {
    // Identical xy extents: every sample sits at exactly the gap distance.
    let g = 0.25;
    let a = sheet_record(0, 0.0, 2000);
    let b = sheet_record(1, g, 2000);
    assert_relative_eq!(chamfer_pm(&a, &b).unwrap(), 2.0 * g * g, epsilon = 1e-9);
}

#[test]
fn chamfer_pm_requires_eval_cloud() {
    let mut a = sheet_record(0, 0.0, 100);
    let b = sheet_record(1, 0.1, 100);
    a.cloud_eval = None;
    assert!(matches!(
        chamfer_pm(&a, &b),
        Err(GeometryError::MissingEvalCloud(_))
    ));
}

#[test]
fn one_way_pm_cases() {
    let sheet = square_sheet(0.0);
    let on_surface = sample_surface(&sheet, 500, 3).unwrap();
    assert!(one_way_pm(&on_surface, &sheet).unwrap() <= 1e-12);

    // Offset plane at gap g: every point at distance g.
    let g = 0.15;
    let offset = PointCloud::new(
        on_surface.points.iter().map(|p| Point3::new(p.x, p.y, g)).collect(),
        ShapeId::UNASSIGNED,
        3,
    );
    assert_relative_eq!(one_way_pm(&offset, &sheet).unwrap(), g * g, epsilon = 1e-12);
}

#[test]
fn one_way_pm_is_asymmetric_on_partial_scans() {
    // Half of a sphere's points against the full sphere: the one-way fit is
    // near zero while the two-way Chamfer stays bounded away from it.
    let sphere = crate::reteval::synth::uv_sphere(0.5, 24, 16);
    let cloud = sample_surface(&sphere, 4000, 8).unwrap();
    let half: Vec<_> = cloud.points.iter().copied().filter(|p| p.z >= 0.0).collect();
    let half_cloud = PointCloud::new(half, ShapeId::UNASSIGNED, 8);
    let one_way = one_way_pm(&half_cloud, &sphere).unwrap();
    assert!(one_way <= 1e-10, "one-way fit should vanish, got {one_way}");
    let full_cloud = sample_surface(&sphere, 4000, 9).unwrap();
    let two_way = chamfer_pp(&half_cloud, &full_cloud).unwrap();
    assert!(two_way > 100.0 * one_way.max(1e-12));
}

#[test]
fn cloud_drpc_roundtrip_and_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.drpc");
    let cloud = random_cloud(64, 21);
    save_cloud_drpc(&cloud, &path).unwrap();
    let loaded = load_cloud_drpc(&path, cloud.source_shape_id, cloud.seed).unwrap();
    assert_eq!(loaded.len(), cloud.len());
    for (a, b) in cloud.points.iter().zip(&loaded.points) {
        // Storage is f32.
        assert!((a - b).norm() < 1e-6);
    }
    // Size: 8-byte header + 12 bytes per point.
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 + 64 * 12);

    std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
    assert!(load_cloud_drpc(&path, ShapeId::UNASSIGNED, 0).is_err());
}

#[test]
fn cloud_xyz_export() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xyz");
    let cloud = PointCloud::new(
        vec![Point3::new(0.5, -1.25, 3.0)],
        ShapeId::UNASSIGNED,
        0,
    );
    save_cloud_xyz(&cloud, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "0.5 -1.25 3\n");
}

#[test]
fn obj_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.obj");
    let mesh = normalize(&unit_cube()).unwrap();
    save_obj(&mesh, &path).unwrap();
    let loaded = load_mesh(&path).unwrap();
    assert_eq!(mesh.vertices(), loaded.vertices());
    assert_eq!(mesh.triangles(), loaded.triangles());
}

#[test]
fn shape_record_build_samples_both_clouds() {
    let rec = ShapeRecord::build(ShapeId(5), &unit_cube(), 42, 64, 128).unwrap();
    assert_eq!(rec.cloud_train.len(), 64);
    assert_eq!(rec.cloud_eval().unwrap().len(), 128);
    assert_eq!(rec.cloud_train.source_shape_id, ShapeId(5));
    assert_relative_eq!(rec.mesh.bbox_diagonal(), 1.0, epsilon = 1e-12);
    // Reproducible.
    let rec2 = ShapeRecord::build(ShapeId(5), &unit_cube(), 42, 64, 128).unwrap();
    assert_eq!(rec.cloud_train.points, rec2.cloud_train.points);
}
