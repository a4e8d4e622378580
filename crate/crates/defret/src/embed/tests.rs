use super::*;
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        k: 3,
        encoder_widths: vec![4, 6],
        head_hidden: vec![5],
    }
}

fn random_points(n: usize, rng: &mut ChaCha12Rng) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            )
        })
        .collect()
}

#[test]
fn encode_is_permutation_invariant() {
    let model = EmbeddingModel::init(&ModelConfig::small(8), 1);
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let points = random_points(64, &mut rng);
    let mut permuted = points.clone();
    permuted.reverse();
    permuted.swap(3, 17);
    let a = encode(&model, &points).unwrap();
    let b = encode(&model, &permuted).unwrap();
    assert_eq!(a, b, "max pooling must ignore point order");
}

#[test]
fn encode_ignores_duplicated_points() {
    let model = EmbeddingModel::init(&ModelConfig::small(8), 1);
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let points = random_points(32, &mut rng);
    let mut doubled = points.clone();
    doubled.extend_from_slice(&points);
    assert_eq!(encode(&model, &points).unwrap(), encode(&model, &doubled).unwrap());
}

#[test]
fn encode_singleton_equals_per_point_feature() {
    let model = EmbeddingModel::init(&tiny_config(), 4);
    let p = vec![Point3::new(0.3, -0.2, 0.9)];
    let feature = encode(&model, &p).unwrap();
    let acts = net::point_stack_forward(&model.point_layers, {
        let mut m = ndarray::Array2::zeros((1, 3));
        m[[0, 0]] = 0.3;
        m[[0, 1]] = -0.2;
        m[[0, 2]] = 0.9;
        m
    });
    assert_eq!(feature, acts.last().unwrap().row(0).to_owned());
}

#[test]
fn encode_rejects_empty_cloud() {
    let model = EmbeddingModel::init(&tiny_config(), 4);
    assert!(matches!(encode(&model, &[]), Err(EmbedError::EmptyCloud)));
}

#[test]
fn field_values_stay_in_logistic_range() {
    let model = EmbeddingModel::init(&ModelConfig::small(16), 5);
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let cache = forward(&model, &random_points(100, &mut rng), true).unwrap();
    let code = cache.code();
    let g = code.g.unwrap();
    for &v in g.iter() {
        assert!(v > FIELD_EPSILON && v < 1.0 + FIELD_EPSILON);
    }
}

#[test]
fn with_field_false_omits_g() {
    let model = EmbeddingModel::init(&tiny_config(), 4);
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let code = forward(&model, &random_points(10, &mut rng), false)
        .unwrap()
        .code();
    assert!(code.g.is_none());
}

#[test]
fn forward_is_reproducible() {
    let model = EmbeddingModel::init(&tiny_config(), 4);
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let points = random_points(20, &mut rng);
    let a = forward(&model, &points, true).unwrap().code();
    let b = forward(&model, &points, true).unwrap().code();
    assert_eq!(a, b);
}

#[test]
fn ego_distance_hand_values() {
    let target = EgocentricCode {
        z: ndarray::arr1(&[1.0, 0.0]),
        g: None,
    };
    let observer = EgocentricCode {
        z: ndarray::arr1(&[0.0, 0.0]),
        g: Some(ndarray::arr1(&[4.0, 1.0])),
    };
    assert_eq!(ego_distance(&target, &observer).unwrap(), 2.0);

    // Identity field reduces to Euclidean distance.
    let obs_euclid = EgocentricCode {
        z: ndarray::arr1(&[0.0, 0.0]),
        g: Some(ndarray::arr1(&[1.0, 1.0])),
    };
    assert_eq!(ego_distance(&target, &obs_euclid).unwrap(), 1.0);

    // Self distance is exactly zero.
    let self_code = EgocentricCode {
        z: ndarray::arr1(&[0.7, -0.3]),
        g: Some(ndarray::arr1(&[2.0, 5.0])),
    };
    assert_eq!(ego_distance(&self_code, &self_code).unwrap(), 0.0);
}

#[test]
fn ego_distance_errors() {
    let a = EgocentricCode {
        z: ndarray::arr1(&[1.0, 0.0]),
        g: None,
    };
    assert!(matches!(
        ego_distance(&a, &a),
        Err(EmbedError::MissingField)
    ));
    let b = EgocentricCode {
        z: ndarray::arr1(&[1.0, 0.0, 2.0]),
        g: Some(ndarray::arr1(&[1.0, 1.0, 1.0])),
    };
    assert!(matches!(
        ego_distance(&a, &b),
        Err(EmbedError::DimensionMismatch(2, 3))
    ));
}

#[test]
fn ego_distance_nonneg_and_identity_fuzz() {
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    for _ in 0..500 {
        let k = 1 + (rng.random::<u32>() % 8) as usize;
        let z_t = ndarray::Array1::from_shape_fn(k, |_| rng.random::<f64>() * 10.0 - 5.0);
        let z_s = ndarray::Array1::from_shape_fn(k, |_| rng.random::<f64>() * 10.0 - 5.0);
        let g = ndarray::Array1::from_shape_fn(k, |_| rng.random::<f64>() + FIELD_EPSILON);
        let t = EgocentricCode { z: z_t.clone(), g: None };
        let s = EgocentricCode { z: z_s, g: Some(g.clone()) };
        assert!(ego_distance(&t, &s).unwrap() >= 0.0);
        let t_as_s = EgocentricCode { z: z_t, g: Some(g) };
        assert_eq!(ego_distance(&t_as_s, &t_as_s).unwrap(), 0.0);
    }
}

#[test]
fn asymmetry_is_expressible() {
    // Whenever the two fields differ along the separation, the two
    // directions disagree.
    let a = EgocentricCode {
        z: ndarray::arr1(&[1.0, 2.0]),
        g: Some(ndarray::arr1(&[0.5, 1.0])),
    };
    let b = EgocentricCode {
        z: ndarray::arr1(&[-1.0, 0.5]),
        g: Some(ndarray::arr1(&[2.0, 1.0])),
    };
    let ab = ego_distance(&a, &b).unwrap();
    let ba = ego_distance(&b, &a).unwrap();
    assert!((ab - ba).abs() > 1e-6, "expected asymmetry, got {ab} vs {ba}");
}

/// Central finite differences of an arbitrary scalar of the model outputs
/// against the analytic backward pass, over every weight.
fn check_gradients<Loss>(seed: u64, loss_fn: Loss)
where
    Loss: Fn(&EmbeddingModel) -> (f64, ModelGrads),
{
    let mut model = EmbeddingModel::init(&tiny_config(), seed);
    let (_, grads) = loss_fn(&model);
    let analytic = grads.to_flat();
    let flat = model.to_flat();
    assert_eq!(analytic.len(), flat.len());
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let h = 1e-6 * flat[i].abs().max(1.0);
        let mut plus = flat.clone();
        plus[i] += h;
        model.set_flat(&plus);
        let (lp, _) = loss_fn(&model);
        let mut minus = flat.clone();
        minus[i] -= h;
        model.set_flat(&minus);
        let (lm, _) = loss_fn(&model);
        let fd = (lp - lm) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
        let rel = (fd - analytic[i]).abs() / denom;
        let ok = rel < 1e-4 || (fd - analytic[i]).abs() < 1e-10;
        assert!(ok, "param {i}: fd {fd} vs analytic {}", analytic[i]);
        worst = worst.max(rel.min(1.0));
    }
    model.set_flat(&flat);
    assert!(worst < 1e-4 || worst.is_nan() == false);
}

#[test]
fn delta_gradient_matches_finite_differences() {
    // d(delta(t; s)) w.r.t. every weight, through both shapes and the
    // shared encoder.
    let mut rng = ChaCha12Rng::seed_from_u64(40);
    let target_points = random_points(7, &mut rng);
    let source_points = random_points(9, &mut rng);
    check_gradients(41, |model| {
        let tc = forward(model, &target_points, false).unwrap();
        let sc = forward(model, &source_points, true).unwrap();
        let t = tc.code();
        let s = sc.code();
        let d2 = ego_distance_sq(&t, &s).unwrap();
        let delta = d2.sqrt();
        // d(delta)/dz_t = g (z_t - z_s) / delta, etc.
        let g = s.g.as_ref().unwrap();
        let diff = &t.z - &s.z;
        let dz_t = g * &diff / delta;
        let dz_s = -&dz_t;
        let dg = diff.mapv(|d| d * d) / (2.0 * delta);
        let mut grads = ModelGrads::zeros_like(model);
        backward(model, &tc, &dz_t, None, &mut grads);
        backward(model, &sc, &dz_s, Some(&dg), &mut grads);
        (delta, grads)
    });
}

#[test]
fn pooled_feature_gradient_matches_finite_differences() {
    // A simpler scalar that exercises the max-pool routing: the sum of the
    // embedding vector.
    let mut rng = ChaCha12Rng::seed_from_u64(50);
    let points = random_points(11, &mut rng);
    check_gradients(51, |model| {
        let cache = forward(model, &points, false).unwrap();
        let z = cache.f_acts.last().unwrap();
        let loss = z.sum();
        let mut grads = ModelGrads::zeros_like(model);
        backward(model, &cache, &ndarray::Array1::ones(z.len()), None, &mut grads);
        (loss, grads)
    });
}

#[test]
fn checkpoint_roundtrip_is_file_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.demb");
    let p2 = dir.path().join("b.demb");
    let model = EmbeddingModel::init(&ModelConfig::small(16), 9);
    save_checkpoint(&model, &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded.k, model.k);
    save_checkpoint(&loaded, &p2).unwrap();
    // f32 storage: save -> load -> save reproduces the file byte for byte.
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.demb");
    std::fs::write(&path, b"XXXXXX").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(EmbedError::BadMagic)));

    let model = EmbeddingModel::init(&tiny_config(), 1);
    let good = dir.path().join("good.demb");
    save_checkpoint(&model, &good).unwrap();
    let mut bytes = std::fs::read(&good).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(EmbedError::Truncated)));

    let mut vbytes = std::fs::read(&good).unwrap();
    vbytes[4] = 9;
    std::fs::write(&path, &vbytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(EmbedError::UnsupportedVersion(9))
    ));
}

#[test]
fn flat_roundtrip() {
    let mut model = EmbeddingModel::init(&tiny_config(), 2);
    let flat = model.to_flat();
    assert_eq!(flat.len(), model.param_count());
    let other = EmbeddingModel::init(&tiny_config(), 3);
    model.set_flat(&other.to_flat());
    assert_eq!(model, other);
}
