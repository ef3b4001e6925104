use proptest::prelude::*;

use super::*;
use crate::backbone::BackboneConfig;
use crate::data::{DomainTag, SynthParams};

fn basis(cols: &[&[f64]]) -> SubspaceBasis {
    let d = cols[0].len();
    SubspaceBasis {
        basis: DMatrix::from_fn(d, cols.len(), |r, c| cols[c][r]),
        singular_values: vec![1.0; cols.len()],
        retained_variance: 1.0,
    }
}

#[test]
fn principal_angle_examples() {
    let e1 = basis(&[&[1.0, 0.0, 0.0]]);
    let e2 = basis(&[&[0.0, 1.0, 0.0]]);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let diag = basis(&[&[h, h, 0.0]]);
    assert!((cca_similarity(&e1, &e1).unwrap() - 1.0).abs() < 1e-9);
    assert!(cca_similarity(&e1, &e2).unwrap().abs() < 1e-12);
    assert!((cca_similarity(&e1, &diag).unwrap() - h).abs() < 1e-12);
    let short = basis(&[&[1.0, 0.0]]);
    assert!(matches!(cca_similarity(&e1, &short), Err(Error::InvalidArgument(_))));
}

#[test]
fn zero_padded_mean_divides_by_larger_rank() {
    let plane = basis(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
    let line = basis(&[&[1.0, 0.0, 0.0]]);
    assert!((cca_similarity(&plane, &line).unwrap() - 1.0).abs() < 1e-12);
    assert!((cca_similarity_with(&plane, &line, CcaMean::ZeroPadded).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn line_in_r3_has_rank_one() {
    let dir = [1.0, -2.0, 0.5];
    let x = DMatrix::from_fn(20, 3, |r, c| (r as f64 - 7.0) * dir[c] + 3.0);
    let s = top_subspace(&x, 0.99).unwrap();
    assert_eq!(s.rank(), 1);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos: f64 = (0..3).map(|i| s.basis[(i, 0)] * dir[i] / norm).sum();
    assert!((cos.abs() - 1.0).abs() < 1e-12);
}

#[test]
fn isotropic_plane_keeps_both_directions() {
    // Four points on the axes: equal variance along x and y.
    let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    assert_eq!(top_subspace(&x, 0.99).unwrap().rank(), 2);
}

#[test]
fn constructed_spectrum_truncates_at_threshold() {
    // Centered columns u1, u2 (orthonormal) scaled by c * sqrt(0.995) and
    // c * sqrt(0.005), rotated into R^3 by an orthogonal V.
    let u1 = [0.5, -0.5, 0.5, -0.5];
    let u2 = [0.5, 0.5, -0.5, -0.5];
    let c = 3.0;
    let (s1, s2) = (c * 0.995f64.sqrt(), c * 0.005f64.sqrt());
    let v = DMatrix::from_row_slice(3, 3, &[0.0, 0.6, 0.8, 1.0, 0.0, 0.0, 0.0, 0.8, -0.6]);
    let x = DMatrix::from_fn(4, 3, |r, col| s1 * u1[r] * v[(col, 0)] + s2 * u2[r] * v[(col, 1)]);
    let s = top_subspace(&x, 0.99).unwrap();
    assert_eq!(s.rank(), 1);
    assert!((s.singular_values[0] - s1).abs() < 1e-12);
    assert!((s.singular_values[1] - s2).abs() < 1e-12);
    assert!((s.retained_variance - 0.995).abs() < 1e-12);
    assert_eq!(top_subspace(&x, 0.999).unwrap().rank(), 2);
}

#[test]
fn zero_variance_is_degenerate() {
    let x = DMatrix::from_element(5, 3, 2.5);
    assert!(matches!(top_subspace(&x, 0.99), Err(Error::DegenerateInput(_))));
    assert!(top_subspace(&DMatrix::from_element(1, 3, 1.0), 0.99).is_err());
    assert!(top_subspace(&DMatrix::from_fn(3, 2, |r, c| (r * c) as f64), 0.0).is_err());
}

fn random_matrix(rng: &mut crate::seed::Rng, r: usize, c: usize) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn orthonormal(rng: &mut crate::seed::Rng, d: usize, r: usize) -> DMatrix<f64> {
    random_matrix(rng, d, r).qr().q()
}

fn as_basis(m: DMatrix<f64>) -> SubspaceBasis {
    let r = m.ncols();
    SubspaceBasis {
        basis: m,
        singular_values: vec![1.0; r],
        retained_variance: 1.0,
    }
}

proptest! {
    #[test]
    fn scores_are_symmetric_bounded_and_rebasis_invariant(seed in any::<u64>(), d in 3usize..12, ra in 1usize..4, rb in 1usize..4) {
        let mut rng = crate::seed::rng(seed, &[]);
        let (ra, rb) = (ra.min(d), rb.min(d));
        let a = orthonormal(&mut rng, d, ra);
        let b = orthonormal(&mut rng, d, rb);
        let s_ab = cca_similarity(&as_basis(a.clone()), &as_basis(b.clone())).unwrap();
        let s_ba = cca_similarity(&as_basis(b.clone()), &as_basis(a.clone())).unwrap();
        prop_assert!((s_ab - s_ba).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&s_ab));
        let qa = orthonormal(&mut rng, ra, ra);
        let qb = orthonormal(&mut rng, rb, rb);
        let rotated = cca_similarity(&as_basis(&a * qa), &as_basis(&b * qb)).unwrap();
        prop_assert!((rotated - s_ab).abs() < 1e-9);
        let mut permuted = a.clone();
        if ra > 1 {
            permuted.swap_columns(0, ra - 1);
        }
        prop_assert!((cca_similarity(&as_basis(permuted), &as_basis(b)).unwrap() - s_ab).abs() < 1e-9);
        prop_assert!((cca_similarity(&as_basis(a.clone()), &as_basis(a)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn truncation_keeps_threshold_of_variance(seed in any::<u64>(), threshold in 0.5f64..1.0) {
        let mut rng = crate::seed::rng(seed, &[]);
        let scales = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(6, |i, _| 2f64.powi(-(i as i32))));
        let x = random_matrix(&mut rng, 30, 6) * scales;
        let s = top_subspace(&x, threshold).unwrap();
        let gram = s.basis.transpose() * &s.basis;
        prop_assert!((gram - DMatrix::identity(s.rank(), s.rank())).abs().max() < 1e-8);
        let mut centered = x.clone();
        for mut col in centered.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let kept = (&centered * &s.basis).norm_squared();
        prop_assert!(kept >= threshold * centered.norm_squared() * (1.0 - 1e-9));
        prop_assert!(s.retained_variance >= threshold * (1.0 - 1e-9));
    }
}

fn model() -> Model {
    let config = BackboneConfig {
        widths: vec![4, 6, 8, 8, 12],
        ..BackboneConfig::tiny(1)
    };
    Model::random(&config, 2).unwrap()
}

fn dataset(n: usize, shift: f64) -> DatasetHandle {
    SynthParams::new(DomainTag::Generic, n, shift, 4)
        .with_image_size(16)
        .generate()
        .unwrap()
}

#[test]
fn extraction_clamps_and_is_deterministic() {
    let m = model();
    let d = dataset(30, 0.0);
    let a = extract_activations(&m, &d, Tap::Db2, 2000, 1).unwrap();
    assert_eq!((a.values.nrows(), a.values.ncols()), (30, 8));
    let b = extract_activations(&m, &d, Tap::Db2, 10, 1).unwrap();
    let c = extract_activations(&m, &d, Tap::Db2, 10, 1).unwrap();
    assert_eq!(b, c);
    assert_eq!(b.values.nrows(), 10);
    assert_ne!(activation_subset(&d, 10, 1), activation_subset(&d, 10, 2));
}

#[test]
fn pooled_row_is_the_spatial_mean() {
    let m = model();
    let d = dataset(1, 0.0);
    let row = extract_activations(&m, &d, Tap::Db1, 1, 0).unwrap();
    let raw = m
        .tap_activation(&Tensor::from_image(&d.samples[0].pixels), Tap::Db1)
        .unwrap();
    let (c, h, w) = raw.chw();
    for ch in 0..c {
        let mut acc = 0.0;
        for pos in 0..h * w {
            acc += f64::from(raw.data[ch * h * w + pos]);
        }
        assert!((row.values[(0, ch)] - acc / (h * w) as f64).abs() < 1e-12);
    }
    let flat = extract_activations_multi(&m, &d, &[Tap::Db1], 1, 0, SpatialMode::FlattenPositions).unwrap();
    assert_eq!(flat[0].values.nrows(), h * w);
}

#[test]
fn pairwise_report_contracts() {
    let m = model();
    let a = dataset(40, 0.0);
    let b = dataset(40, 0.9);
    let layers = [Tap::Cv1, Tap::Db4];
    let opts = SimilarityOptions {
        samples: 40,
        ..Default::default()
    };
    let twice = pairwise_dataset_similarity(&m, &[&a, &a], &layers, &opts).unwrap();
    for layer in layers {
        assert!((twice.score(&a.name, &a.name, layer).unwrap() - 1.0).abs() < 1e-6);
    }
    let ab = pairwise_dataset_similarity(&m, &[&a, &b], &layers, &opts).unwrap();
    let ba = pairwise_dataset_similarity(&m, &[&b, &a], &layers, &opts).unwrap();
    for layer in layers {
        let s = ab.score(&a.name, &b.name, layer).unwrap();
        assert!((s - ba.score(&a.name, &b.name, layer).unwrap()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&s));
    }
    assert_eq!(ab.entries.len(), 3 * layers.len());
    let json: SimilarityReport = serde_json::from_str(&ab.to_json().unwrap()).unwrap();
    assert_eq!(json, ab);
    assert!(pairwise_dataset_similarity(&m, &[&a], &layers, &opts).is_err());
}

#[test]
fn unconfigured_tap_is_invalid() {
    let config = BackboneConfig {
        widths: vec![4, 4, 4, 4, 4],
        tap_names: vec![Tap::Db4],
        ..BackboneConfig::tiny(1)
    };
    let m = Model::random(&config, 0).unwrap();
    assert!(matches!(
        extract_activations(&m, &dataset(4, 0.0), Tap::Cv1, 4, 0),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn activation_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = ActivationMatrix {
        values: DMatrix::from_row_slice(2, 3, &[0.5, -1.25, 3.0, 0.0, 2.5, -0.125]),
        layer: Tap::Db3,
        dataset: "x".into(),
        model_hash: String::new(),
    };
    let csv = dir.path().join("a.csv");
    write_activations_csv(&m, &csv).unwrap();
    assert_eq!(read_activations_csv(&csv, Tap::Db3, "x").unwrap(), m);
    let bin = dir.path().join("a.bin");
    write_activations_bin(&m, &bin).unwrap();
    let bytes = std::fs::read(&bin).unwrap();
    assert_eq!(bytes.len(), 32 + 6 * 4);
    assert_eq!(&bytes[..8], b"MOCOACT1");
    assert_eq!(read_activations_bin(&bin, "x").unwrap(), m);
    std::fs::write(&bin, &bytes[..40]).unwrap();
    assert!(read_activations_bin(&bin, "x").is_err());
}
