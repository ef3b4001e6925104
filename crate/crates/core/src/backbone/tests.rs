use super::*;
use crate::data::{DomainTag, SynthParams};
use rand::Rng as _;

fn tiny_config(widths: [usize; 5], embed: usize, arity: usize) -> BackboneConfig {
    BackboneConfig {
        widths: widths.to_vec(),
        embed_dim: embed,
        ..BackboneConfig::tiny(arity)
    }
}

fn images(n: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
    SynthParams::new(DomainTag::Generic, n, 0.2, seed)
        .with_image_size(size)
        .generate()
        .unwrap()
        .samples
        .iter()
        .map(|s| Tensor::from_image(&s.pixels))
        .collect()
}

#[test]
fn random_init_is_deterministic() {
    let c = BackboneConfig::tiny(1);
    let a = init_backbone(&c, 5, None).unwrap();
    let b = init_backbone(&c, 5, None).unwrap();
    assert_eq!(a.snapshot(), b.snapshot());
    let other = init_backbone(&c, 6, None).unwrap();
    assert_ne!(a.snapshot(), other.snapshot());
}

#[test]
fn checkpoint_init_copies_parameters() {
    let c = BackboneConfig::tiny(3);
    let src = init_backbone(&c, 1, None).unwrap();
    let ckpt = src.to_checkpoint(Provenance::random(1));
    let dst = init_backbone(&c, 99, Some(&ckpt)).unwrap();
    assert_eq!(dst.snapshot(), ckpt.snapshot);
}

#[test]
fn head_arity_change_keeps_trunk() {
    let src = init_backbone(&BackboneConfig::tiny(14), 1, None).unwrap();
    let ckpt = src.to_checkpoint(Provenance::random(1));
    let dst = init_backbone(&BackboneConfig::tiny(1), 2, Some(&ckpt)).unwrap();
    assert_eq!(dst.trunk_snapshot(), src.trunk_snapshot());
    assert_eq!(dst.params.by_name("head.weight").unwrap().shape, vec![1, 64]);
}

#[test]
fn tiny_checkpoint_into_densenet_is_incompatible() {
    let src = init_backbone(&BackboneConfig::tiny(1), 1, None).unwrap();
    let ckpt = src.to_checkpoint(Provenance::random(1));
    let err = init_backbone(&BackboneConfig::densenet121(1), 1, Some(&ckpt)).unwrap_err();
    match err {
        Error::IncompatibleCheckpoint { param, .. } => assert_eq!(param, "trunk.conv0.weight"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn zero_conv_gives_zero_cv1() {
    let mut m = init_backbone(&BackboneConfig::tiny(1), 0, None).unwrap();
    m.params.by_name_mut("trunk.cv1.conv.weight").unwrap().data.fill(0.0);
    let batch = vec![Tensor::<f32>::zeros(vec![3, 16, 16]); 2];
    for t in m.forward_features(&batch, Tap::Cv1).unwrap() {
        assert!(t.data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn taps_have_batch_leading_axis_and_expected_shapes() {
    let m = init_backbone(&BackboneConfig::tiny(1), 0, None).unwrap();
    let batch = images(5, 32, 1);
    let expected = [(16, 32), (24, 16), (32, 8), (48, 4), (64, 2)];
    for (tap, (c, hw)) in Tap::ALL.into_iter().zip(expected) {
        let out = m.forward_features(&batch, tap).unwrap();
        assert_eq!(out.len(), 5);
        for t in &out {
            assert_eq!(t.shape, vec![c, hw, hw], "{tap}");
            assert!(t.data.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn unknown_tap_is_invalid() {
    assert!(Tap::parse("DB7").is_err());
    let mut c = BackboneConfig::tiny(1);
    c.tap_names = vec![Tap::Cv1];
    let m = init_backbone(&c, 0, None).unwrap();
    assert!(m.tap_activation(&images(1, 16, 0)[0], Tap::Db2).is_err());
}

/// Straight-line conv3x3 (pad 1) + per-sample norm + ReLU.
fn cv1_oracle(x: &Tensor<f64>, w: &[f64], gamma: &[f64], beta: &[f64], out_c: usize) -> Vec<f64> {
    let (c, h, wd) = x.chw();
    let mut conv = vec![0.0; out_c * h * wd];
    for o in 0..out_c {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = xx as isize + kx as isize - 1;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                acc += w[((o * c + ci) * 3 + ky) * 3 + kx]
                                    * x.data[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
                conv[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    let n = conv.len() as f64;
    let mean = conv.iter().sum::<f64>() / n;
    let var = conv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + tape::NORM_EPS).sqrt();
    conv.iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = i / (h * wd);
            (gamma[ch] * (v - mean) * inv + beta[ch]).max(0.0)
        })
        .collect()
}

#[test]
fn cv1_matches_direct_convolution() {
    let mut m = init_backbone(&BackboneConfig::tiny(1), 3, None).unwrap().cast::<f64>();
    let mut rng = crate::seed::rng(4, &[]);
    for name in ["trunk.cv1.norm.gamma", "trunk.cv1.norm.beta"] {
        for v in &mut m.params.by_name_mut(name).unwrap().data {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let img: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Tensor::new(vec![3, 8, 8], img);
    let got = m.tap_activation(&x, Tap::Cv1).unwrap();
    let p = |n: &str| m.params.by_name(n).unwrap().data.clone();
    let want = cv1_oracle(
        &x,
        &p("trunk.cv1.conv.weight"),
        &p("trunk.cv1.norm.gamma"),
        &p("trunk.cv1.norm.beta"),
        16,
    );
    assert_eq!(got.shape, vec![16, 8, 8]);
    for (a, b) in got.data.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn embeddings_are_unit_norm_and_batch_independent() {
    let m = init_backbone(&BackboneConfig::tiny(1), 0, None).unwrap();
    let mut batch = images(4, 16, 2);
    batch.push(batch[1].clone());
    let z = m.embed(&batch).unwrap();
    for row in &z {
        let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "{norm}");
    }
    assert_eq!(z[1], z[4]);
    let alone = m.embed(&batch[2..3]).unwrap();
    assert_eq!(alone[0], z[2]);
}

#[test]
fn tapped_db4_equals_untapped_forward() {
    let m = init_backbone(&BackboneConfig::tiny(2), 8, None).unwrap();
    let x = &images(1, 32, 3)[0];
    let via_tap = m.tap_activation(x, Tap::Db4).unwrap();
    let pooled: Vec<f32> = via_tap
        .data
        .chunks(via_tap.shape[1] * via_tap.shape[2])
        .map(|c| c.iter().sum::<f32>() / c.len() as f32)
        .collect();
    assert_eq!(pooled, m.pooled_features(x).unwrap());
    // Stopping early does not change earlier taps.
    let db2 = m.tap_activation(x, Tap::Db2).unwrap();
    let mut tape = Tape::new(&m.params);
    let input = tape.input(x.clone());
    let nodes = m.forward_tape(&mut tape, input, Tap::Db4);
    assert_eq!(tape.value(nodes.tap(Tap::Db2)), &db2);
    assert_eq!(tape.value(nodes.tap(Tap::Db4)), &via_tap);
}

#[test]
fn inference_is_bit_deterministic() {
    let m = init_backbone(&BackboneConfig::tiny(1), 1, None).unwrap();
    let batch = images(3, 16, 9);
    assert_eq!(m.logits(&batch).unwrap(), m.logits(&batch).unwrap());
}

/// Scalar test loss touching both heads: `r . logits + s . embedding`.
fn probe_loss(m: &Backbone<f64>, x: &Tensor<f64>, r: &[f64], s: &[f64], grads: Option<&mut Grads<f64>>) -> f64 {
    let mut tape = Tape::new(&m.params);
    let input = tape.input(x.clone());
    let nodes = m.forward_tape(&mut tape, input, Tap::Db4);
    let logits = m.head_tape(&mut tape, nodes.features);
    let z = m.embed_tape(&mut tape, nodes.features);
    let loss = tape.value(logits).data.iter().zip(r).map(|(a, b)| a * b).sum::<f64>()
        + tape.value(z).data.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
    if let Some(g) = grads {
        tape.backward(logits, r, g);
        tape.backward(z, s, g);
    }
    loss
}

#[test]
fn tiny_cnn_gradients_match_finite_differences() {
    let config = tiny_config([2, 2, 2, 2, 2], 2, 1);
    let mut m = Backbone::<f64>::random(&config, 17).unwrap();
    assert!(m.params.num_elements() <= 500, "{}", m.params.num_elements());
    let mut rng = crate::seed::rng(21, &[]);
    let x = Tensor::new(vec![3, 16, 16], (0..768).map(|_| rng.random_range(0.0..1.0)).collect());
    let r = vec![0.7];
    let s = vec![0.3, -1.1];
    let mut grads = m.params.zero_grads();
    probe_loss(&m, &x, &r, &s, Some(&mut grads));

    let names: Vec<String> = m.params.iter().map(|p| p.name.clone()).collect();
    let eps = 1e-6;
    for _ in 0..20 {
        let name = &names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..m.params.by_name(name).unwrap().data.len());
        let id = m.params.id(name).unwrap();
        let analytic = grads.get(id)[idx];
        let orig = m.params.by_name(name).unwrap().data[idx];
        m.params.by_name_mut(name).unwrap().data[idx] = orig + eps;
        let up = probe_loss(&m, &x, &r, &s, None);
        m.params.by_name_mut(name).unwrap().data[idx] = orig - eps;
        let down = probe_loss(&m, &x, &r, &s, None);
        m.params.by_name_mut(name).unwrap().data[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-4, "{name}[{idx}]: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn batch_gradients_are_sum_of_samples() {
    let config = tiny_config([2, 3, 3, 4, 4], 3, 2);
    let m = Backbone::<f64>::random(&config, 2).unwrap();
    let xs: Vec<Tensor<f64>> = images(11, 16, 4)
        .iter()
        .map(|t| Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f64::from(v)).collect()))
        .collect();
    let r = vec![1.0, -0.5];
    let s = vec![0.2, 0.1, -0.3];
    let (loss, batched) = m
        .batch_gradients(xs.len(), |i, g| Ok(probe_loss(&m, &xs[i], &r, &s, Some(g))))
        .unwrap();
    let mut manual = m.params.zero_grads();
    let mut manual_loss = 0.0;
    for x in &xs {
        manual_loss += probe_loss(&m, x, &r, &s, Some(&mut manual));
    }
    assert!((loss - manual_loss).abs() < 1e-12);
    for (a, b) in batched.bufs.iter().flatten().zip(manual.bufs.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn freezing_leaves_only_head_trainable() {
    let mut m = init_backbone(&BackboneConfig::tiny(1), 0, None).unwrap();
    m.freeze_all_but_head();
    for p in m.params.iter() {
        assert_eq!(p.trainable, p.name.starts_with("head."), "{}", p.name);
    }
    m.unfreeze_all();
    assert!(m.params.iter().all(|p| p.trainable));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let m = init_backbone(&BackboneConfig::tiny(2), 4, None).unwrap();
    let generic = Provenance::random(4).then(LineageStep {
        init: InitLineage::GenericSupervised {
            dataset: "generic".into(),
        },
        config_hash: "aa".into(),
        seed: 4,
        epochs: 3,
    });
    let moco = generic.then(LineageStep {
        init: InitLineage::Moco {
            dataset: "spine".into(),
            limited: None,
        },
        config_hash: "bb".into(),
        seed: 5,
        epochs: 10,
    });
    let ckpt = m.to_checkpoint(moco.clone());
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);

    let finetuned = back.provenance.then(LineageStep {
        init: InitLineage::Finetune {
            dataset: "spine".into(),
            mode: "linear".into(),
        },
        config_hash: "cc".into(),
        seed: 6,
        epochs: 100,
    });
    let again = m.to_checkpoint(finetuned);
    save_checkpoint(&again, &path).unwrap();
    let chain: Vec<String> = load_checkpoint(&path)
        .unwrap()
        .provenance
        .lineage
        .iter()
        .map(|s| s.init.to_string())
        .collect();
    assert_eq!(
        chain,
        [
            "random",
            "generic_supervised:generic",
            "moco:spine",
            "finetune:spine:linear"
        ]
    );

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checksum(_))));
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checksum(_))));
}

#[test]
fn densenet121_shapes() {
    let m = init_backbone(&BackboneConfig::densenet121(14), 0, None).unwrap();
    // Roughly 7M trunk parameters, as in the reference architecture.
    let trunk: usize = m.trunk_snapshot().num_elements() - m.params.by_name("proj.fc1.weight").unwrap().data.len();
    assert!(trunk > 6_900_000 && trunk < 7_100_000, "{trunk}");
    let x = Tensor::<f32>::new(vec![3, 32, 32], vec![0.5; 3 * 32 * 32]);
    let expected = [(64, 16), (256, 8), (512, 4), (1024, 2), (1024, 1)];
    for (tap, (c, hw)) in Tap::ALL.into_iter().zip(expected) {
        let t = m.tap_activation(&x, tap).unwrap();
        assert_eq!(t.shape, vec![c, hw, hw], "{tap}");
    }
    assert_eq!(m.feature_dim(), 1024);
    assert_eq!(m.logits(&[x]).unwrap()[0].len(), 14);
}
