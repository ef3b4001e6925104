use proptest::prelude::*;

use super::*;
use crate::data::{DomainTag, SynthParams};

fn oracle_bce(z: f64, y: u8) -> f64 {
    // Direct scalar form, with log1p to keep large |z| finite.
    if y == 1 {
        if z >= 0.0 {
            (-z).exp().ln_1p()
        } else {
            -z + z.exp().ln_1p()
        }
    } else if z >= 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[test]
fn bce_examples() {
    assert!((bce_loss(&[0.0f64; 4], &[1, 0, 1, 1]).unwrap() - 2f64.ln()).abs() < 1e-9);
    assert!(bce_loss(&[20.0f64, -20.0], &[1, 0]).unwrap() < 1e-8);
    let expected = ((-0.5f64).exp().ln_1p() + (-0.3f64).exp().ln_1p()) / 2.0;
    assert!((bce_loss(&[0.5f64, -0.3], &[1, 0]).unwrap() - expected).abs() < 1e-15);
    assert!(matches!(bce_loss(&[0.0f64], &[2]), Err(Error::InvalidArgument(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bce_matches_scalar_oracle(z in prop::collection::vec(-50.0f64..50.0, 1..10), seed in any::<u32>()) {
        let y: Vec<u8> = (0..z.len()).map(|i| ((seed >> (i % 32)) & 1) as u8).collect();
        let (loss, grad) = bce_loss_with_grad(&z, &y).unwrap();
        let expected = z.iter().zip(&y).map(|(&a, &b)| oracle_bce(a, b)).sum::<f64>() / z.len() as f64;
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert!((loss - expected).abs() < 1e-7);
        for ((g, &a), &b) in grad.iter().zip(&z).zip(&y) {
            let sig = 1.0 / (1.0 + (-a).exp());
            prop_assert!((g * z.len() as f64 - (sig - f64::from(b))).abs() < 1e-6);
        }
    }
}

fn tiny(arity: usize) -> BackboneConfig {
    BackboneConfig {
        widths: vec![4, 4, 4, 4, 8],
        embed_dim: 4,
        ..BackboneConfig::tiny(arity)
    }
}

fn data(n: usize, seed: u64) -> DatasetHandle {
    SynthParams::new(DomainTag::SmallDomain, n, 0.0, seed)
        .with_image_size(16)
        .generate()
        .unwrap()
}

fn start() -> Checkpoint {
    Model::random(&tiny(1), 3).unwrap().to_checkpoint(Provenance::random(3))
}

fn quick(mode: FinetuneMode, epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        lr: 0.05,
        ..FinetuneConfig::small_domain(mode, 7)
    }
}

#[test]
fn linear_mode_keeps_trunk_bit_identical() {
    let ckpt = start();
    let trained = finetune(&ckpt, &data(58, 1), Some(&data(20, 2)), &quick(FinetuneMode::Linear, 5)).unwrap();
    let before = ckpt.snapshot.filter(|n| !n.starts_with("head."));
    assert_eq!(trained.model.trunk_snapshot(), before);
    assert_ne!(trained.model.snapshot(), ckpt.snapshot);
    assert_eq!(trained.history.len(), 5);
    assert!(trained.history.iter().all(|r| r.val_weighted_auroc.is_some()));
    assert_eq!(
        trained.provenance.latest().unwrap().init,
        InitLineage::Finetune {
            dataset: "small_domain_s0.00".into(),
            mode: "linear".into()
        }
    );
}

#[test]
fn cached_features_match_full_forward() {
    let ckpt = start();
    let val = data(20, 2);
    let trained = finetune(&ckpt, &data(32, 1), None, &quick(FinetuneMode::Linear, 2)).unwrap();
    let images: Vec<Tensor<f32>> = val.samples.iter().map(|s| Tensor::from_image(&s.pixels)).collect();
    let full = trained.model.logits(&images).unwrap();
    for (x, l) in images.iter().zip(&full) {
        assert_eq!(
            &trained.model.head_logits(&trained.model.pooled_features(x).unwrap()),
            l
        );
    }
}

#[test]
fn fifty_eight_samples_train_at_batch_sixteen() {
    let trained = finetune(&start(), &data(58, 5), None, &quick(FinetuneMode::EndToEnd, 2)).unwrap();
    assert!(trained.history.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn zero_lr_end_to_end_changes_nothing_but_the_head_draw() {
    let ckpt = start();
    let config = FinetuneConfig {
        lr: 0.0,
        ..quick(FinetuneMode::EndToEnd, 2)
    };
    let trained = finetune(&ckpt, &data(20, 1), None, &config).unwrap();
    let mut expected = init_backbone(&ckpt.config, config.seed, Some(&ckpt)).unwrap();
    expected.reset_head(config.seed);
    assert_eq!(trained.model.snapshot(), expected.snapshot());
}

#[test]
fn finetuning_is_deterministic() {
    let ckpt = start();
    let run = || {
        finetune(
            &ckpt,
            &data(24, 1),
            Some(&data(12, 2)),
            &quick(FinetuneMode::EndToEnd, 2),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.snapshot(), b.model.snapshot());
    assert_eq!(a.history, b.history);
}

#[test]
fn empty_labeled_subset_is_rejected() {
    let unlabeled = DatasetHandle::concat_unlabeled("u", &[&data(8, 1)]);
    assert!(matches!(
        finetune(&start(), &unlabeled, None, &quick(FinetuneMode::Linear, 1)),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn sweep_contracts() {
    let ckpt = start();
    let (train, val, test) = (data(24, 1), data(16, 2), data(16, 3));
    let base = quick(FinetuneMode::EndToEnd, 1);
    let (single, rows) = epoch_sweep(&ckpt, &train, Some(&val), Some(&test), &base, &[2]).unwrap();
    let direct = finetune(&ckpt, &train, Some(&val), &FinetuneConfig { epochs: 2, ..base }).unwrap();
    assert_eq!(single.model.snapshot(), direct.model.snapshot());
    assert_eq!(rows.len(), 1);

    let (best, rows) = epoch_sweep(&ckpt, &train, Some(&val), Some(&test), &base, &[1, 3]).unwrap();
    assert_eq!(rows.len(), 2);
    let max = rows
        .iter()
        .filter_map(|r| r.final_val)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.final_val_metric(), Some(max));
    assert!(epoch_sweep(&ckpt, &train, None, None, &base, &[]).is_err());
}

#[test]
fn linear_probe_learns_blob_presence() {
    let backbone = tiny(1);
    let ckpt = Model::random(&backbone, 0)
        .unwrap()
        .to_checkpoint(Provenance::random(0));
    let trained = finetune(
        &ckpt,
        &data(200, 1),
        Some(&data(100, 2)),
        &FinetuneConfig {
            lr: 0.5,
            ..quick(FinetuneMode::Linear, 30)
        },
    )
    .unwrap();
    let first = trained.history[0].train_loss;
    let last = trained.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn supervised_pretraining_records_lineage() {
    let generic = SynthParams::new(DomainTag::Generic, 16, 0.0, 1)
        .with_image_size(16)
        .generate()
        .unwrap();
    let ckpt = supervised_pretrain(&generic, &tiny(1), &quick(FinetuneMode::EndToEnd, 1)).unwrap();
    assert_eq!(ckpt.config.head_arity, 4);
    assert_eq!(
        ckpt.provenance.latest().unwrap().init,
        InitLineage::GenericSupervised {
            dataset: generic.name.clone()
        }
    );
}
