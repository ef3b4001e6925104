//! Desk-scale momentum-contrast transfer-learning laboratory.
//!
//! The crate is organized along the pipeline stages:
//!
//! - [`data`]: synthetic stand-in domains, image-folder ingestion, splits,
//!   label-fraction subsampling and augmented view pairs.
//! - [`backbone`]: encoder with named feature taps (`CV1`, `DB1`..`DB4`),
//!   projection and classifier heads, freezing and checkpoints.
//! - [`moco`]: InfoNCE over a FIFO key queue with a momentum key encoder.
//! - [`finetune`]: linear or end-to-end finetuning with binary cross-entropy.
//! - [`eval`]: AUROC, class-weighted AUROC, bootstrap percentile intervals.
//! - [`similarity`]: SVD-truncated subspaces and principal-angle scores
//!   between datasets.
//!
//! Everything that draws random numbers takes an explicit seed, and batch
//! gradients are reduced in a fixed order, so results do not depend on the
//! size of the rayon thread pool.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod moco;
pub mod optim;
pub mod seed;
pub mod similarity;

pub use backbone::{
    init_backbone, load_checkpoint, save_checkpoint, Architecture, Backbone, BackboneConfig, Checkpoint, InitLineage,
    LineageStep, Model, ParameterSnapshot, Provenance, Tap,
};
pub use data::{
    generate_synthetic_domain, load_image_folder, make_view_pair, split, subsample_labeled, AugmentationPolicy,
    DatasetHandle, DomainTag, ImageSample, SplitAssignment, SubsampleSpec,
};
pub use error::{Error, Result};
pub use eval::{
    aggregate_seeds, auroc, bootstrap_ci, weighted_auroc, ClassWeighting, MetricReport, PredictionSet, SeedAggregate,
};
pub use finetune::{bce_loss, epoch_sweep, finetune, FinetuneConfig, FinetuneMode, TrainedModel};
pub use moco::{enqueue_dequeue, infonce_loss, momentum_update, pretrain, pretrain_limited, MoCoConfig, MoCoState};
pub use optim::{CosineAnnealing, OptimizerConfig, OptimizerKind};
pub use similarity::{
    cca_similarity, extract_activations, pairwise_dataset_similarity, top_subspace, ActivationMatrix,
    SimilarityOptions, SimilarityReport, SubspaceBasis,
};
