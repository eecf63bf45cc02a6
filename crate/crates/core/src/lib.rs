//! Retrieval-augmented cache adaptation for embedding classifiers.
//!
//! The crate covers exact top-K retrieval (text-to-image and image-to-image),
//! K-shot feature caches with exponentially sharpened logits, zero-shot /
//! cache / ensemble heads with cache fine-tuning, synthetic unit-sphere worlds
//! with known geometry, numeric checks of the risk bounds that relate these
//! heads to one another, and a config-driven experiment runner.

pub mod adaptation;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod retrieval;
pub mod rng;
pub mod sphere;
pub mod store;
pub mod theory;
pub mod world;

pub use adaptation::{
    ce_risk, count_errors, cross_entropy, cross_entropy_grad, empirical_risk, ensemble_logits, exp_scale,
    mixture_cache, predict, ret_logits, theory_logits, zero_one_risk, zoc_logits, Classifier, EnsembleHead,
    EnsembleWeights, Head, LabeledSample, LogitVector, RetrievalHead, ZeroShotHead,
};
pub use embedding::{chordal_distance, cosine, normalize, ClassId, EmbeddingStore, UnitVector};
pub use error::{Error, Result};
pub use experiment::{run_experiment, run_verify, Arm, ArmHead, ExperimentConfig, ResultRow, SummaryRow};
pub use finetune::{finetune_cache, EnsembleObjective, FinetuneConfig, FinetuneOutcome};
pub use retrieval::{
    build_cache, class_averages, materialize_v, oracle_cache, oracle_retrieve, top_k, Cache, ClassAverages,
    ClassMatrix, Neighbor, QuerySet, RetrievalMode,
};
pub use rng::SeedTree;
pub use store::{read_store, write_store};
pub use theory::{theory_report, BoundCheck, TheoryParams, TheoryReport};
pub use world::{make_prototypes, make_world, sample_class_point, sample_target_set, TauMode, World, WorldConfig};
