//! Self-masking projection: noise, the projection module φ and its training
//! loop.

mod noise;
mod projection;
mod trainer;

pub use noise::{norm_samples, norm_stats, sample_noise, NoiseKind, NormStats};
pub use projection::{ProjectionConfig, ProjectionModule};
pub use trainer::{
    prepare_corpus, smp_step, train, CorpusLine, HistoryRow, PreparedCorpus, SmpExample, Supervision, TrainConfig,
    TrainReport,
};
