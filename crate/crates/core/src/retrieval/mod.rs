//! Composed-query inference, brute-force cosine ranking and the metric
//! suite.

mod index;
mod metrics;
mod query;

pub use index::{write_results_csv, GalleryIndex, RankedResult};
pub use metrics::{average_precision_at_k, map_at_k, modality_gap, recall_at_k, Metrics, Truths};
pub use query::{PromptTemplate, QueryComposer, COND_SLOT};
