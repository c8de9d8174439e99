//! Dot-grid benchmark: a scene of identical dots, embedding training, k-means
//! decoding, and scoring against the ground truth.

mod kmeans;
mod metrics;
mod scene;
mod train;

pub use kmeans::{decode_kmeans, kmeans, KMeans, MAX_ITERS, TOLERANCE};
pub use metrics::{score, Score};
pub use scene::{disc_offsets, generate_scene, Scene, SceneConfig};
pub use train::{embed, embed_dense, loss_pixels, train, train_with, Mode, TrainConfig, TrainOutcome};
pub(crate) use train::{check_step, numeric_to_divergence};
