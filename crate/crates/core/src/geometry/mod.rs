//! Point clouds, procedural shapes, and patch construction.

mod cloud;
mod dataset;
mod sampling;
mod shapes;

pub use cloud::{normalize, normalize_with_transform, Normalization, Point, PointCloud};
pub use dataset::{DataSplits, Dataset, DATASET_MAGIC, DATASET_VERSION, TRAIN_FILE, VAL_FILE};
pub use sampling::{farthest_point_sample, farthest_point_sample_from, knn_group, patchify, PatchSet};
pub use shapes::{generate_corpus, generate_shape, JITTER_CLIP, JITTER_SIGMA, NUM_SHAPES, SCALE_RANGE, SHAPE_NAMES};
