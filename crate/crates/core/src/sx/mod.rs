//! One expert per task with unsupervised expert selection through k-means
//! prototypes of the task's features.

mod kmeans;
mod registry;

pub use kmeans::{inertia_of, kmeans, nearest, squared_distance, KMeansOptions, KMeansResult};
pub use registry::{
    expert_selection_accuracy, select_expert, sx_evaluate, sx_predict, sx_train_task, Extractor, ExpertRegistry,
    Routing, SxConfig, SxVariant,
};
