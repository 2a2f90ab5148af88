//! Unified embeddings from vertical specialists.
//!
//! Specialist embedding networks are trained per vertical group with a
//! triplet hinge loss and online semi-hard mining ([`triplet`]). Groups are
//! formed greedily so that merging training data never costs a vertical more
//! than a set amount of top-1 accuracy, and a single unified network is then
//! regressed onto the specialists' outputs ([`unify`]). [`retrieval`] holds
//! the top-k accuracy protocol used to compare them, and [`analysis`] the
//! embedding-space separation statistics.
//!
//! Inputs are synthetic feature vectors from [`synth`]; the networks are small
//! MLPs with hand-written backpropagation ([`net`]).

pub mod analysis;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod model_io;
pub mod net;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod triplet;
pub mod unify;

pub use analysis::{occupancy, pca_project, OccupancyReport, Projection};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport, LossKind};
pub use linalg::Matrix;
pub use model_io::{load_model, save_model};
pub use net::{Activation, Embedder, EmbeddingNet, ForwardCache, GradSet, NetConfig};
pub use optim::Sgd;
pub use retrieval::{compare_reports, knn, top_k_accuracy, EvalSplit, RetrievalReport};
pub use synth::{add_label_noise, generate, load_dataset, save_dataset, Dataset, GenSpec, Item, Split, VerticalSet};
pub use triplet::{
    distance, mine_semi_hard, sample_batch, train_specialist, train_triplet, triplet_loss, TrainHistory, Triplet,
    TripletConfig,
};
pub use unify::{
    compute_targets, distill_loss, greedy_combine, train_unified, CombineReport, DistillConfig, SpecialistRegistry,
    TargetEmbeddingSet, VerticalPartition,
};
