//! Hierarchical part-level 3D scene understanding without the network.
//!
//! The crate covers everything around a sparse segmentation backbone: part
//! taxonomies and their pruning, 9DoF/ICP alignment of CAD shapes, sparse
//! voxel grids with majority-vote label transfer, the multi-level
//! cross-entropy and instance-embedding loss kernels (with analytic
//! gradients), flat/top-down/bottom-up hierarchical inference, mean-shift
//! instance extraction and the semantic/instance evaluation protocol.
//!
//! Every stage is deterministic so that the [`synth`] fixtures can stand in
//! for real scans end to end.

pub mod align;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod infer;
pub mod instances;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod taxonomy;
pub mod voxelgrid;

pub use align::{AffineTransform, IcpParams, IcpScore, PointCloud, Transform9};
pub use error::{Error, Result};
pub use instances::{Instance, InstanceSet, MeanShiftParams};
pub use losses::{DiscriminativeParams, EmbeddingField, LevelWeights, ScoreField, SepParams};
pub use metrics::{AccuracyMode, ConfusionMatrix, InstanceReport, SemanticReport};
pub use taxonomy::{NodeId, PartNode, PartTaxonomy, PruneRelabel, TaxonomyError};
pub use voxelgrid::{LabelField, LabeledMesh, VoxelEntry, VoxelKey, VoxelScene};
