//! Query-based dense object detection on synthetic crowded scenes: autodiff
//! tensors, box geometry, bipartite assignment, suppression baselines,
//! losses, query de-homogenization, a toy detector and evaluation metrics.

pub mod assign;
pub mod boxgeom;
pub mod dcg;
pub mod detector;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod scenes;
pub mod suppress;
pub mod tensor;

pub use assign::{hungarian, Assignment, CostMatrix, CostWeights};
pub use boxgeom::{giou, iou, BBox};
pub use dcg::{DcgSettings, GateDirection, Query};
pub use detector::{Model, ModelConfig, StageOutputs, TrainConfig};
pub use eval::{EvalSettings, MetricsReport};
pub use scenes::{Scene, SceneGenParams};
pub use suppress::Detection;
pub use tensor::{DiffTensor, ParamStore, Tape, Var};
