//! Network layers and the classification and segmentation architectures.

mod build;
pub mod layers;
mod model;
mod spec;

pub use build::{
    build_classifier, build_segmenter, interpconv_block, point_inception, Branch, ClassifierConfig,
    ModuleConfig, SegmenterConfig,
};
pub use model::{Geometry, Mode, Model, Param, Pass, Sampling};
pub use spec::{sampled_count, LayerKind, LayerSpec, Level, NetworkSpec, NodeShape, Task};
