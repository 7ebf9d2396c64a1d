//! ChoiceNet architecture: the multi-branch module, densely wired blocks,
//! the full classifier, residual/dense baselines and parameter counting.

mod block;
mod config;
mod module;
mod network;
mod presets;
mod reference;

pub use block::{module_input_channels, ChoiceBlock};
pub use config::{ArchKind, ChoiceModuleConfig, ModelConfig, SkipMode, NUM_BLOCKS};
pub use module::{output_layout, BranchConv, BranchPath, ChoiceModule, ModuleOutputs, ModulePart, PartSlice};
pub use network::{count_parameters, shape_trace, LabeledNetwork, Network, ParamCount, Stage, StageShape};
pub use presets::{preset, preset_names, preset_source};
pub use reference::{DenseBlock, ResNetBlock};
