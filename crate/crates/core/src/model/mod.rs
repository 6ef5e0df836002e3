//! Generator, discriminator, flow pyramid and parameter storage.

pub mod discriminator;
pub mod generator;
pub mod params;
pub mod pyramid;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{AlignmentMode, Generator, GeneratorConfig, GeneratorOutput, StageSpec};
pub use params::{Bound, Param, ParamId, ParamRole, ParamStore};
pub use pyramid::FlowPyramid;
