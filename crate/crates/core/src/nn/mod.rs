//! Dense approximators with analytic gradients.

mod adam;
pub mod checkpoint;
mod gaussian;
mod mlp;
mod spectral;

pub use adam::Adam;
pub use checkpoint::{Blob, Section};
pub use gaussian::GaussianHead;
pub use mlp::{Activation, Cache, GradBuffer, Mlp, TangentCache};
pub use spectral::{spectral_normalize, Matrix, PowerIterState};
