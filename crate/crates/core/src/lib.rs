pub mod bures;
pub mod error;
pub mod hypernym;
pub mod mds;
pub mod optim;
pub mod sampling;
pub mod store;
pub mod viz;
pub mod wordvec;

pub use bures::{EllipticalPoint, Family, GradientPair, MapFormula, SqrtPair, TransportMap};
pub use error::{EllError, Result};
pub use store::{Collection, EmbeddingStore, Side};
