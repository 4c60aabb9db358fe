//! Network building blocks and the optimizer.

mod adam;
mod conv;
mod kmeans;
mod mlp;
mod rbf;

pub use adam::{Adam, Moments};
pub use conv::{BoundConv, Conv2d};
pub use kmeans::{kmeans, KMeans};
pub(crate) use kmeans::sq_dist;
pub use mlp::{Activation, BoundMlp, Dense, Mlp};
pub use rbf::{BoundRbf, RbfNet};
