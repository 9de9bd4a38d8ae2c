//! Dense FP64 linear algebra, fast Walsh–Hadamard transforms and seeded sampling.

mod hadamard;
pub(crate) mod kernels;
mod matrix;
mod random;

pub use hadamard::{fwht, fwht_in_place, random_dh_transform, DHTransform};
pub use matrix::{matmul, rmse, row_max, row_sum, Matrix};
pub use random::{sample_normal_matrix, sample_outlier_matrix, SeededRng, Stream};
