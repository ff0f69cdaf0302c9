//! Dense tensors, seeded randomness, histograms, nonlinearities and tensor I/O.

pub mod histogram;
pub mod io;
pub mod nonlinear;
pub mod rng;
pub mod tensor;

pub use histogram::Histogram;
pub use io::{load_tensor, save_tensor};
pub use nonlinear::{gelu, gelu_scalar, layernorm_columns, softmax_rows};
pub use rng::{normal_tensor, sub_seed, uniform_vector, Rng, RNG_ALGORITHM};
pub use tensor::{matmul, Tensor2D};
