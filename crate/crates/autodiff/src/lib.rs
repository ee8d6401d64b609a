//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is deliberately small: elementwise arithmetic, scalar ops,
//! matrix products, stride-1 convolution, pooling, `relu`, `sigmoid`,
//! reductions and squared error. Anything else can be attached through
//! [`Function`] with a hand-written backward rule.
//!
//! ```
//! use cprl_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

pub mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod kernels;
pub mod spectral;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Function, Graph, Var};
pub use spectral::{
    largest_singular_value, spectral_normalize, spectral_normalize_converged, PowerIteration,
};
pub use tensor::{sigmoid, signum0, Tensor};
