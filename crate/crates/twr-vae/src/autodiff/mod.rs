//! Scalar reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! Three pieces: [`tensor::Tensor`] (shape + row-major storage), [`rng::RngState`]
//! (counter-based deterministic random numbers), and [`tape::Tape`] (a Wengert
//! list of primitive applications with exact vector-Jacobian products).
//!
//! The design goal is certifiable gradients rather than speed: every primitive
//! has a hand-written backward rule, and [`tape::grad_check`] compares the
//! analytic gradient of an arbitrary taped objective against central finite
//! differences, coordinate by coordinate.

pub mod rng;
pub mod tape;
pub mod tensor;
