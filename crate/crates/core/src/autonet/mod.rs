//! Reverse-mode autodiff, 3-D convolution kernels and the UNet backbone.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod unet;

pub use gradcheck::{grad_check, GradCheckReport, GradSample};
pub use graph::{Gradients, Graph, Var};
pub use unet::{build_unet, Activation, Fusion, LayerSpec, ParamSet, UNet, UNetConfig};
