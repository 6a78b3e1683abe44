//! Zero-one law classification for integral functionals of one-dimensional
//! diffusions, with simulation-based verification of the time change that
//! links the functional to the explosion time of a second diffusion.

pub mod expr;
pub mod quad;
pub mod feller;
pub mod zeroone;
pub mod timechange;
pub mod mc;
pub mod cli;
