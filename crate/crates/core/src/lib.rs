//! Two-party private inference with garbled-circuit ReLUs.

pub mod circuit;
pub mod faultmodel;
pub mod field;
pub mod garble;
pub mod nn;
pub mod protocol;
pub mod sharing;
pub mod transport;
