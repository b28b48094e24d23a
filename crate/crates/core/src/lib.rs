//! Desk-scale laboratory comparing two paradigms for propagating regions of
//! interest between deformably related image pairs: conditional segmentation
//! (predict the propagated ROI directly) and a displacement-field-predicting
//! registration baseline (predict a dense displacement field, then warp).
//!
//! Everything runs on synthetic 2-d image pairs with known ground-truth
//! deformations, so accuracy, bias, and variance can be measured exactly.

pub mod biasvar;
pub mod diffcore;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod synth;
pub mod warp;
