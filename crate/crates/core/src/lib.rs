//! Multi-task 3D nodule detection and segmentation on volumetric scans.

pub mod backbone;
pub mod evaluator;
pub mod geometry3d;
pub mod heads;
pub mod model;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod trainer;
pub mod volume_store;
