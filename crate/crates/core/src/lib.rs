//! Sliding-window stereo visual odometry with sun-direction orientation
//! correction.

pub mod camera;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod montecarlo;
pub mod pipeline;
pub mod solver;
pub mod sun;
pub mod tracks;
