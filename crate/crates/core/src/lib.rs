//! Gaussian-splatting visual-inertial SLAM.

pub mod gaussian_map;
pub mod geometry;
pub mod image;
pub mod raster;
pub mod losses;
pub mod gradcheck;
pub mod imu;
pub mod optim;
pub mod dataset;
pub mod tracker;
pub mod niqe;
pub mod keyframing;
pub mod mapper;
pub mod eval;
pub mod config;
pub mod pipeline;
