pub mod assignment;
pub mod bbox;
pub mod bev;
pub mod body_fit;
pub mod geometry;
pub mod io;
pub mod kalman;
pub mod metrics;
pub mod optim;
pub mod pose_refine;
pub mod tracker;
pub mod triangulation;
