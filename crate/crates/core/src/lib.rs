pub mod binio;
pub mod body_model;
pub mod cli;
pub mod cuboid;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod obj;
pub mod optim;
pub mod sapd;
pub mod skeleton;
pub mod smoother;
pub mod synth;
pub mod transfer;
