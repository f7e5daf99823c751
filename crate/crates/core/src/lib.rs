#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advisor;
pub mod bench;
pub mod config;
pub mod continual;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kernel_attention;
pub mod model;
pub mod optim;
pub mod pointcloud;
pub mod rpp;
pub mod seed;
pub mod synthgen;

pub use error::{Error, ErrorKind, Result};
