pub mod adapt;
pub mod audio;
pub mod conmix;
pub mod corruption;
pub mod error;
pub mod features;
pub mod harness;
pub mod nn;
pub mod seed;
pub mod models;
