pub mod ckpt;
pub mod cli;
pub mod data;
pub mod dg;
pub mod error;
pub mod explain;
pub mod gabor;
pub mod nets;
pub mod nn;
pub mod pretext;
pub mod trainer;
