//! Files, run directories and the command-line front end for the
//! `rastg-core` skeleton assessment pipeline.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod annotations;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod runlog;
pub mod seqfile;

pub use error::{Error, Result};
