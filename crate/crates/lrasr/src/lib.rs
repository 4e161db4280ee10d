//! File formats, training loops and the command-line front end around
//! `lrasr-core`.

pub mod arpa;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod wav;
