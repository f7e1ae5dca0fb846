//! Provider access, file formats, pipelines and the command-line front end
//! for narrative coherence graphs.

pub mod cli;
pub mod commands;
pub mod config;
pub mod embedding;
pub mod gateway;
pub mod io;
pub mod params;
pub mod pipeline;
