//! File formats, experiment configuration, CSV output and the command line
//! for [`brainstack_core`].

pub mod cli;
pub mod config;
pub mod csvio;
pub mod formats;
