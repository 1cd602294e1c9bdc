//! Command-line pipeline around `daeobs`: load a system file, analyse its
//! pencils, verify or synthesize certificates, and simulate.

pub mod commands;
pub mod file;
