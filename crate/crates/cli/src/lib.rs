//! Configuration, archive format and command implementations behind the
//! `cardiorom` binary.

pub mod archive;
pub mod config;
pub mod pipeline;
