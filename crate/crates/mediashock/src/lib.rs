//! Files, synthetic worlds, parallel drivers, the command-line pipeline and
//! the HTTP service around `mediashock-core`.

pub mod binfmt;
pub mod cli;
pub mod exec;
pub mod io;
pub mod oracle;
pub mod pipeline;
pub mod service;
pub mod synth;
