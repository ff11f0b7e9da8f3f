pub mod augment;
pub mod cli;
pub mod evalkit;
pub mod eyegen;
pub mod kv;
pub mod losses;
pub mod nets;
pub mod pipeline;
pub mod tensorcore;
