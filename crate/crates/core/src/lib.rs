pub mod autogen;
pub mod clock;
pub mod config;
pub mod environment;
pub mod eval;
pub mod gateway;
pub mod practice;
pub mod runtime;
pub mod service;
pub mod toolkit;
