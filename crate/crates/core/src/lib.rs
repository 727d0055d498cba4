pub mod agent;
pub mod catalog;
pub mod env;
pub mod harness;
pub mod llm;
pub mod metrics;
pub mod persona;
pub mod prompts;
pub mod repair;
pub mod seed;
pub mod session_log;
pub mod synth;
pub mod text;
