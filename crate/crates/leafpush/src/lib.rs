pub mod config;
pub mod formats;
pub mod bridge;
pub mod rollout;
pub mod commands;
