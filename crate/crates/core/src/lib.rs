#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod actuation;
pub mod arm;
pub mod geom;
pub mod plant;
pub mod render;
pub mod env;
pub mod reward;
pub mod nn;
pub mod ppo;
pub mod eval;
