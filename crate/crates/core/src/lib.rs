//! Simulation toolkit for a fleet of CXL-attached GDDR6 processing-in-memory
//! devices running transformer inference.

pub mod bf16;
pub mod compiler;
pub mod config;
pub mod funcsim;
pub mod isa;
pub mod mapper;
pub mod timesim;
pub mod energycost;
