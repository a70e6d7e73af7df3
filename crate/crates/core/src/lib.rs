pub mod config;
pub mod eval;
pub mod flow;
pub mod kinematics;
pub mod motion_data;
pub mod nn;
pub mod physics_cost;
pub mod pipeline;
pub mod rng;
pub mod runs;
pub mod safety_gate;
pub mod tensor;
pub mod tracker;
pub mod vae;
pub mod workflow;
pub mod wire;
