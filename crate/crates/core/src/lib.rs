pub mod nn;
pub mod tensor;
pub mod bank;
pub mod relation;
pub mod reasoner;
pub mod synth;
pub mod detector;
pub mod harness;
