pub mod cli;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod preprocess;
pub mod qp;
pub mod synth;
