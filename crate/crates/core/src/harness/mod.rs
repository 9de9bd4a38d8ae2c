//! Experiment drivers shared by the command line and the acceptance suite.

pub mod accuracy;
pub mod bench;
pub mod check;
pub mod gradcheck;
