pub mod numkernel;
pub mod dataio;
pub mod m2se;
pub mod objectives;
pub mod evaluator;
pub mod trainer;
