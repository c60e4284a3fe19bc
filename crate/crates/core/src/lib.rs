pub mod backend;
pub mod correctness;
pub mod datamodel;
pub mod prompts;
pub mod confidence;
pub mod methods;
pub mod metrics;
pub mod crdpo;
pub mod cli;
