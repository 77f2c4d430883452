pub mod analysis;
pub mod cli;
pub mod controller;
pub mod environment;
pub mod robot;
pub mod simulator;
pub mod spatial;
