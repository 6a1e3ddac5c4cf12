pub mod error;
pub mod model;
pub mod solver;
pub mod datagen;
pub mod worker;
pub mod aggregator;
pub mod runtime;
