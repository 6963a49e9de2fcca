pub mod agent;
pub mod analysis;
pub mod cli;
pub mod clustering;
pub mod features;
pub mod metrics;
pub mod oracle;
pub mod pool;
pub mod rng;
pub mod training;
