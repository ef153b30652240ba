pub mod picard;
pub mod stats;
