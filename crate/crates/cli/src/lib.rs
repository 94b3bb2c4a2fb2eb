//! Command-line tools and the railway-crossing benchmark.

pub mod bench;
pub mod railway;
