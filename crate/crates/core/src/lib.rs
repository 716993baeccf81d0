pub mod harness;
pub mod metrics;
pub mod preprocess;
pub mod si_codec;
pub mod synthgen;
pub mod tinynet;
pub mod volume_store;
