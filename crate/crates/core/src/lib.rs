pub mod boosting;
pub mod correction;
pub mod domain;
pub mod eval;
pub mod ingest;
pub mod pipeline;
pub mod ridge;
pub mod synth;
pub mod transfer;
