pub mod augment;
pub mod config;
pub mod dataset;
pub mod detect_eval;
pub mod imaging;
pub mod mask_prop;
pub mod pipeline;
pub mod plot;
pub mod policy;
pub mod rcl;
pub mod region_match;
pub mod seed;
pub mod texture;
