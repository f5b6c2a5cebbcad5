pub mod codec;
pub mod config;
pub mod crypto;
pub mod envelope;
pub mod fixtures;
pub mod geo;
pub mod lbs;
pub mod message;
pub mod overlay;
pub mod peer;
pub mod scenarios;
pub mod simnet;
pub mod tickets;
