pub mod advantage;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod consistency;
pub mod error;
pub mod flowcore;
pub mod nft;
pub mod numerics;
pub mod rewards;
pub mod toyworld;

pub use error::{Error, Result};
