pub mod exact;
pub mod oracles;
pub mod properties;
