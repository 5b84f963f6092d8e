pub mod group_crypto;
pub mod secure_agg;
pub mod privacy;
pub mod learner;
pub mod data;
pub mod seed;
pub mod simkernel;
pub mod protocol;
pub mod analysis;
