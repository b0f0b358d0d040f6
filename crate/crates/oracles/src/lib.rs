//! Independent reference computations for checking the salguide engine.

pub mod gradcheck;
pub mod reference;
pub mod stats;
