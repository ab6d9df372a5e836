pub mod eval;
pub mod export;
pub mod selftest;
pub mod train;
