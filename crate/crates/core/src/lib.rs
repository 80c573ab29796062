pub mod config;
pub mod data;
pub mod eval;
pub mod lin_attn;
pub mod maze;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod selfcheck;
pub mod train;
