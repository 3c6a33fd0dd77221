pub mod cells;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numkit;
pub mod optim;
pub mod train;
