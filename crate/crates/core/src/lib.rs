pub mod autodiff;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod scene;
pub mod scenegen;
pub mod train;
