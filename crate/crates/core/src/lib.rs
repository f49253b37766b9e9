pub mod autodiff;
pub mod data;
pub mod eval;
pub mod model;
pub mod unlearn;
