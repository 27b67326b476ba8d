pub mod tensor;
pub mod layout;
pub mod sampling;
pub mod constraints;
pub mod image;
pub mod model;
pub mod scheduler;
pub mod guidance;
pub mod eval;
