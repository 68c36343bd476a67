pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod reduce;
pub mod shape;
