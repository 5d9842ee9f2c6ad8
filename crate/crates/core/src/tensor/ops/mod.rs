pub mod conv;
mod elementwise;
mod linalg;
pub mod norm;
mod reduce;
pub mod resize;
mod shape;
pub mod spatial;

pub use elementwise::stable_sigmoid;
