pub mod bench;
pub mod common;
pub mod dataset;
pub mod eigen;
pub mod learn;
pub mod quadrant;
pub mod simulate;
