pub mod checkpoint;
pub mod nifti;
pub mod tsr;
pub mod volume;
