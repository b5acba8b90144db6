pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod desk;
pub mod error;
pub mod filtering;
pub mod geometry;
pub mod image_tensor;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipelines;
pub mod prompts;
pub mod training;

pub use error::{Error, Result};
pub use backbone::{DirImageStore, EmptyStore, ImageStore, MemoryImageStore};
pub use image_tensor::ImageTensor;
