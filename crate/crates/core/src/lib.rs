pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod cnnpp;
pub mod dataio;
pub mod dif;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod lgf;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{DialError, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::{Image, LabelMap, Tensor, IGNORE_LABEL, NUM_CLASSES};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Model32 = trainer::Model<f32>;
pub type Model64 = trainer::Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
