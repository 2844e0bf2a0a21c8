//! Minimal dense-tensor engine: 3D convolution, batch normalization, ReLU,
//! max pooling, linear, dropout and global average pooling, each with an
//! explicit backward pass; Adam; finite-difference gradient checking; and a
//! binary checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layer;
pub mod sequential;
pub mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layer::{Cache, Layer, LayerSpec, Mode};
pub use sequential::Sequential;
pub use tensor::Tensor;

/// Flat, ordered access to a model's trainable tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
