//! Minimal f64 conv-net layer with hand-written backward passes.
//!
//! The two GANs in this crate are small fully-convolutional networks, so
//! instead of pulling in a framework the layers are implemented directly:
//! each forward returns the activations a backward pass needs, and each
//! backward returns the gradient with respect to the input plus parameter
//! gradients. Everything is f64 so analytic gradients can be checked against
//! central finite differences at tight tolerances, and everything is
//! sequential so training histories replay bit-exactly under a fixed seed.
//!
//! Layout convention: tensors are `(batch, channels, height, width)`.

mod adam;
mod nets;
mod ops;

pub use adam::Adam;
pub use nets::{
    DiscriminatorArch, GeneratorArch, Grads, ParamTensors, PatchDiscriminator, ResnetGenerator,
    SrArch, SrGenerator,
};
pub use ops::{
    global_mean, global_mean_backward, lrelu, lrelu_backward, pixel_shuffle,
    pixel_shuffle_backward, relu, relu_backward, sigmoid, sigmoid_backward, tanh, tanh_backward,
    Conv2d, ConvCache, ConvGrads,
};

use ndarray::{Array2, Array4, ArrayView2};

/// `(batch, channels, height, width)` activation tensor.
pub type Tensor = Array4<f64>;

/// Stack single-channel f32 images into a batch tensor.
pub fn batch_from_images(images: &[ArrayView2<'_, f32>]) -> Tensor {
    assert!(!images.is_empty(), "empty batch");
    let (h, w) = images[0].dim();
    let mut t = Array4::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (h, w), "ragged batch");
        for r in 0..h {
            for c in 0..w {
                t[[i, 0, r, c]] = img[[r, c]] as f64;
            }
        }
    }
    t
}

/// Stack single-channel f64 images into a batch tensor.
pub fn batch_from_images_f64(images: &[ArrayView2<'_, f64>]) -> Tensor {
    assert!(!images.is_empty(), "empty batch");
    let (h, w) = images[0].dim();
    let mut t = Array4::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (h, w), "ragged batch");
        t.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(img);
    }
    t
}

/// View sample `i` of a single-channel batch as a 2D image.
pub fn image_of(t: &Tensor, i: usize) -> ArrayView2<'_, f64> {
    t.index_axis(ndarray::Axis(0), i)
        .into_shape_with_order((t.dim().2, t.dim().3))
        .expect("single-channel tensor")
}

/// Copy sample `i` of a single-channel batch out as an owned f32 image.
pub fn image_to_f32(t: &Tensor, i: usize) -> Array2<f32> {
    let v = image_of(t, i);
    v.mapv(|x| x as f32)
}
