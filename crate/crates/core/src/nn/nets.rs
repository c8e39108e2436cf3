//! The three network shapes used by the pipeline.
//!
//! * [`ResnetGenerator`] — resolution-preserving residual FCN with a tanh
//!   output, used for both translation directions of the synthesize network.
//! * [`PatchDiscriminator`] — stride-2 conv stages, a 1-channel head,
//!   global average pooling and a sigmoid, one score in (0, 1) per image.
//! * [`SrGenerator`] — residual trunk followed by log2(factor) sub-pixel
//!   (conv + pixel shuffle) x2 upsampling stages and a tanh output.
//!
//! Each network exposes `forward` (with cache), `backward` (input gradient +
//! parameter gradients in [`Grads`]), and an inference-only `infer`.
//! Parameter tensors are visited in a fixed order shared by [`Grads`], the
//! Adam optimizer, checkpoints, and fingerprints.

use ndarray::{Array1, ArrayD, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::ops::*;
use super::Tensor;
use crate::error::{Error, Result};
use crate::util::Fingerprint;

const LRELU_SLOPE: f64 = 0.2;

/// Parameter gradients in the same order as [`ParamTensors::tensors`].
pub type Grads = Vec<ArrayD<f64>>;

/// Fixed-order access to a network's learnable tensors.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Content hash over names, shapes, and raw values in visit order.
    fn fingerprint(&self) -> String {
        let mut fp = Fingerprint::new();
        for (name, t) in self.tensors() {
            fp.push_str(&name);
            fp.push_usizes(t.shape());
            fp.push_f64s(t.iter().copied());
        }
        fp.finish()
    }

    /// Load values into the parameters by name; shapes must match.
    fn load_tensors(&mut self, values: &[(String, ArrayD<f64>)]) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                slots.len(),
                values.len()
            )));
        }
        for ((name, slot), (got_name, got)) in slots.iter_mut().zip(values) {
            if name != got_name {
                return Err(Error::Format(format!(
                    "tensor name mismatch: expected `{name}`, found `{got_name}`"
                )));
            }
            if slot.shape() != got.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` shape mismatch: {:?} vs {:?}",
                    slot.shape(),
                    got.shape()
                )));
            }
            slot.assign(got);
        }
        Ok(())
    }
}

fn push_conv<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, name: &str, conv: &'a Conv2d) {
    out.push((format!("{name}.w"), conv.w.view().into_dyn()));
    out.push((format!("{name}.b"), conv.b.view().into_dyn()));
}

fn push_conv_mut<'a>(
    out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    name: &str,
    conv: &'a mut Conv2d,
) {
    out.push((format!("{name}.w"), conv.w.view_mut().into_dyn()));
    out.push((format!("{name}.b"), conv.b.view_mut().into_dyn()));
}

fn push_conv_grads(out: &mut Grads, g: ConvGrads) {
    out.push(g.w.into_dyn());
    out.push(g.b.into_dyn());
}

// ---------------------------------------------------------------------------
// Residual generator (resolution preserving)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    pub width: usize,
    pub blocks: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 6,
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

struct ResBlockCache {
    c1: ConvCache,
    t: Tensor, // relu(c1(x))
    c2: ConvCache,
}

impl ResBlock {
    fn new(width: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            c1: Conv2d::new(width, width, 3, 1, 1, rng),
            c2: Conv2d::new(width, width, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, ResBlockCache) {
        let (u, c1) = self.c1.forward(x);
        let t = relu(&u);
        let (v, c2) = self.c2.forward(&t);
        (x + &v, ResBlockCache { c1, t, c2 })
    }

    /// Returns input gradient; pushes c1 then c2 grads.
    fn backward(&self, cache: &ResBlockCache, gy: &Tensor, grads: &mut Vec<ConvGrads>) -> Tensor {
        let (gt, g2) = self.c2.backward(&cache.c2, gy);
        let gu = relu_backward(&cache.t, &gt);
        let (gx, g1) = self.c1.backward(&cache.c1, &gu);
        grads.push(g1);
        grads.push(g2);
        gx + gy // skip connection
    }
}

/// Resolution-preserving residual generator, single channel in and out,
/// output bounded to [-1, 1] by tanh.
#[derive(Debug, Clone)]
pub struct ResnetGenerator {
    pub arch: GeneratorArch,
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    conv_out: Conv2d,
}

pub struct ResnetGeneratorCache {
    conv_in: ConvCache,
    h0: Tensor,
    blocks: Vec<ResBlockCache>,
    conv_out: ConvCache,
    y: Tensor,
}

impl ResnetGenerator {
    pub fn new(arch: GeneratorArch, rng: &mut ChaCha12Rng) -> Self {
        let conv_in = Conv2d::new(1, arch.width, 3, 1, 1, rng);
        let blocks = (0..arch.blocks).map(|_| ResBlock::new(arch.width, rng)).collect();
        let conv_out = Conv2d::new(arch.width, 1, 3, 1, 1, rng);
        Self {
            arch,
            conv_in,
            blocks,
            conv_out,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ResnetGeneratorCache) {
        let (u, conv_in) = self.conv_in.forward(x);
        let h0 = relu(&u);
        let mut h = h0.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&h);
            blocks.push(cache);
            h = next;
        }
        let (v, conv_out) = self.conv_out.forward(&h);
        let y = tanh(&v);
        (
            y.clone(),
            ResnetGeneratorCache {
                conv_in,
                h0,
                blocks,
                conv_out,
                y,
            },
        )
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.forward(x).0
    }

    /// Input gradient plus parameter gradients ordered as in `tensors()`.
    pub fn backward(&self, cache: &ResnetGeneratorCache, gy: &Tensor) -> (Tensor, Grads) {
        let gv = tanh_backward(&cache.y, gy);
        let (mut gh, g_out) = self.conv_out.backward(&cache.conv_out, &gv);
        let mut block_grads: Vec<ConvGrads> = Vec::with_capacity(self.blocks.len() * 2);
        for (b, c) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            gh = b.backward(c, &gh, &mut block_grads);
        }
        block_grads.reverse(); // restore forward order: [b0.c1, b0.c2, b1.c1, ...]
        // backward() pushed (c1, c2) per block, reversed over blocks, so after
        // the reverse above the order within each block is (c2, c1); swap.
        for pair in block_grads.chunks_mut(2) {
            pair.swap(0, 1);
        }
        let gu = relu_backward(&cache.h0, &gh);
        let (gx, g_in) = self.conv_in.backward(&cache.conv_in, &gu);

        let mut grads: Grads = Vec::new();
        push_conv_grads(&mut grads, g_in);
        for g in block_grads {
            push_conv_grads(&mut grads, g);
        }
        push_conv_grads(&mut grads, g_out);
        (gx, grads)
    }
}

impl ParamTensors for ResnetGenerator {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        push_conv(&mut out, "conv_in", &self.conv_in);
        for (i, b) in self.blocks.iter().enumerate() {
            push_conv(&mut out, &format!("block{i}.c1"), &b.c1);
            push_conv(&mut out, &format!("block{i}.c2"), &b.c2);
        }
        push_conv(&mut out, "conv_out", &self.conv_out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        push_conv_mut(&mut out, "conv_in", &mut self.conv_in);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_conv_mut(&mut out, &format!("block{i}.c1"), &mut b.c1);
            push_conv_mut(&mut out, &format!("block{i}.c2"), &mut b.c2);
        }
        push_conv_mut(&mut out, "conv_out", &mut self.conv_out);
        out
    }
}

// ---------------------------------------------------------------------------
// Patch discriminator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorArch {
    pub width: usize,
    pub stages: usize,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self {
            width: 64,
            stages: 4,
        }
    }
}

/// Convolutional discriminator: stride-2 stages with leaky ReLU, 1-channel
/// head, global mean, sigmoid. Output is strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub arch: DiscriminatorArch,
    stages: Vec<Conv2d>,
    head: Conv2d,
}

pub struct PatchDiscriminatorCache {
    stages: Vec<(ConvCache, Tensor)>, // conv cache + lrelu output
    head: ConvCache,
    head_dim: (usize, usize, usize, usize),
    d: Array1<f64>,
}

impl PatchDiscriminator {
    pub fn new(arch: DiscriminatorArch, rng: &mut ChaCha12Rng) -> Self {
        let mut stages = Vec::with_capacity(arch.stages);
        let mut in_c = 1;
        for i in 0..arch.stages {
            let out_c = (arch.width << i.min(3)).min(arch.width * 8);
            stages.push(Conv2d::new(in_c, out_c, 3, 2, 1, rng));
            in_c = out_c;
        }
        let head = Conv2d::new(in_c, 1, 3, 1, 1, rng);
        Self { arch, stages, head }
    }

    /// Per-sample scores in (0, 1).
    pub fn forward(&self, x: &Tensor) -> (Array1<f64>, PatchDiscriminatorCache) {
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let (u, cache) = conv.forward(&h);
            let a = lrelu(&u, LRELU_SLOPE);
            h = a.clone();
            stages.push((cache, a));
        }
        let (logits, head) = self.head.forward(&h);
        let head_dim = logits.dim();
        let pooled = global_mean(&logits);
        let d = sigmoid(&pooled);
        (
            d.clone(),
            PatchDiscriminatorCache {
                stages,
                head,
                head_dim,
                d,
            },
        )
    }

    pub fn infer(&self, x: &Tensor) -> Array1<f64> {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &PatchDiscriminatorCache, gd: &Array1<f64>) -> (Tensor, Grads) {
        let gpooled = sigmoid_backward(&cache.d, gd);
        let glogits = global_mean_backward(&gpooled, cache.head_dim);
        let (mut gh, g_head) = self.head.backward(&cache.head, &glogits);
        let mut stage_grads: Vec<ConvGrads> = Vec::with_capacity(self.stages.len());
        for (conv, (cache, a)) in self.stages.iter().zip(cache.stages.iter()).rev() {
            let gu = lrelu_backward(a, &gh, LRELU_SLOPE);
            let (gx, g) = conv.backward(cache, &gu);
            stage_grads.push(g);
            gh = gx;
        }
        stage_grads.reverse();
        let mut grads: Grads = Vec::new();
        for g in stage_grads {
            push_conv_grads(&mut grads, g);
        }
        push_conv_grads(&mut grads, g_head);
        (gh, grads)
    }
}

impl ParamTensors for PatchDiscriminator {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            push_conv(&mut out, &format!("stage{i}"), s);
        }
        push_conv(&mut out, "head", &self.head);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            push_conv_mut(&mut out, &format!("stage{i}"), s);
        }
        push_conv_mut(&mut out, "head", &mut self.head);
        out
    }
}

// ---------------------------------------------------------------------------
// SR generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrArch {
    pub width: usize,
    pub blocks: usize,
    /// Total upscale factor; must be a power of two (one x2 sub-pixel stage
    /// per doubling).
    pub factor: usize,
}

impl Default for SrArch {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 8,
            factor: 8,
        }
    }
}

impl SrArch {
    pub fn validate(&self) -> Result<()> {
        if self.factor < 2 || !self.factor.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "sr upscale factor must be a power of two >= 2 (got {})",
                self.factor
            )));
        }
        if self.width == 0 {
            return Err(Error::InvalidInput("sr width must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Fully-convolutional SR generator: works on any input size, output is
/// `factor` times larger on each axis and bounded to [-1, 1].
#[derive(Debug, Clone)]
pub struct SrGenerator {
    pub arch: SrArch,
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    ups: Vec<Conv2d>, // width -> 4*width, followed by pixel shuffle x2
    conv_out: Conv2d,
}

pub struct SrGeneratorCache {
    conv_in: ConvCache,
    h0: Tensor,
    blocks: Vec<ResBlockCache>,
    ups: Vec<(ConvCache, Tensor)>, // conv cache + relu(shuffled) output
    conv_out: ConvCache,
    y: Tensor,
}

impl SrGenerator {
    pub fn new(arch: SrArch, rng: &mut ChaCha12Rng) -> Result<Self> {
        arch.validate()?;
        let conv_in = Conv2d::new(1, arch.width, 3, 1, 1, rng);
        let blocks = (0..arch.blocks).map(|_| ResBlock::new(arch.width, rng)).collect();
        let n_up = arch.factor.trailing_zeros() as usize;
        let ups = (0..n_up)
            .map(|_| Conv2d::new(arch.width, 4 * arch.width, 3, 1, 1, rng))
            .collect();
        let conv_out = Conv2d::new(arch.width, 1, 3, 1, 1, rng);
        Ok(Self {
            arch,
            conv_in,
            blocks,
            ups,
            conv_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, SrGeneratorCache) {
        let (u, conv_in) = self.conv_in.forward(x);
        let h0 = relu(&u);
        let mut h = h0.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&h);
            blocks.push(cache);
            h = next;
        }
        let mut ups = Vec::with_capacity(self.ups.len());
        for conv in &self.ups {
            let (expanded, cache) = conv.forward(&h);
            let shuffled = pixel_shuffle(&expanded, 2);
            let a = relu(&shuffled);
            h = a.clone();
            ups.push((cache, a));
        }
        let (v, conv_out) = self.conv_out.forward(&h);
        let y = tanh(&v);
        (
            y.clone(),
            SrGeneratorCache {
                conv_in,
                h0,
                blocks,
                ups,
                conv_out,
                y,
            },
        )
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &SrGeneratorCache, gy: &Tensor) -> (Tensor, Grads) {
        let gv = tanh_backward(&cache.y, gy);
        let (mut gh, g_out) = self.conv_out.backward(&cache.conv_out, &gv);
        let mut up_grads: Vec<ConvGrads> = Vec::with_capacity(self.ups.len());
        for (conv, (conv_cache, a)) in self.ups.iter().zip(cache.ups.iter()).rev() {
            let gshuffled = relu_backward(a, &gh);
            let gexpanded = pixel_shuffle_backward(&gshuffled, 2);
            let (gx, g) = conv.backward(conv_cache, &gexpanded);
            up_grads.push(g);
            gh = gx;
        }
        up_grads.reverse();
        let mut block_grads: Vec<ConvGrads> = Vec::with_capacity(self.blocks.len() * 2);
        for (b, c) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            gh = b.backward(c, &gh, &mut block_grads);
        }
        block_grads.reverse();
        for pair in block_grads.chunks_mut(2) {
            pair.swap(0, 1);
        }
        let gu = relu_backward(&cache.h0, &gh);
        let (gx, g_in) = self.conv_in.backward(&cache.conv_in, &gu);

        let mut grads: Grads = Vec::new();
        push_conv_grads(&mut grads, g_in);
        for g in block_grads {
            push_conv_grads(&mut grads, g);
        }
        for g in up_grads {
            push_conv_grads(&mut grads, g);
        }
        push_conv_grads(&mut grads, g_out);
        (gx, grads)
    }
}

impl ParamTensors for SrGenerator {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        push_conv(&mut out, "conv_in", &self.conv_in);
        for (i, b) in self.blocks.iter().enumerate() {
            push_conv(&mut out, &format!("block{i}.c1"), &b.c1);
            push_conv(&mut out, &format!("block{i}.c2"), &b.c2);
        }
        for (i, u) in self.ups.iter().enumerate() {
            push_conv(&mut out, &format!("up{i}"), u);
        }
        push_conv(&mut out, "conv_out", &self.conv_out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        push_conv_mut(&mut out, "conv_in", &mut self.conv_in);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_conv_mut(&mut out, &format!("block{i}.c1"), &mut b.c1);
            push_conv_mut(&mut out, &format!("block{i}.c2"), &mut b.c2);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            push_conv_mut(&mut out, &format!("up{i}"), u);
        }
        push_conv_mut(&mut out, "conv_out", &mut self.conv_out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_rng;
    use ndarray::Array4;
    use rand::Rng;

    fn random_tensor(dim: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = derive_rng(seed, "nets-test");
        Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    fn check_grads_against_tensors<N: ParamTensors>(net: &N, grads: &Grads) {
        let tensors = net.tensors();
        assert_eq!(tensors.len(), grads.len(), "grad count mismatch");
        for ((name, t), g) in tensors.iter().zip(grads.iter()) {
            assert_eq!(t.shape(), g.shape(), "grad shape mismatch for {name}");
        }
    }

    /// Perturb parameter tensor `ti`, element `ei`, by `delta`.
    fn nudge<N: ParamTensors>(net: &mut N, ti: usize, ei: usize, delta: f64) {
        let mut tensors = net.tensors_mut();
        let flat = tensors[ti].1.as_slice_mut().expect("contiguous param");
        flat[ei] += delta;
    }

    #[test]
    fn resnet_generator_preserves_resolution_and_bounds() {
        let mut rng = derive_rng(1, "nets-test");
        let g = ResnetGenerator::new(GeneratorArch { width: 6, blocks: 2 }, &mut rng);
        let x = random_tensor((2, 1, 16, 16), 2);
        let y = g.infer(&x);
        assert_eq!(y.dim(), (2, 1, 16, 16));
        assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_outputs_lie_strictly_inside_unit_interval() {
        let mut rng = derive_rng(3, "nets-test");
        let d = PatchDiscriminator::new(DiscriminatorArch { width: 4, stages: 2 }, &mut rng);
        for seed in 0..5 {
            let x = random_tensor((3, 1, 8, 8), 40 + seed);
            let out = d.infer(&x);
            assert_eq!(out.len(), 3);
            assert!(out.iter().all(|&v| v > 0.0 && v < 1.0), "{out:?}");
        }
    }

    #[test]
    fn sr_generator_upscales_by_factor() {
        let mut rng = derive_rng(5, "nets-test");
        let g = SrGenerator::new(
            SrArch {
                width: 4,
                blocks: 1,
                factor: 8,
            },
            &mut rng,
        )
        .unwrap();
        for size in [8usize, 12] {
            let x = random_tensor((1, 1, size, size), 60 + size as u64);
            let y = g.infer(&x);
            assert_eq!(y.dim(), (1, 1, 8 * size, 8 * size));
            assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generator_weight_gradients_match_finite_differences() {
        let mut rng = derive_rng(7, "nets-test");
        let mut g = ResnetGenerator::new(GeneratorArch { width: 3, blocks: 1 }, &mut rng);
        let x = random_tensor((2, 1, 6, 6), 8);
        let target = random_tensor((2, 1, 6, 6), 9);
        let loss_of = |net: &ResnetGenerator| -> f64 {
            let y = net.infer(&x);
            (&y - &target).iter().map(|d| d * d).sum::<f64>()
        };
        let (y, cache) = g.forward(&x);
        let gy = (&y - &target) * 2.0;
        let (_, grads) = g.backward(&cache, &gy);
        check_grads_against_tensors(&g, &grads);

        let h = 1e-5;
        let n_tensors = g.tensors().len();
        let mut probe_rng = derive_rng(10, "nets-test");
        for _ in 0..12 {
            let ti = probe_rng.random_range(0..n_tensors);
            let len = g.tensors()[ti].1.len();
            let ei = probe_rng.random_range(0..len);
            nudge(&mut g, ti, ei, h);
            let lp = loss_of(&g);
            nudge(&mut g, ti, ei, -2.0 * h);
            let lm = loss_of(&g);
            nudge(&mut g, ti, ei, h);
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[ti].as_slice().unwrap()[ei];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "tensor {ti} elem {ei}: fd={fd} an={an} rel={rel}");
        }
    }

    #[test]
    fn discriminator_weight_and_input_gradients_match_finite_differences() {
        let mut rng = derive_rng(11, "nets-test");
        let mut d = PatchDiscriminator::new(DiscriminatorArch { width: 3, stages: 2 }, &mut rng);
        let x = random_tensor((2, 1, 8, 8), 12);
        // L = sum over samples of (d_i - 0.3)^2
        let loss_of = |net: &PatchDiscriminator, x: &Tensor| -> f64 {
            net.infer(x).iter().map(|&v| (v - 0.3) * (v - 0.3)).sum()
        };
        let (dout, cache) = d.forward(&x);
        let gd = dout.mapv(|v| 2.0 * (v - 0.3));
        let (gx, grads) = d.backward(&cache, &gd);
        check_grads_against_tensors(&d, &grads);

        let h = 1e-5;
        for idx in [[0usize, 0, 0, 0], [1, 0, 4, 5], [0, 0, 7, 2]] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let fd = (loss_of(&d, &xp) - loss_of(&d, &xm)) / (2.0 * h);
            let an = gx[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "input grad at {idx:?}: fd={fd} an={an}");
        }
        let mut probe_rng = derive_rng(13, "nets-test");
        for _ in 0..8 {
            let ti = probe_rng.random_range(0..d.tensors().len());
            let len = d.tensors()[ti].1.len();
            let ei = probe_rng.random_range(0..len);
            nudge(&mut d, ti, ei, h);
            let lp = loss_of(&d, &x);
            nudge(&mut d, ti, ei, -2.0 * h);
            let lm = loss_of(&d, &x);
            nudge(&mut d, ti, ei, h);
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[ti].as_slice().unwrap()[ei];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "tensor {ti} elem {ei}: fd={fd} an={an}");
        }
    }

    #[test]
    fn sr_generator_weight_gradients_match_finite_differences() {
        let mut rng = derive_rng(15, "nets-test");
        let mut g = SrGenerator::new(
            SrArch {
                width: 3,
                blocks: 1,
                factor: 4,
            },
            &mut rng,
        )
        .unwrap();
        let x = random_tensor((1, 1, 4, 4), 16);
        let target = random_tensor((1, 1, 16, 16), 17);
        let loss_of = |net: &SrGenerator| -> f64 {
            let y = net.infer(&x);
            (&y - &target).iter().map(|d| d * d).sum::<f64>()
        };
        let (y, cache) = g.forward(&x);
        let gy = (&y - &target) * 2.0;
        let (_, grads) = g.backward(&cache, &gy);
        check_grads_against_tensors(&g, &grads);

        let h = 1e-5;
        let mut probe_rng = derive_rng(18, "nets-test");
        for _ in 0..12 {
            let ti = probe_rng.random_range(0..g.tensors().len());
            let len = g.tensors()[ti].1.len();
            let ei = probe_rng.random_range(0..len);
            nudge(&mut g, ti, ei, h);
            let lp = loss_of(&g);
            nudge(&mut g, ti, ei, -2.0 * h);
            let lm = loss_of(&g);
            nudge(&mut g, ti, ei, h);
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[ti].as_slice().unwrap()[ei];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "tensor {ti} elem {ei}: fd={fd} an={an} rel={rel}");
        }
    }

    #[test]
    fn fingerprint_changes_with_any_weight() {
        let mut rng = derive_rng(19, "nets-test");
        let mut g = ResnetGenerator::new(GeneratorArch { width: 3, blocks: 1 }, &mut rng);
        let before = g.fingerprint();
        nudge(&mut g, 2, 0, 1e-9);
        assert_ne!(before, g.fingerprint());
    }

    #[test]
    fn load_tensors_round_trips_weights() {
        let mut rng = derive_rng(21, "nets-test");
        let g = ResnetGenerator::new(GeneratorArch { width: 3, blocks: 2 }, &mut rng);
        let dump: Vec<(String, ArrayD<f64>)> = g
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_owned()))
            .collect();
        let mut g2 = ResnetGenerator::new(GeneratorArch { width: 3, blocks: 2 }, &mut rng);
        assert_ne!(g.fingerprint(), g2.fingerprint());
        g2.load_tensors(&dump).unwrap();
        assert_eq!(g.fingerprint(), g2.fingerprint());
    }
}
