//! Small residual-style convolutional denoiser with a hand-written backward pass.
//!
//! Complex channels are split into real feature planes (`re_0, im_0, re_1, ...`),
//! passed through 3x3 zero-padded convolutions with ReLU between layers and a
//! linear final layer, then re-paired into complex channels.

use num_complex::Complex64;
use rand::Rng;

use crate::domain::{ComplexImage, MultiChannelImage, Rng64};
use crate::error::{Error, Result};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
pub const FINAL_LAYER_SCALE: f64 = 0.1;

/// Feature widths `[in, hidden.., out]`; layer `l` maps `widths[l] -> widths[l + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    widths: Vec<usize>,
}

impl ChannelPlan {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidPlan("a plan needs at least one layer".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidPlan(format!("zero-width layer in {widths:?}")));
        }
        Ok(Self { widths })
    }

    /// `layers` convolutions on `channels` complex channels, `features` wide inside.
    pub fn complex(channels: usize, layers: usize, features: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidPlan("zero-layer plan".into()));
        }
        let mut widths = vec![2 * channels];
        widths.extend(std::iter::repeat_n(features, layers - 1));
        widths.push(2 * channels);
        Self::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    /// `[c_out][c_in][3][3]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            weights: vec![0.0; c_out * c_in * TAPS],
            bias: vec![0.0; c_out],
        }
    }

    fn w(&self, co: usize, ci: usize) -> &[f64] {
        let o = (co * self.c_in + ci) * TAPS;
        &self.weights[o..o + TAPS]
    }
}

/// Parameters of one denoiser (`theta^t`). Gradients use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    layers: Vec<ConvLayer>,
}

impl DenoiserParams {
    pub fn zeros(plan: &ChannelPlan) -> Self {
        Self {
            layers: plan.widths.windows(2).map(|w| ConvLayer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn from_layers(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidPlan("no layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.len() != layer.c_in * layer.c_out * TAPS || layer.bias.len() != layer.c_out {
                return Err(Error::InvalidPlan(format!("layer {l} has inconsistent sizes")));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidPlan(format!("layer {l} has non-finite parameters")));
            }
            if l > 0 && layers[l - 1].c_out != layer.c_in {
                return Err(Error::InvalidPlan(format!("layer {l} input width mismatch")));
            }
        }
        Ok(Self { layers })
    }

    pub fn plan(&self) -> ChannelPlan {
        let mut widths = vec![self.layers[0].c_in];
        widths.extend(self.layers.iter().map(|l| l.c_out));
        ChannelPlan { widths }
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        self.write_flat(&mut v);
        v
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrite from a flat slice; returns the number of values consumed.
    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut o = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&src[o..o + n]);
            o += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&src[o..o + n]);
            o += n;
        }
        o
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0))
    }
}

/// Glorot-uniform kernels, zero biases, final layer scaled by [`FINAL_LAYER_SCALE`].
pub fn init_params(plan: &ChannelPlan, rng: &mut Rng64) -> Result<DenoiserParams> {
    if plan.layers() == 0 {
        return Err(Error::InvalidPlan("zero-layer plan".into()));
    }
    let last = plan.layers() - 1;
    let layers = plan
        .widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (c_in, c_out) = (w[0], w[1]);
            let limit = (6.0 / ((c_in + c_out) * TAPS) as f64).sqrt();
            let scale = if l == last { FINAL_LAYER_SCALE } else { 1.0 };
            ConvLayer {
                c_in,
                c_out,
                weights: (0..c_in * c_out * TAPS).map(|_| rng.gen_range(-limit..limit) * scale).collect(),
                bias: vec![0.0; c_out],
            }
        })
        .collect();
    Ok(DenoiserParams { layers })
}

/// Zero-padded 3x3 correlation, `out[co] = b[co] + sum_ci w[co,ci] * in[ci]`.
fn conv_forward(layer: &ConvLayer, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; layer.c_out * n];
    for co in 0..layer.c_out {
        let o = &mut out[co * n..(co + 1) * n];
        o.fill(layer.bias[co]);
        for ci in 0..layer.c_in {
            let src = &input[ci * n..(ci + 1) * n];
            let k = layer.w(co, ci);
            for (t, &wv) in k.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let dy = (t / KERNEL) as isize - 1;
                let dx = (t % KERNEL) as isize - 1;
                accumulate_shifted(o, src, h, w, dy, dx, wv);
            }
        }
    }
    out
}

/// `dst[y, x] += a * src[y + dy, x + dx]` wherever both are in bounds.
fn accumulate_shifted(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, a: f64) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (u, v) in d.iter_mut().zip(s) {
            *u += a * v;
        }
    }
}

/// `sum_{y,x} g[y, x] * src[y + dy, x + dx]`.
fn correlate_shifted(g: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize) as usize;
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &g[y * w + x0..y * w + x1];
        let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// Returns (grad_input, grad_layer).
fn conv_backward(layer: &ConvLayer, input: &[f64], grad_out: &[f64], h: usize, w: usize) -> (Vec<f64>, ConvLayer) {
    let n = h * w;
    let mut gi = vec![0.0; layer.c_in * n];
    let mut gl = ConvLayer::zeros(layer.c_in, layer.c_out);
    for co in 0..layer.c_out {
        let g = &grad_out[co * n..(co + 1) * n];
        gl.bias[co] = g.iter().sum();
        for ci in 0..layer.c_in {
            let src = &input[ci * n..(ci + 1) * n];
            let k = layer.w(co, ci);
            let base = (co * layer.c_in + ci) * TAPS;
            for (t, &kt) in k.iter().enumerate() {
                let dy = (t / KERNEL) as isize - 1;
                let dx = (t % KERNEL) as isize - 1;
                gl.weights[base + t] = correlate_shifted(g, src, h, w, dy, dx);
                if kt != 0.0 {
                    // adjoint of the shift: scatter back with the opposite offset
                    accumulate_shifted(&mut gi[ci * n..(ci + 1) * n], g, h, w, -dy, -dx, kt);
                }
            }
        }
    }
    (gi, gl)
}

/// Saved activations of one forward pass.
#[derive(Clone, Debug)]
pub struct DenoiserTape {
    widths: Vec<usize>,
    shape: (usize, usize),
    /// Input planes of every layer (post-ReLU for hidden layers).
    inputs: Vec<Vec<f64>>,
}

impl DenoiserTape {
    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Number of stored `f64` values.
    pub fn stored_values(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum()
    }
}

/// Forward pass on real feature planes (`plan.input_width()` planes of `h * w`).
pub fn forward_planes(params: &DenoiserParams, planes: Vec<f64>, h: usize, w: usize) -> Result<(Vec<f64>, DenoiserTape)> {
    let plan = params.plan();
    if planes.len() != plan.input_width() * h * w {
        return Err(Error::ShapeMismatch(format!(
            "denoiser expects {} planes of {h}x{w}, got {} values",
            plan.input_width(),
            planes.len()
        )));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut cur = planes;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = conv_forward(layer, &cur, h, w);
        if l < last {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        inputs.push(cur);
        cur = z;
    }
    Ok((
        cur,
        DenoiserTape {
            widths: plan.widths,
            shape: (h, w),
            inputs,
        },
    ))
}

/// Reverse pass on real planes; returns (parameter gradients, input-plane gradient).
pub fn backward_planes(params: &DenoiserParams, tape: &DenoiserTape, grad_out: &[f64]) -> Result<(DenoiserParams, Vec<f64>)> {
    let (h, w) = tape.shape;
    let plan = params.plan();
    if plan.widths != tape.widths || tape.inputs.len() != params.layers.len() {
        return Err(Error::StaleTape(format!(
            "tape widths {:?} vs params {:?}",
            tape.widths, plan.widths
        )));
    }
    if grad_out.len() != plan.output_width() * h * w {
        return Err(Error::StaleTape("output gradient does not match tape shape".into()));
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut g = grad_out.to_vec();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let input = &tape.inputs[l];
        let (mut gi, gl) = conv_backward(layer, input, &g, h, w);
        grads.push(gl);
        if l > 0 {
            // input of layer l is relu(z_{l-1}); relu' = [z > 0] = [input > 0]
            for (v, &a) in gi.iter_mut().zip(input) {
                if a <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        g = gi;
    }
    grads.reverse();
    Ok((DenoiserParams { layers: grads }, g))
}

pub fn to_planes(x: &MultiChannelImage) -> Vec<f64> {
    let n = x.height() * x.width();
    let mut planes = vec![0.0; 2 * x.count() * n];
    for (c, ch) in x.channels().iter().enumerate() {
        let (re, im) = planes[2 * c * n..(2 * c + 2) * n].split_at_mut(n);
        for ((r, i), z) in re.iter_mut().zip(im.iter_mut()).zip(ch.data()) {
            *r = z.re;
            *i = z.im;
        }
    }
    planes
}

pub fn from_planes(planes: &[f64], channels: usize, h: usize, w: usize) -> MultiChannelImage {
    let n = h * w;
    MultiChannelImage::from_raw(
        (0..channels)
            .map(|c| {
                let re = &planes[2 * c * n..(2 * c + 1) * n];
                let im = &planes[(2 * c + 1) * n..(2 * c + 2) * n];
                ComplexImage::from_raw(h, w, re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect())
            })
            .collect(),
    )
}

/// `f_theta(x)` on complex channels.
pub fn denoise_forward(params: &DenoiserParams, x: &MultiChannelImage) -> Result<(MultiChannelImage, DenoiserTape)> {
    let plan = params.plan();
    if plan.input_width() != 2 * x.count() || plan.output_width() != 2 * x.count() {
        return Err(Error::ShapeMismatch(format!(
            "denoiser plan {:?} does not fit {} complex channels",
            plan.widths,
            x.count()
        )));
    }
    let (h, w) = x.shape();
    let (out, tape) = forward_planes(params, to_planes(x), h, w)?;
    Ok((from_planes(&out, x.count(), h, w), tape))
}

pub fn denoise_backward(params: &DenoiserParams, tape: &DenoiserTape, grad_out: &MultiChannelImage) -> Result<(DenoiserParams, MultiChannelImage)> {
    if grad_out.shape() != tape.shape {
        return Err(Error::StaleTape(format!(
            "gradient shape {:?} vs tape {:?}",
            grad_out.shape(),
            tape.shape
        )));
    }
    let (gp, gx) = backward_planes(params, tape, &to_planes(grad_out))?;
    let (h, w) = tape.shape;
    Ok((gp, from_planes(&gx, grad_out.count(), h, w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::seeded_rng;

    fn rand_mc(rng: &mut Rng64, c: usize, h: usize, w: usize) -> MultiChannelImage {
        MultiChannelImage::new(
            (0..c)
                .map(|_| ComplexImage::from_fn(h, w, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).unwrap())
                .collect(),
        )
        .unwrap()
    }

    /// Naive per-pixel zero-padded convolution, one layer.
    fn naive_layer(layer: &ConvLayer, input: &[f64], h: usize, w: usize, relu: bool) -> Vec<f64> {
        let n = h * w;
        let mut out = vec![0.0; layer.c_out * n];
        for co in 0..layer.c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = layer.bias[co];
                    for ci in 0..layer.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += layer.weights[((co * layer.c_in + ci) * 3 + ky) * 3 + kx]
                                    * input[ci * n + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[co * n + y * w + x] = if relu { acc.max(0.0) } else { acc };
                }
            }
        }
        out
    }

    #[test]
    fn zero_weights_give_zero() {
        let plan = ChannelPlan::complex(2, 3, 8).unwrap();
        let mut rng = seeded_rng(0);
        let x = rand_mc(&mut rng, 2, 8, 8);
        let (y, _) = denoise_forward(&DenoiserParams::zeros(&plan), &x).unwrap();
        assert_eq!(y.norm(), 0.0);
    }

    #[test]
    fn identity_kernel() {
        let plan = ChannelPlan::complex(1, 1, 4).unwrap();
        let mut p = DenoiserParams::zeros(&plan);
        for c in 0..2 {
            p.layers[0].weights[(c * 2 + c) * TAPS + 4] = 1.0;
        }
        let mut rng = seeded_rng(1);
        let x = rand_mc(&mut rng, 1, 8, 8);
        assert_eq!(denoise_forward(&p, &x).unwrap().0, x);
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = seeded_rng(2);
        let plan = ChannelPlan::complex(2, 3, 5).unwrap();
        let mut p = init_params(&plan, &mut rng).unwrap();
        for l in p.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        let x = rand_mc(&mut rng, 2, 8, 6);
        let (y, _) = denoise_forward(&p, &x).unwrap();
        let mut cur = to_planes(&x);
        for (l, layer) in p.layers().iter().enumerate() {
            cur = naive_layer(layer, &cur, 8, 6, l + 1 < p.layers().len());
        }
        let want = from_planes(&cur, 2, 8, 6);
        assert!(y.sub(&want).norm() < 1e-12);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = seeded_rng(3);
        let plan = ChannelPlan::complex(2, 3, 4).unwrap();
        let p = init_params(&plan, &mut rng).unwrap();
        let x = rand_mc(&mut rng, 2, 8, 8);
        let (_, tape) = denoise_forward(&p, &x).unwrap();
        let (gp, gx) = denoise_backward(&p, &tape, &MultiChannelImage::zeros(2, 8, 8)).unwrap();
        assert!(gp.is_zero());
        assert_eq!(gx.norm(), 0.0);
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = seeded_rng(4);
        let p2 = init_params(&ChannelPlan::complex(2, 2, 4).unwrap(), &mut rng).unwrap();
        let p3 = init_params(&ChannelPlan::complex(2, 3, 4).unwrap(), &mut rng).unwrap();
        let x = rand_mc(&mut rng, 2, 8, 8);
        let (_, tape) = denoise_forward(&p2, &x).unwrap();
        assert!(matches!(denoise_backward(&p3, &tape, &x), Err(Error::StaleTape(_))));
        let wrong = MultiChannelImage::zeros(2, 8, 10);
        assert!(matches!(denoise_backward(&p2, &tape, &wrong), Err(Error::StaleTape(_))));
    }

    #[test]
    fn init_is_seeded_and_validated() {
        let plan = ChannelPlan::complex(2, 3, 16).unwrap();
        assert_eq!(init_params(&plan, &mut seeded_rng(5)).unwrap(), init_params(&plan, &mut seeded_rng(5)).unwrap());
        assert!(matches!(ChannelPlan::complex(2, 0, 16), Err(Error::InvalidPlan(_))));
        assert!(matches!(ChannelPlan::new(vec![4]), Err(Error::InvalidPlan(_))));
    }

    #[test]
    fn init_output_smaller_than_input() {
        let plan = ChannelPlan::complex(2, 3, 16).unwrap();
        let mut rng = seeded_rng(6);
        let p = init_params(&plan, &mut rng).unwrap();
        for _ in 0..100 {
            let x = rand_mc(&mut rng, 2, 8, 8);
            let x = x.scale(1.0 / x.norm());
            let (y, _) = denoise_forward(&p, &x).unwrap();
            assert!(y.norm() < 1.0);
        }
    }

    #[test]
    fn flat_round_trip() {
        let plan = ChannelPlan::complex(1, 2, 3).unwrap();
        let p = init_params(&plan, &mut seeded_rng(7)).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.len());
        let mut q = DenoiserParams::zeros(&plan);
        assert_eq!(q.read_flat(&flat), flat.len());
        assert_eq!(p, q);
    }
}
