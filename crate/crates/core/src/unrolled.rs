//! T-step unrolled reconstruction: `x^{t+1/2} = x^t - f_t(x^t)`,
//! `x^{t+1} = g(x^{t+1/2}, y)`, starting from the zero-filled `x^0 = A^H y`.

use crate::dc::{dc_apply, dc_backward, DcConfig, DcContext};
use crate::domain::{MultiChannelImage, RealImage, Rng64, RunConfig, SamplingMask, SensitivitySet, Variant};
use crate::error::{Error, Result};
use crate::net::{denoise_backward, denoise_forward, init_params, ChannelPlan, DenoiserParams, DenoiserTape};
use crate::operators::{rss, ForwardOperator};

#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledModel {
    pub variant: Variant,
    pub dc: DcConfig,
    /// Per-step DC scalar (`eta` for GD, `lambda` for PM / VS).
    pub dc_weights: Vec<f64>,
    pub dc_trainable: bool,
    /// One block per step, or a single block reused when `shared`.
    pub blocks: Vec<DenoiserParams>,
    pub shared: bool,
}

impl UnrolledModel {
    pub fn new(variant: Variant, dc: DcConfig, steps: usize, blocks: Vec<DenoiserParams>, shared: bool) -> Result<Self> {
        dc.check()?;
        if steps == 0 {
            return Err(Error::InvalidParams("T must be >= 1".into()));
        }
        let want = if shared { 1 } else { steps };
        if blocks.len() != want {
            return Err(Error::InvalidParams(format!("expected {want} denoiser blocks, got {}", blocks.len())));
        }
        let plan = blocks[0].plan();
        if blocks.iter().any(|b| b.plan() != plan) {
            return Err(Error::InvalidPlan("all steps must share one channel plan".into()));
        }
        Ok(Self {
            variant,
            dc_weights: vec![dc.weight(); steps],
            dc,
            dc_trainable: false,
            blocks,
            shared,
        })
    }

    /// Freshly initialised model for `channels` complex image channels.
    pub fn init(cfg: &RunConfig, channels: usize, rng: &mut Rng64) -> Result<Self> {
        cfg.check()?;
        let plan = ChannelPlan::complex(channels, cfg.net_layers, cfg.net_features)?;
        let n = if cfg.shared_weights { 1 } else { cfg.steps };
        let blocks = (0..n).map(|_| init_params(&plan, rng)).collect::<Result<Vec<_>>>()?;
        let mut m = Self::new(cfg.variant, dc_config(cfg), cfg.steps, blocks, cfg.shared_weights)?;
        m.dc_trainable = cfg.dc_trainable;
        Ok(m)
    }

    /// Same shape with every denoiser weight zero.
    pub fn zeroed(&self) -> Self {
        let mut m = self.clone();
        let plan = self.plan();
        m.blocks.iter_mut().for_each(|b| *b = DenoiserParams::zeros(&plan));
        m
    }

    pub fn steps(&self) -> usize {
        self.dc_weights.len()
    }

    pub fn plan(&self) -> ChannelPlan {
        self.blocks[0].plan()
    }

    /// Complex image channels the model operates on.
    pub fn channels(&self) -> usize {
        self.plan().input_width() / 2
    }

    pub fn block(&self, t: usize) -> &DenoiserParams {
        if self.shared {
            &self.blocks[0]
        } else {
            &self.blocks[t]
        }
    }

    pub fn step_dc(&self, t: usize) -> DcConfig {
        self.dc.with_weight(self.dc_weights[t])
    }

    /// Bind the forward operator for one example.
    pub fn operator(&self, coils: usize, shape: (usize, usize), sens: Option<&SensitivitySet>, mask: &SamplingMask) -> Result<ForwardOperator> {
        let op = ForwardOperator::for_variant(self.variant, coils, shape, sens, mask)?;
        if op.image_channels() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} channels, operator needs {}",
                self.channels(),
                op.image_channels()
            )));
        }
        Ok(op)
    }

    /// Trainable values as one vector: all blocks, then DC weights if trainable.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for b in &self.blocks {
            b.write_flat(&mut v);
        }
        if self.dc_trainable {
            v.extend_from_slice(&self.dc_weights);
        }
        v
    }

    pub fn set_flat(&mut self, src: &[f64]) {
        let mut o = 0;
        for b in &mut self.blocks {
            o += b.read_flat(&src[o..]);
        }
        if self.dc_trainable {
            for (w, &v) in self.dc_weights.iter_mut().zip(&src[o..]) {
                // keep DC weights in their valid range
                *w = v.max(1e-6);
            }
        }
    }
}

pub fn dc_config(cfg: &RunConfig) -> DcConfig {
    DcConfig {
        kind: cfg.dc_kind,
        eta: cfg.dc_eta,
        lambda: cfg.dc_lambda,
        cg_max_iter: cfg.cg_max_iter,
        cg_tol: cfg.cg_tol,
    }
}

#[derive(Clone, Debug)]
struct StepRecord {
    x: MultiChannelImage,
    x_half: MultiChannelImage,
    out: MultiChannelImage,
    denoiser: DenoiserTape,
}

/// Every intermediate of one reconstruction, checkpointed per step.
#[derive(Clone, Debug)]
pub struct ReconTape {
    steps: Vec<StepRecord>,
}

impl ReconTape {
    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    pub fn zero_filled(&self) -> &MultiChannelImage {
        &self.steps[0].x
    }

    /// Approximate memory held by the tape.
    pub fn stored_bytes(&self) -> usize {
        self.steps
            .iter()
            .map(|s| {
                let img = |m: &MultiChannelImage| m.count() * m.height() * m.width() * 16;
                img(&s.x) + img(&s.x_half) + img(&s.out) + s.denoiser.stored_values() * 8
            })
            .sum()
    }
}

/// Gradients w.r.t. every trainable value of a model; same layout as the model.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub blocks: Vec<DenoiserParams>,
    pub dc_weights: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &UnrolledModel) -> Self {
        let plan = model.plan();
        Self {
            blocks: model.blocks.iter().map(|_| DenoiserParams::zeros(&plan)).collect(),
            dc_weights: vec![0.0; model.steps()],
        }
    }

    pub fn to_flat(&self, dc_trainable: bool) -> Vec<f64> {
        let mut v = Vec::new();
        for b in &self.blocks {
            b.write_flat(&mut v);
        }
        if dc_trainable {
            v.extend_from_slice(&self.dc_weights);
        }
        v
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (la, lb) in a.layers_mut().iter_mut().zip(b.layers()) {
                la.weights.iter_mut().zip(&lb.weights).for_each(|(u, v)| *u += v);
                la.bias.iter_mut().zip(&lb.bias).for_each(|(u, v)| *u += v);
            }
        }
        self.dc_weights.iter_mut().zip(&other.dc_weights).for_each(|(u, v)| *u += v);
    }
}

/// Run the unrolled scheme on coil k-space `y`.
pub fn reconstruct(model: &UnrolledModel, y: &MultiChannelImage, op: &ForwardOperator) -> Result<(MultiChannelImage, ReconTape)> {
    op.check_kspace(y)?;
    if op.image_channels() != model.channels() {
        return Err(Error::ShapeMismatch("operator and model channel counts differ".into()));
    }
    let mut x = op.adjoint_unchecked(y);
    let mut steps = Vec::with_capacity(model.steps());
    for t in 0..model.steps() {
        let (f, denoiser) = denoise_forward(model.block(t), &x)?;
        let x_half = x.sub(&f);
        let out = dc_apply(&x_half, y, op, &model.step_dc(t))?;
        steps.push(StepRecord {
            x,
            x_half,
            out: out.clone(),
            denoiser,
        });
        x = out;
    }
    Ok((x, ReconTape { steps }))
}

/// Exact reverse pass through all T steps.
pub fn recon_backward(model: &UnrolledModel, op: &ForwardOperator, y: &MultiChannelImage, tape: &ReconTape, grad_xt: &MultiChannelImage) -> Result<ModelGrads> {
    if tape.steps.len() != model.steps() {
        return Err(Error::StaleTape(format!(
            "tape has {} steps, model has {}",
            tape.steps.len(),
            model.steps()
        )));
    }
    if !grad_xt.same_shape(&tape.steps[0].x) {
        return Err(Error::StaleTape("gradient shape differs from the recorded iterates".into()));
    }
    let mut grads = ModelGrads::zeros_like(model);
    let mut g = grad_xt.clone();
    for t in (0..model.steps()).rev() {
        let rec = &tape.steps[t];
        let cfg = model.step_dc(t);
        let ctx = DcContext {
            cfg: &cfg,
            op,
            y,
            x_half: &rec.x_half,
            output: &rec.out,
        };
        let dcg = dc_backward(&ctx, &g, model.dc_trainable)?;
        grads.dc_weights[t] = dcg.grad_weight.unwrap_or(0.0);
        let g_half = dcg.grad_in;
        let (gp, gx) = denoise_backward(model.block(t), &rec.denoiser, &g_half)?;
        let slot = if model.shared { 0 } else { t };
        for (la, lb) in grads.blocks[slot].layers_mut().iter_mut().zip(gp.layers()) {
            la.weights.iter_mut().zip(&lb.weights).for_each(|(u, v)| *u -= v);
            la.bias.iter_mut().zip(&lb.bias).for_each(|(u, v)| *u -= v);
        }
        g = g_half.sub(&gx);
    }
    Ok(grads)
}

/// `x_rec = rss(x^T)`.
pub fn final_image(x_t: &MultiChannelImage) -> RealImage {
    rss(x_t)
}

/// Convenience: reconstruct and return only the magnitude image.
pub fn reconstruct_image(model: &UnrolledModel, y: &MultiChannelImage, op: &ForwardOperator) -> Result<RealImage> {
    Ok(final_image(&reconstruct(model, y, op)?.0))
}

/// Zero-filled baseline `rss(A^H y)`.
pub fn zero_filled(y: &MultiChannelImage, op: &ForwardOperator) -> Result<RealImage> {
    Ok(rss(&op.adjoint(y)?))
}
