//! Losses, optimizers, supervised training, FE patching, per-volume
//! finetuning and the style-transfer layer.

mod optim;
mod ssim;

pub use optim::{OptimizerState, ADAM_BETA1, ADAM_BETA2, EPS, RMSPROP_DECAY};
pub use ssim::{ssim, ssim_score, SsimOutput, WINDOW};

use std::borrow::Cow;
use std::fmt::Write as _;

use log::debug;
use rand::Rng;

use crate::datasim::{estimate_sensitivities, foreground_mask};
use crate::domain::{
    substream, ComplexImage, FinetuneMode, ForegroundMask, KSpaceVolume, MultiChannelImage, OptimizerKind, RealImage, Rng64, RunConfig,
    SamplingMask, SensitivitySet, Variant,
};
use crate::error::{Error, Result};
use crate::net::{backward_planes, forward_planes, init_params, ChannelPlan, DenoiserParams};
use crate::operators::{fft_fe, ifft2c, ifft_fe, rss, ForwardOperator};
use crate::unrolled::{recon_backward, reconstruct, UnrolledModel};

/// One supervised training example.
#[derive(Clone, Debug)]
pub struct Example {
    /// Undersampled coil k-space.
    pub y: MultiChannelImage,
    pub mask: SamplingMask,
    pub sens: Option<SensitivitySet>,
    pub x_ref: RealImage,
    pub fg: ForegroundMask,
    /// SSIM constant scale, normally the max of the reference volume.
    pub data_range: f64,
}

impl Example {
    pub fn new(
        y: MultiChannelImage,
        mask: SamplingMask,
        sens: Option<SensitivitySet>,
        x_ref: RealImage,
        fg: ForegroundMask,
        data_range: f64,
    ) -> Result<Self> {
        let shape = y.shape();
        if mask.pe_lines() != shape.0 || x_ref.shape() != shape || fg.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "example k-space {shape:?}, mask {} lines, reference {:?}, foreground {:?}",
                mask.pe_lines(),
                x_ref.shape(),
                fg.shape()
            )));
        }
        if let Some(s) = &sens {
            if s.shape() != shape || s.coil_count() != y.count() {
                return Err(Error::ShapeMismatch("sensitivities do not match k-space".into()));
            }
        }
        if !(data_range > 0.0 && data_range.is_finite()) {
            return Err(Error::ZeroReference);
        }
        Ok(Self {
            y,
            mask,
            sens,
            x_ref,
            fg,
            data_range,
        })
    }

    pub fn operator(&self, model: &UnrolledModel) -> Result<ForwardOperator> {
        model.operator(self.y.count(), self.y.shape(), self.sens.as_ref(), &self.mask)
    }
}

/// `rss` of the fully sampled coil images of every slice.
pub fn rss_references(full: &KSpaceVolume) -> Vec<RealImage> {
    full.slices()
        .iter()
        .map(|k| rss(&MultiChannelImage::new(k.channels().iter().map(ifft2c).collect()).expect("slice shape")))
        .collect()
}

/// Build examples from a fully sampled volume: undersample with `mask`,
/// RSS references, foreground masks and a volume-wide data range.
pub fn examples_from_volume(full: &KSpaceVolume, mask: &SamplingMask, sens: Option<&SensitivitySet>, fg_threshold: f64) -> Result<Vec<Example>> {
    let under = full.undersample(mask)?;
    let refs = rss_references(full);
    let range = refs.iter().map(RealImage::max).fold(0.0, f64::max);
    if range <= 0.0 {
        return Err(Error::ZeroReference);
    }
    under
        .slices()
        .iter()
        .zip(refs)
        .map(|(y, x_ref)| {
            let fg = foreground_mask(&x_ref, fg_threshold)?;
            Example::new(y.clone(), mask.clone(), sens.cloned(), x_ref, fg, range)
        })
        .collect()
}

/// Examples for `variant`: SN slices carry `n_maps` sensitivity sets
/// estimated from the ACL block of their own undersampled data.
pub fn build_examples(full: &KSpaceVolume, mask: &SamplingMask, variant: Variant, n_maps: usize, fg_threshold: f64) -> Result<Vec<Example>> {
    let mut out = examples_from_volume(full, mask, None, fg_threshold)?;
    if variant == Variant::Sn {
        for ex in &mut out {
            ex.sens = Some(estimate_sensitivities(&ex.y, mask.acl_range(), n_maps)?);
        }
    }
    Ok(out)
}

/// Loss value, its parts and the gradient w.r.t. the multichannel image.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub ssim: f64,
    pub l1: f64,
    pub grad: MultiChannelImage,
}

/// Chain a gradient on `rss(x)` back to `x` (zero where the RSS vanishes).
pub fn rss_backward(x: &MultiChannelImage, r: &RealImage, g: &RealImage) -> MultiChannelImage {
    let scale: Vec<f64> = r
        .data()
        .iter()
        .zip(g.data())
        .map(|(&r, &g)| if r > 0.0 { g / r } else { 0.0 })
        .collect();
    MultiChannelImage::new(
        x.channels()
            .iter()
            .map(|c| ComplexImage::from_fn(c.height(), c.width(), |i, j| c.at(i, j) * scale[i * c.width() + j]).expect("finite"))
            .collect(),
    )
    .expect("same shapes")
}

/// `-SSIM(m*rss(x), m*x_ref) + lambda * mean|m*rss(x) - m*x_ref|`, lower is better.
pub fn base_loss(x: &MultiChannelImage, x_ref: &RealImage, m: &ForegroundMask, lambda_l1: f64, data_range: f64) -> Result<LossOutput> {
    if x.shape() != x_ref.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} vs reference {:?}",
            x.shape(),
            x_ref.shape()
        )));
    }
    let r = rss(x);
    let a = r.masked(m);
    let b = x_ref.masked(m);
    let s = ssim(&a, &b, m, data_range)?;
    let n = a.data().len() as f64;
    let l1 = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).sum::<f64>() / n;
    let (h, w) = a.shape();
    let g_r: Vec<f64> = (0..h * w)
        .map(|p| {
            if !m.pixels()[p] {
                return 0.0;
            }
            let d = a.data()[p] - b.data()[p];
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            -s.grad.data()[p] + lambda_l1 * sign / n
        })
        .collect();
    let g_r = RealImage::new(h, w, g_r)?;
    Ok(LossOutput {
        value: -s.score + lambda_l1 * l1,
        ssim: s.score,
        l1,
        grad: rss_backward(x, &r, &g_r),
    })
}

/// `0.5 * ||A x - y||^2` and its gradient `A^H (A x - y)`.
pub fn data_fidelity(x: &MultiChannelImage, y: &MultiChannelImage, op: &ForwardOperator) -> Result<(f64, MultiChannelImage)> {
    let res = op.forward(x)?.sub(y);
    Ok((0.5 * res.norm_sqr(), op.adjoint(&res)?))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub example: usize,
    pub loss: f64,
    pub ssim: f64,
    pub l1: f64,
    pub lr: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,example,loss,ssim,l1,lr";

pub fn train_log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:e},{:e},{:e},{:e}", r.epoch, r.example, r.loss, r.ssim, r.l1, r.lr);
    }
    s
}

/// Mean loss per epoch, in epoch order.
pub fn epoch_means(rows: &[LogRow]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        if out.len() < r.epoch {
            out.resize(r.epoch, (0.0, 0));
        }
        out[r.epoch - 1].0 += r.loss;
        out[r.epoch - 1].1 += 1;
    }
    out.into_iter().map(|(s, n)| if n > 0 { s / n as f64 } else { f64::NAN }).collect()
}

fn check_finite(v: f64, grads: &[f64], epoch: usize, example: usize) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            example,
            detail: format!("loss = {v}"),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch,
            example,
            detail: format!("gradient entry {i} = {}", grads[i]),
        });
    }
    Ok(())
}

/// Supervised training with batch size 1. Examples are visited in order;
/// FE patch offsets come from a stream seeded by `cfg.seed`.
pub fn train(model: &UnrolledModel, data: &[Example], cfg: &RunConfig) -> Result<(UnrolledModel, Vec<LogRow>)> {
    cfg.check()?;
    let mut model = model.clone();
    let mut params = model.to_flat();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, params.len())?;
    let mut rng = substream(cfg.seed, 0x7ea1);
    let mut log = Vec::with_capacity(cfg.epochs * data.len());
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_lr(lr);
        for (i, ex) in data.iter().enumerate() {
            let ex = match cfg.patch_fe {
                Some(p) => Cow::Owned(fe_patch_random(ex, p, &mut rng)?),
                None => Cow::Borrowed(ex),
            };
            let op = ex.operator(&model)?;
            let (xt, tape) = reconstruct(&model, &ex.y, &op)?;
            let loss = base_loss(&xt, &ex.x_ref, &ex.fg, cfg.lambda_l1, ex.data_range)?;
            let grads = recon_backward(&model, &op, &ex.y, &tape, &loss.grad)?.to_flat(model.dc_trainable);
            check_finite(loss.value, &grads, epoch, i)?;
            opt.step(&mut params, &grads)?;
            model.set_flat(&params);
            params = model.to_flat();
            log.push(LogRow {
                epoch,
                example: i,
                loss: loss.value,
                ssim: loss.ssim,
                l1: loss.l1,
                lr,
            });
        }
        debug!("epoch {epoch}: mean loss {:.6}", epoch_means(&log)[epoch - 1]);
    }
    Ok((model, log))
}

/// Restrict an example to FE columns `start..start + patch`. The k-space is
/// transformed to hybrid space along FE, cropped and transformed back.
pub fn fe_patch(ex: &Example, patch: usize, start: usize) -> Result<Example> {
    let width = ex.y.width();
    if patch == 0 || patch > width || start + patch > width {
        return Err(Error::PatchTooLarge { patch, width });
    }
    let y = MultiChannelImage::new(ex.y.channels().iter().map(|k| fft_fe(&ifft_fe(k).crop_cols(start, patch))).collect())?;
    Ok(Example {
        y,
        mask: ex.mask.clone(),
        sens: ex.sens.as_ref().map(|s| s.crop_cols(start, patch)),
        x_ref: ex.x_ref.crop_cols(start, patch),
        fg: ex.fg.crop_cols(start, patch),
        data_range: ex.data_range,
    })
}

/// `fe_patch` at a uniformly random offset.
pub fn fe_patch_random(ex: &Example, patch: usize, rng: &mut Rng64) -> Result<Example> {
    let width = ex.y.width();
    if patch > width {
        return Err(Error::PatchTooLarge { patch, width });
    }
    fe_patch(ex, patch, rng.gen_range(0..=width - patch))
}

/// One slice of the volume being finetuned, with its fixed prior.
#[derive(Clone, Debug)]
pub struct FinetuneSlice {
    pub y: MultiChannelImage,
    pub op: ForwardOperator,
    /// `|x_rec|` of the supervised model, computed once before finetuning.
    pub prior: RealImage,
}

/// Pair each slice with the pre-finetune reconstruction as its prior.
pub fn prepare_finetune(model: &UnrolledModel, ys: &[MultiChannelImage], ops: &[ForwardOperator]) -> Result<Vec<FinetuneSlice>> {
    if ys.len() != ops.len() || ys.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} k-space slices vs {} operators", ys.len(), ops.len())));
    }
    ys.iter()
        .zip(ops)
        .map(|(y, op)| {
            let prior = rss(&reconstruct(model, y, op)?.0);
            Ok(FinetuneSlice {
                y: y.clone(),
                op: op.clone(),
                prior,
            })
        })
        .collect()
}

/// Parts of the finetuning objective summed over the slices.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRow {
    pub epoch: usize,
    pub loss: f64,
    pub misfit: f64,
    pub ssim: f64,
}

/// Hinge residual of the SSIM term and its derivative w.r.t. SSIM.
pub fn hinge(mode: FinetuneMode, ssim: f64, beta: f64) -> (f64, f64) {
    match mode {
        FinetuneMode::Literal => {
            let h = ssim - beta;
            if h > 0.0 {
                (h, 1.0)
            } else {
                (0.0, 0.0)
            }
        }
        FinetuneMode::DissimilarityHinge => {
            let h = 1.0 - ssim - beta;
            if h > 0.0 {
                (h, -1.0)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// `sum_i 0.5 ||A x_i - y_i||^2 + (alpha / 2) hinge_i^2` with its gradient.
pub fn finetune_objective(model: &UnrolledModel, slices: &[FinetuneSlice], cfg: &RunConfig) -> Result<(FinetuneRow, Vec<f64>)> {
    let range = slices.iter().map(|s| s.prior.max()).fold(0.0, f64::max);
    if range <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let mut grads = vec![0.0; model.to_flat().len()];
    let mut row = FinetuneRow {
        epoch: 0,
        loss: 0.0,
        misfit: 0.0,
        ssim: 0.0,
    };
    for s in slices {
        let (xt, tape) = reconstruct(model, &s.y, &s.op)?;
        let (misfit, mut g) = data_fidelity(&xt, &s.y, &s.op)?;
        let r = rss(&xt);
        let (h, w) = r.shape();
        let full = ForegroundMask::full(h, w);
        let sim = ssim(&r, &s.prior, &full, range)?;
        let (hv, dh) = hinge(cfg.finetune_mode, sim.score, cfg.beta);
        if hv > 0.0 {
            let coef = cfg.alpha * hv * dh;
            let g_r = RealImage::new(h, w, sim.grad.data().iter().map(|v| coef * v).collect())?;
            g = g.add(&rss_backward(&xt, &r, &g_r));
        }
        let mg = recon_backward(model, &s.op, &s.y, &tape, &g)?.to_flat(model.dc_trainable);
        grads.iter_mut().zip(&mg).for_each(|(a, b)| *a += b);
        row.misfit += misfit;
        row.loss += misfit + 0.5 * cfg.alpha * hv * hv;
        row.ssim += sim.score / slices.len() as f64;
    }
    Ok((row, grads))
}

/// Semi-supervised adaptation to one volume: all slices form one batch,
/// one ADAM step per epoch.
pub fn finetune(model: &UnrolledModel, slices: &[FinetuneSlice], cfg: &RunConfig) -> Result<(UnrolledModel, Vec<FinetuneRow>)> {
    cfg.check()?;
    let mut model = model.clone();
    let mut params = model.to_flat();
    let mut opt = OptimizerState::new(OptimizerKind::Adam, cfg.finetune_lr, params.len())?;
    let mut log = Vec::with_capacity(cfg.finetune_epochs);
    for epoch in 1..=cfg.finetune_epochs {
        let (mut row, grads) = finetune_objective(&model, slices, cfg)?;
        check_finite(row.loss, &grads, epoch, 0)?;
        opt.step(&mut params, &grads)?;
        model.set_flat(&params);
        params = model.to_flat();
        row.epoch = epoch;
        log.push(row);
    }
    Ok((model, log))
}

/// Total `||A x(theta) - y||^2` of a model over the slices.
pub fn data_misfit(model: &UnrolledModel, slices: &[FinetuneSlice]) -> Result<f64> {
    slices.iter().try_fold(0.0, |acc, s| {
        let (xt, _) = reconstruct(model, &s.y, &s.op)?;
        Ok(acc + 2.0 * data_fidelity(&xt, &s.y, &s.op)?.0)
    })
}

/// Style-transfer layer: a plain (non-residual) real conv net, 1 channel in and out.
pub fn stl_init(cfg: &RunConfig, rng: &mut Rng64) -> Result<DenoiserParams> {
    let f = cfg.stl_features;
    init_params(&ChannelPlan::new(vec![1, f, f, 1])?, rng)
}

pub fn stl_apply(params: &DenoiserParams, img: &RealImage) -> Result<RealImage> {
    let (h, w) = img.shape();
    let (out, _) = forward_planes(params, img.data().to_vec(), h, w)?;
    RealImage::new(h, w, out)
}

/// Mean SSIM of `stl(input)` against the target over the pairs.
pub fn stl_score(params: &DenoiserParams, pairs: &[(RealImage, RealImage)]) -> Result<f64> {
    let range = stl_range(pairs)?;
    let mut total = 0.0;
    for (a, b) in pairs {
        let (h, w) = b.shape();
        total += ssim_score(&stl_apply(params, a)?, b, &ForegroundMask::full(h, w), range)?;
    }
    Ok(total / pairs.len() as f64)
}

fn stl_range(pairs: &[(RealImage, RealImage)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidParams("no style-transfer pairs".into()));
    }
    if let Some((a, b)) = pairs.iter().find(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::ShapeMismatch(format!("pair shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let range = pairs.iter().map(|(_, b)| b.max()).fold(0.0, f64::max);
    if range > 0.0 {
        Ok(range)
    } else {
        Err(Error::ZeroReference)
    }
}

/// Train the STL on (combined magnitude, RSS magnitude) pairs by maximising SSIM.
pub fn stl_train(pairs: &[(RealImage, RealImage)], cfg: &RunConfig, rng: &mut Rng64) -> Result<(DenoiserParams, Vec<LogRow>)> {
    let range = stl_range(pairs)?;
    let mut params = stl_init(cfg, rng)?;
    let mut flat = params.to_flat();
    let mut opt = OptimizerState::new(OptimizerKind::RmsProp, cfg.stl_lr, flat.len())?;
    let mut log = Vec::new();
    for epoch in 1..=cfg.stl_epochs {
        for (i, (a, b)) in pairs.iter().enumerate() {
            let (h, w) = a.shape();
            let (out, tape) = forward_planes(&params, a.data().to_vec(), h, w)?;
            let s = ssim(&RealImage::new(h, w, out)?, b, &ForegroundMask::full(h, w), range)?;
            let g_out: Vec<f64> = s.grad.data().iter().map(|v| -v).collect();
            let (gp, _) = backward_planes(&params, &tape, &g_out)?;
            let grads = gp.to_flat();
            check_finite(s.score, &grads, epoch, i)?;
            opt.step(&mut flat, &grads)?;
            params.read_flat(&flat);
            log.push(LogRow {
                epoch,
                example: i,
                loss: -s.score,
                ssim: s.score,
                l1: 0.0,
                lr: cfg.stl_lr,
            });
        }
    }
    Ok((params, log))
}
