//! Data-consistency layers `g(x_half, y)` and their reverse-mode gradients.
//!
//! * GD: one gradient step on `1/2 |Ax - y|^2`.
//! * PM: the proximal map `argmin 1/2 |Ax - y|^2 + lambda/2 |x - x_half|^2`,
//!   solved by conjugate gradient on `(A^H A + lambda I) x = A^H y + lambda x_half`.
//! * VS: closed-form k-space averaging `(lambda k + y) / (1 + lambda)` on the
//!   sampled lines of each coil, mapped back through the coil combination.
//!
//! All three are affine in `x_half` with self-adjoint linear parts, so the
//! backward pass applies the same linear part to the incoming gradient. PM
//! uses implicit differentiation, `lambda (A^H A + lambda I)^{-1} g`.

use num_complex::Complex64;

use crate::domain::{DcKind, MultiChannelImage};
use crate::error::{Error, Result};
use crate::operators::{fft2c, ifft2c, ForwardOperator};

#[derive(Clone, Debug, PartialEq)]
pub struct DcConfig {
    pub kind: DcKind,
    /// GD step size.
    pub eta: f64,
    /// PM / VS weight on the denoiser output.
    pub lambda: f64,
    pub cg_max_iter: usize,
    pub cg_tol: f64,
}

impl Default for DcConfig {
    fn default() -> Self {
        Self {
            kind: DcKind::Gd,
            eta: 1.0,
            lambda: 0.1,
            cg_max_iter: 10,
            cg_tol: 1e-6,
        }
    }
}

impl DcConfig {
    pub fn new(kind: DcKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.lambda > 0.0 && self.cg_tol > 0.0) {
            return Err(Error::InvalidParams(format!(
                "DC needs eta, lambda, cg_tol > 0 (got {}, {}, {})",
                self.eta, self.lambda, self.cg_tol
            )));
        }
        Ok(())
    }

    /// The scalar a step may learn: `eta` for GD, `lambda` otherwise.
    pub fn weight(&self) -> f64 {
        match self.kind {
            DcKind::Gd => self.eta,
            DcKind::Pm | DcKind::Vs => self.lambda,
        }
    }

    pub fn with_weight(&self, w: f64) -> Self {
        let mut c = self.clone();
        match c.kind {
            DcKind::Gd => c.eta = w,
            DcKind::Pm | DcKind::Vs => c.lambda = w,
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: MultiChannelImage,
    pub iterations: usize,
    /// Final `|Mx - b| / |b|`.
    pub residual: f64,
}

/// Conjugate gradient for a self-adjoint positive definite `apply_m`.
///
/// Stops once `|Mx - b| / |b| <= tol` or after `max_iter` iterations.
pub fn cg_solve<F>(apply_m: F, b: &MultiChannelImage, x0: &MultiChannelImage, max_iter: usize, tol: f64) -> Result<CgOutcome>
where
    F: Fn(&MultiChannelImage) -> MultiChannelImage,
{
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: b.scale(0.0),
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut x = x0.clone();
    let mut r = b.sub(&apply_m(&x));
    let mut rs = r.norm_sqr();
    if rs.sqrt() / b_norm <= tol {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            residual: rs.sqrt() / b_norm,
        });
    }
    let mut p = r.clone();
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let ap = apply_m(&p);
        let alpha = rs / p.real_dot(&ap);
        if !alpha.is_finite() {
            return Err(Error::NonFiniteIterate(it));
        }
        x.axpy(Complex64::new(alpha, 0.0), &p);
        r.axpy(Complex64::new(-alpha, 0.0), &ap);
        let rs_new = r.norm_sqr();
        if !rs_new.is_finite() {
            return Err(Error::NonFiniteIterate(it));
        }
        if rs_new.sqrt() / b_norm <= tol {
            rs = rs_new;
            break;
        }
        let beta = rs_new / rs;
        p = r.add(&p.scale(beta));
        rs = rs_new;
    }
    Ok(CgOutcome {
        x,
        iterations: it,
        residual: rs.sqrt() / b_norm,
    })
}

fn check(x_half: &MultiChannelImage, y: &MultiChannelImage, op: &ForwardOperator) -> Result<()> {
    op.check_image(x_half)?;
    op.check_kspace(y)
}

/// `x_half - eta A^H (A x_half - y)`.
pub fn dc_gd(x_half: &MultiChannelImage, y: &MultiChannelImage, op: &ForwardOperator, cfg: &DcConfig) -> Result<MultiChannelImage> {
    check(x_half, y, op)?;
    let resid = op.adjoint_unchecked(&op.forward_unchecked(x_half).sub(y));
    Ok(x_half.sub(&resid.scale(cfg.eta)))
}

fn prox_normal(op: &ForwardOperator, lambda: f64) -> impl Fn(&MultiChannelImage) -> MultiChannelImage + '_ {
    move |v| {
        let mut out = op.normal_unchecked(v);
        out.axpy(Complex64::new(lambda, 0.0), v);
        out
    }
}

/// Proximal map, CG warm-started at `x_half`.
pub fn dc_pm(x_half: &MultiChannelImage, y: &MultiChannelImage, op: &ForwardOperator, cfg: &DcConfig) -> Result<MultiChannelImage> {
    Ok(dc_pm_solve(x_half, y, op, cfg)?.x)
}

pub fn dc_pm_solve(x_half: &MultiChannelImage, y: &MultiChannelImage, op: &ForwardOperator, cfg: &DcConfig) -> Result<CgOutcome> {
    check(x_half, y, op)?;
    let mut rhs = op.adjoint_unchecked(y);
    rhs.axpy(Complex64::new(cfg.lambda, 0.0), x_half);
    cg_solve(prox_normal(op, cfg.lambda), &rhs, x_half, cfg.cg_max_iter, cfg.cg_tol)
}

/// The prox objective `1/2 |Ax - y|^2 + lambda/2 |x - x_half|^2`.
pub fn prox_objective(x: &MultiChannelImage, x_half: &MultiChannelImage, y: &MultiChannelImage, op: &ForwardOperator, lambda: f64) -> Result<f64> {
    check(x, y, op)?;
    let misfit = op.forward_unchecked(x).sub(y).norm_sqr();
    Ok(0.5 * misfit + 0.5 * lambda * x.sub(x_half).norm_sqr())
}

/// Per coil, blend the predicted k-space with `y` on sampled lines; `y = None`
/// applies the linear part alone.
fn vs_map(x_half: &MultiChannelImage, y: Option<&MultiChannelImage>, op: &ForwardOperator, lambda: f64) -> MultiChannelImage {
    let coils = op.coil_images_unchecked(x_half);
    let w = x_half.width();
    let mask = op.mask();
    let keep = lambda / (1.0 + lambda);
    let mixed: Vec<_> = coils
        .channels()
        .iter()
        .enumerate()
        .map(|(q, c)| {
            let mut k = fft2c(c);
            for (line, row) in k.data_mut().chunks_exact_mut(w).enumerate() {
                if !mask.is_sampled(line) {
                    continue;
                }
                match y {
                    Some(y) => {
                        let yrow = &y.channel(q).data()[line * w..(line + 1) * w];
                        for (z, v) in row.iter_mut().zip(yrow) {
                            *z = (*z * lambda + v) / (1.0 + lambda);
                        }
                    }
                    None => row.iter_mut().for_each(|z| *z *= keep),
                }
            }
            ifft2c(&k)
        })
        .collect();
    op.combine_coils_unchecked(&MultiChannelImage::from_raw(mixed))
}

pub fn dc_vs(x_half: &MultiChannelImage, y: &MultiChannelImage, op: &ForwardOperator, cfg: &DcConfig) -> Result<MultiChannelImage> {
    check(x_half, y, op)?;
    Ok(vs_map(x_half, Some(y), op, cfg.lambda))
}

/// Dispatch on `cfg.kind`.
pub fn dc_apply(x_half: &MultiChannelImage, y: &MultiChannelImage, op: &ForwardOperator, cfg: &DcConfig) -> Result<MultiChannelImage> {
    match cfg.kind {
        DcKind::Gd => dc_gd(x_half, y, op, cfg),
        DcKind::Pm => dc_pm(x_half, y, op, cfg),
        DcKind::Vs => dc_vs(x_half, y, op, cfg),
    }
}

/// What the backward pass needs from a forward DC evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DcContext<'a> {
    pub cfg: &'a DcConfig,
    pub op: &'a ForwardOperator,
    pub y: &'a MultiChannelImage,
    pub x_half: &'a MultiChannelImage,
    pub output: &'a MultiChannelImage,
}

#[derive(Clone, Debug)]
pub struct DcGrads {
    pub grad_in: MultiChannelImage,
    /// Derivative w.r.t. `eta` (GD) or `lambda` (PM, VS), when requested.
    pub grad_weight: Option<f64>,
}

/// Backpropagate `grad_out` (gradient of a real loss w.r.t. the layer output,
/// as `dL/dRe + i dL/dIm`) through one DC layer.
pub fn dc_backward(ctx: &DcContext<'_>, grad_out: &MultiChannelImage, want_weight: bool) -> Result<DcGrads> {
    let DcContext { cfg, op, y, x_half, output } = *ctx;
    op.check_image(grad_out)?;
    if !grad_out.same_shape(x_half) || !output.same_shape(x_half) {
        return Err(Error::StaleTape("DC context and gradient shapes differ".into()));
    }
    match cfg.kind {
        DcKind::Gd => {
            let grad_in = grad_out.sub(&op.normal_unchecked(grad_out).scale(cfg.eta));
            let grad_weight = want_weight.then(|| {
                let resid = op.adjoint_unchecked(&op.forward_unchecked(x_half).sub(y));
                -grad_out.real_dot(&resid)
            });
            Ok(DcGrads { grad_in, grad_weight })
        }
        DcKind::Pm => {
            let v = cg_solve(
                prox_normal(op, cfg.lambda),
                grad_out,
                &grad_out.scale(1.0 / (1.0 + cfg.lambda)),
                cfg.cg_max_iter,
                cfg.cg_tol,
            )?
            .x;
            let grad_weight = want_weight.then(|| v.real_dot(&x_half.sub(output)));
            Ok(DcGrads {
                grad_in: v.scale(cfg.lambda),
                grad_weight,
            })
        }
        DcKind::Vs => {
            let grad_in = vs_map(grad_out, None, op, cfg.lambda);
            let grad_weight = want_weight.then(|| {
                // d/dlambda of (lambda k + y)/(1 + lambda) is (k - y)/(1 + lambda)^2
                let resid = op.forward_unchecked(x_half).sub(y);
                let s = 1.0 / (1.0 + cfg.lambda).powi(2);
                let back = op.adjoint_unchecked(&resid.scale(s));
                grad_out.real_dot(&back)
            });
            Ok(DcGrads { grad_in, grad_weight })
        }
    }
}
