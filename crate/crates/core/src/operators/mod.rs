//! Fourier transforms, the SENSE / coil-wise forward model and RSS.

mod fft;

use num_complex::Complex64;

pub use fft::{fft2c, fft_fe, ifft2c, ifft_fe};

use crate::domain::{ComplexImage, MultiChannelImage, RealImage, SamplingMask, SensitivitySet, Variant};
use crate::error::{shape_err, Error, Result};

/// The linear forward model `A`.
///
/// SN: `(A x)_q = M F (sum_m s_mq x_m)`; PCN: `(A x)_q = M F x_q`, where `F` is
/// [`fft2c`] and `M` zeroes unsampled PE lines.
#[derive(Clone, Debug)]
pub struct ForwardOperator {
    kind: Variant,
    sens: Option<SensitivitySet>,
    mask: SamplingMask,
    coils: usize,
    shape: (usize, usize),
}

impl ForwardOperator {
    pub fn sn(sens: SensitivitySet, mask: SamplingMask) -> Result<Self> {
        let shape = sens.shape();
        if mask.pe_lines() != shape.0 {
            return shape_err(format!(
                "mask has {} lines, sensitivities have {} rows",
                mask.pe_lines(),
                shape.0
            ));
        }
        Ok(Self {
            kind: Variant::Sn,
            coils: sens.coil_count(),
            sens: Some(sens),
            mask,
            shape,
        })
    }

    pub fn pcn(coils: usize, shape: (usize, usize), mask: SamplingMask) -> Result<Self> {
        if coils == 0 {
            return Err(Error::InvalidParams("PCN operator needs at least one coil".into()));
        }
        if mask.pe_lines() != shape.0 {
            return shape_err(format!(
                "mask has {} lines, image has {} rows",
                mask.pe_lines(),
                shape.0
            ));
        }
        Ok(Self {
            kind: Variant::Pcn,
            sens: None,
            mask,
            coils,
            shape,
        })
    }

    /// Build the operator for `kind`; SN requires `sens`, PCN ignores it.
    pub fn for_variant(
        kind: Variant,
        coils: usize,
        shape: (usize, usize),
        sens: Option<&SensitivitySet>,
        mask: &SamplingMask,
    ) -> Result<Self> {
        match kind {
            Variant::Sn => {
                let sens = sens.ok_or_else(|| Error::InvalidParams("SN operator requires sensitivities".into()))?;
                if sens.coil_count() != coils || sens.shape() != shape {
                    return shape_err("sensitivities do not match k-space coils/shape");
                }
                Self::sn(sens.clone(), mask.clone())
            }
            Variant::Pcn => Self::pcn(coils, shape, mask.clone()),
        }
    }

    pub fn kind(&self) -> Variant {
        self.kind
    }

    pub fn sens(&self) -> Option<&SensitivitySet> {
        self.sens.as_ref()
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Channels of the image-domain unknown.
    pub fn image_channels(&self) -> usize {
        match &self.sens {
            Some(s) => s.n_maps(),
            None => self.coils,
        }
    }

    pub fn check_image(&self, x: &MultiChannelImage) -> Result<()> {
        if x.count() != self.image_channels() || x.shape() != self.shape {
            return shape_err(format!(
                "{} operator expects {} channels of {:?}, got {} of {:?}",
                self.kind.name(),
                self.image_channels(),
                self.shape,
                x.count(),
                x.shape()
            ));
        }
        Ok(())
    }

    pub fn check_kspace(&self, k: &MultiChannelImage) -> Result<()> {
        if k.count() != self.coils || k.shape() != self.shape {
            return shape_err(format!(
                "expected {} coils of {:?}, got {} of {:?}",
                self.coils,
                self.shape,
                k.count(),
                k.shape()
            ));
        }
        Ok(())
    }

    /// Image-domain coil images: `sum_m s_mq x_m` (SN) or `x` itself (PCN).
    pub fn coil_images(&self, x: &MultiChannelImage) -> Result<MultiChannelImage> {
        self.check_image(x)?;
        Ok(self.coil_images_unchecked(x))
    }

    pub(crate) fn coil_images_unchecked(&self, x: &MultiChannelImage) -> MultiChannelImage {
        match &self.sens {
            None => x.clone(),
            Some(sens) => {
                let (h, w) = self.shape;
                let coils = (0..self.coils)
                    .map(|q| {
                        let mut acc = vec![Complex64::default(); h * w];
                        for m in 0..sens.n_maps() {
                            for ((a, s), v) in acc.iter_mut().zip(sens.map(m, q).data()).zip(x.channel(m).data()) {
                                *a += s * v;
                            }
                        }
                        ComplexImage::from_raw(h, w, acc)
                    })
                    .collect();
                MultiChannelImage::from_raw(coils)
            }
        }
    }

    /// Adjoint of [`Self::coil_images`]: `x_m = sum_q conj(s_mq) c_q`.
    pub(crate) fn combine_coils_unchecked(&self, c: &MultiChannelImage) -> MultiChannelImage {
        match &self.sens {
            None => c.clone(),
            Some(sens) => {
                let (h, w) = self.shape;
                let maps = (0..sens.n_maps())
                    .map(|m| {
                        let mut acc = vec![Complex64::default(); h * w];
                        for q in 0..self.coils {
                            for ((a, s), v) in acc.iter_mut().zip(sens.map(m, q).data()).zip(c.channel(q).data()) {
                                *a += s.conj() * v;
                            }
                        }
                        ComplexImage::from_raw(h, w, acc)
                    })
                    .collect();
                MultiChannelImage::from_raw(maps)
            }
        }
    }

    pub fn forward(&self, x: &MultiChannelImage) -> Result<MultiChannelImage> {
        self.check_image(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &MultiChannelImage) -> MultiChannelImage {
        let coils = self.coil_images_unchecked(x);
        MultiChannelImage::from_raw(
            coils
                .channels()
                .iter()
                .map(|c| {
                    let mut k = fft2c(c);
                    self.mask.apply(&mut k);
                    k
                })
                .collect(),
        )
    }

    pub fn adjoint(&self, k: &MultiChannelImage) -> Result<MultiChannelImage> {
        self.check_kspace(k)?;
        Ok(self.adjoint_unchecked(k))
    }

    pub(crate) fn adjoint_unchecked(&self, k: &MultiChannelImage) -> MultiChannelImage {
        let coils = MultiChannelImage::from_raw(
            k.channels()
                .iter()
                .map(|kq| {
                    let mut kq = kq.clone();
                    self.mask.apply(&mut kq);
                    ifft2c(&kq)
                })
                .collect(),
        );
        self.combine_coils_unchecked(&coils)
    }

    /// `A^H A x`.
    pub fn normal(&self, x: &MultiChannelImage) -> Result<MultiChannelImage> {
        self.check_image(x)?;
        Ok(self.normal_unchecked(x))
    }

    pub(crate) fn normal_unchecked(&self, x: &MultiChannelImage) -> MultiChannelImage {
        self.adjoint_unchecked(&self.forward_unchecked(x))
    }

    /// Same operator restricted to a different sampling mask.
    pub fn with_mask(&self, mask: SamplingMask) -> Result<Self> {
        if mask.pe_lines() != self.shape.0 {
            return shape_err("mask line count does not match operator");
        }
        Ok(Self { mask, ..self.clone() })
    }
}

/// Root-sum-of-squares combination `sqrt(sum_c |x_c|^2)`.
pub fn rss(x: &MultiChannelImage) -> RealImage {
    let (h, w) = x.shape();
    let mut acc = vec![0.0; h * w];
    for c in x.channels() {
        for (a, z) in acc.iter_mut().zip(c.data()) {
            *a += z.norm_sqr();
        }
    }
    for a in acc.iter_mut() {
        *a = a.sqrt();
    }
    RealImage::from_raw(h, w, acc)
}
