//! Reconstruction metrics and the Σ-net ensemble.

use std::fmt::Write as _;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use crate::domain::{ForegroundMask, RealImage};
use crate::error::{Error, Result};
use crate::learn::ssim_score;

pub const FG_WEIGHTS: [f64; 3] = [0.3, 0.2, 0.5];

/// Inputs of the ensemble; `x_sn` is already the mean over the SN family
/// (excluding the finetuned model).
#[derive(Clone, Debug)]
pub struct EnsembleInputs {
    pub x_sn: RealImage,
    pub x_pcn: RealImage,
    pub x_sn_ft: RealImage,
    pub m: ForegroundMask,
}

/// Foreground: `0.3 x_sn + 0.2 x_pcn + 0.5 x_sn_ft`; background: `(x_sn + x_pcn) / 2`.
pub fn ensemble(inp: &EnsembleInputs) -> Result<RealImage> {
    let shape = inp.m.shape();
    if inp.x_sn.shape() != shape || inp.x_pcn.shape() != shape || inp.x_sn_ft.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "ensemble inputs {:?}, {:?}, {:?} vs mask {shape:?}",
            inp.x_sn.shape(),
            inp.x_pcn.shape(),
            inp.x_sn_ft.shape()
        )));
    }
    let [w_sn, w_pcn, w_ft] = FG_WEIGHTS;
    let data = (0..shape.0 * shape.1)
        .map(|p| {
            let (a, b, c) = (inp.x_sn.data()[p], inp.x_pcn.data()[p], inp.x_sn_ft.data()[p]);
            if inp.m.pixels()[p] {
                w_sn * a + w_pcn * b + w_ft * c
            } else {
                0.5 * (a + b)
            }
        })
        .collect();
    RealImage::new(shape.0, shape.1, data)
}

/// Pixel-wise mean of several images, e.g. the SN family.
pub fn mean_image(images: &[RealImage]) -> Result<RealImage> {
    let first = images.first().ok_or_else(|| Error::InvalidParams("no images to average".into()))?;
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::ShapeMismatch("images to average differ in shape".into()));
    }
    let n = images.len() as f64;
    let mut acc = vec![0.0; first.data().len()];
    for img in images {
        acc.iter_mut().zip(img.data()).for_each(|(a, v)| *a += v);
    }
    RealImage::new(first.height(), first.width(), acc.into_iter().map(|v| v / n).collect())
}

fn check_pair(x: &RealImage, r: &RealImage) -> Result<()> {
    if x.shape() == r.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("image {:?} vs reference {:?}", x.shape(), r.shape())))
    }
}

fn sq_err(x: &RealImage, r: &RealImage) -> f64 {
    x.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn sq_norm(r: &RealImage) -> f64 {
    r.data().iter().map(|v| v * v).sum()
}

/// `||x - ref||^2 / ||ref||^2`.
pub fn nmse(x: &RealImage, reference: &RealImage) -> Result<f64> {
    check_pair(x, reference)?;
    let d = sq_norm(reference);
    if d == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(sq_err(x, reference) / d)
}

/// `10 log10(L^2 N / ||x - ref||^2)`; identical images give `+inf`.
pub fn psnr(x: &RealImage, reference: &RealImage, data_range: f64) -> Result<f64> {
    check_pair(x, reference)?;
    let e = sq_err(x, reference);
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range * x.data().len() as f64 / e).log10())
}

/// SSIM over all fully contained windows.
pub fn ssim_eval(x: &RealImage, reference: &RealImage, data_range: f64) -> Result<f64> {
    check_pair(x, reference)?;
    ssim_score(x, reference, &ForegroundMask::full(x.height(), x.width()), data_range)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceMetrics {
    pub nmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-slice values plus the volume-wise aggregate (NMSE and PSNR over the
/// stacked volume, SSIM averaged over slices), all with one data range.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMetrics {
    pub slices: Vec<SliceMetrics>,
    pub nmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub data_range: f64,
}

pub fn volume_metrics(xs: &[RealImage], refs: &[RealImage]) -> Result<VolumeMetrics> {
    if xs.len() != refs.len() || xs.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} images vs {} references", xs.len(), refs.len())));
    }
    let data_range = refs.iter().map(RealImage::max).fold(0.0, f64::max);
    if data_range <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let mut slices = Vec::with_capacity(xs.len());
    let (mut err, mut energy, mut pixels, mut ssim_sum) = (0.0, 0.0, 0usize, 0.0);
    for (x, r) in xs.iter().zip(refs) {
        check_pair(x, r)?;
        let e = sq_err(x, r);
        let s = ssim_eval(x, r, data_range)?;
        slices.push(SliceMetrics {
            nmse: if sq_norm(r) > 0.0 { e / sq_norm(r) } else { f64::NAN },
            psnr: psnr(x, r, data_range)?,
            ssim: s,
        });
        err += e;
        energy += sq_norm(r);
        pixels += r.data().len();
        ssim_sum += s;
    }
    Ok(VolumeMetrics {
        nmse: err / energy,
        psnr: if err == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (data_range * data_range * pixels as f64 / err).log10()
        },
        ssim: ssim_sum / xs.len() as f64,
        slices,
        data_range,
    })
}

pub const METRICS_HEADER: &str = "volume,slice,nmse,psnr,ssim";

/// Metrics report: a `#` line recording the data-range policy, per-slice rows,
/// one `<name>,all,...` row per volume and a final `mean,all,...` row.
pub fn metrics_csv(volumes: &[(String, VolumeMetrics)]) -> String {
    let mut s = String::from("# data_range=max of reference volume");
    for (name, v) in volumes {
        let _ = write!(s, "; {name}={:e}", v.data_range);
    }
    let _ = writeln!(s, "\n{METRICS_HEADER}");
    for (name, v) in volumes {
        for (i, m) in v.slices.iter().enumerate() {
            let _ = writeln!(s, "{name},{i},{:e},{:e},{:e}", m.nmse, m.psnr, m.ssim);
        }
        let _ = writeln!(s, "{name},all,{:e},{:e},{:e}", v.nmse, v.psnr, v.ssim);
    }
    let n = volumes.len().max(1) as f64;
    let mean = |f: fn(&VolumeMetrics) -> f64| volumes.iter().map(|(_, v)| f(v)).sum::<f64>() / n;
    let _ = writeln!(s, "mean,all,{:e},{:e},{:e}", mean(|v| v.nmse), mean(|v| v.psnr), mean(|v| v.ssim));
    s
}

/// Min and max over a whole volume, used as the PNG display window.
pub fn volume_window(images: &[RealImage]) -> (f64, f64) {
    images
        .iter()
        .flat_map(|i| i.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// 8-bit grayscale PNG of `img` windowed to `[lo, hi]`.
pub fn png_bytes(img: &RealImage, (lo, hi): (f64, f64)) -> Result<Vec<u8>> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray = GrayImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let v = (img.at(y as usize, x as usize) - lo) / span;
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let mut out = Cursor::new(Vec::new());
    gray.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, img: &RealImage, window: (f64, f64)) -> Result<()> {
    std::fs::write(path, png_bytes(img, window)?)?;
    Ok(())
}
