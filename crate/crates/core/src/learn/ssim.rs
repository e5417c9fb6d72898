//! Masked SSIM over 7x7 uniform windows with its exact gradient.

use crate::domain::{ForegroundMask, RealImage};
use crate::error::{Error, Result};

pub const WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Score and gradient with respect to the first image.
#[derive(Clone, Debug)]
pub struct SsimOutput {
    pub score: f64,
    pub grad: RealImage,
}

/// Mean SSIM over every fully contained window whose centre pixel is in `mask`.
/// Local statistics use the unbiased (n - 1) covariance.
pub fn ssim(a: &RealImage, b: &RealImage, mask: &ForegroundMask, data_range: f64) -> Result<SsimOutput> {
    ssim_impl(a, b, mask, data_range, true)
}

/// Score only; skips the gradient accumulation.
pub fn ssim_score(a: &RealImage, b: &RealImage, mask: &ForegroundMask, data_range: f64) -> Result<f64> {
    Ok(ssim_impl(a, b, mask, data_range, false)?.score)
}

fn ssim_impl(a: &RealImage, b: &RealImage, mask: &ForegroundMask, data_range: f64, want_grad: bool) -> Result<SsimOutput> {
    if a.shape() != b.shape() || a.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {:?}, {:?}, mask {:?}",
            a.shape(),
            b.shape(),
            mask.shape()
        )));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::InvalidParams(format!("data_range {data_range} must be positive")));
    }
    let (h, w) = a.shape();
    let r = WINDOW / 2;
    if h < WINDOW || w < WINDOW {
        return Err(Error::EmptyMask);
    }
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let n = (WINDOW * WINDOW) as f64;
    let (ad, bd) = (a.data(), b.data());

    // per-centre coefficients of d S / d a_p = c0 + ca * a_p + cb * b_p
    let mut c0 = vec![0.0; h * w];
    let mut ca = vec![0.0; h * w];
    let mut cb = vec![0.0; h * w];
    let mut total = 0.0;
    let mut count = 0usize;
    for i in r..h - r {
        for j in r..w - r {
            if !mask.get(i, j) {
                continue;
            }
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in i - r..=i + r {
                for x in j - r..=j + r {
                    let (u, v) = (ad[y * w + x], bd[y * w + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = (saa - n * mu_a * mu_a) / (n - 1.0);
            let var_b = (sbb - n * mu_b * mu_b) / (n - 1.0);
            let cov = (sab - n * mu_a * mu_b) / (n - 1.0);
            let a1 = 2.0 * mu_a * mu_b + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = mu_a * mu_a + mu_b * mu_b + c1;
            let b2 = var_a + var_b + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            count += 1;
            if want_grad {
                let d_mu = 2.0 * mu_b * a2 / (b1 * b2) - s * 2.0 * mu_a / b1;
                let d_cov = 2.0 * a1 / (b1 * b2);
                let d_var = -s / b2;
                let k = i * w + j;
                c0[k] = d_mu / n - d_cov * mu_b / (n - 1.0) - 2.0 * d_var * mu_a / (n - 1.0);
                ca[k] = 2.0 * d_var / (n - 1.0);
                cb[k] = d_cov / (n - 1.0);
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    let mut grad = vec![0.0; h * w];
    if want_grad {
        let (s0, sa, sb) = (box_sum(&c0, h, w, r), box_sum(&ca, h, w, r), box_sum(&cb, h, w, r));
        for p in 0..h * w {
            grad[p] = (s0[p] + sa[p] * ad[p] + sb[p] * bd[p]) * inv;
        }
    }
    Ok(SsimOutput {
        score: total * inv,
        grad: RealImage::from_raw(h, w, grad),
    })
}

/// Sum over the (2r+1)^2 neighbourhood, truncated at the borders.
fn box_sum(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let lo = j.saturating_sub(r);
            let hi = (j + r).min(w - 1);
            rows[i * w + j] = src[i * w + lo..=i * w + hi].iter().sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(h - 1);
        for j in 0..w {
            out[i * w + j] = (lo..=hi).map(|y| rows[y * w + j]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::seeded_rng;
    use rand::Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> RealImage {
        let mut rng = seeded_rng(seed);
        RealImage::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_images_score_one() {
        let a = rand_img(16, 16, 1);
        let out = ssim(&a, &a, &ForegroundMask::full(16, 16), 1.0).unwrap();
        assert!((out.score - 1.0).abs() < 1e-12);
        assert!(out.grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn constant_offset_lowers_score() {
        let a = rand_img(16, 16, 2);
        let b = RealImage::new(16, 16, a.data().iter().map(|v| v + 5.0).collect()).unwrap();
        assert!(ssim_score(&a, &b, &ForegroundMask::full(16, 16), 1.0).unwrap() < 1.0);
    }

    #[test]
    fn empty_mask_and_small_image() {
        let a = rand_img(16, 16, 3);
        assert!(matches!(ssim(&a, &a, &ForegroundMask::empty(16, 16), 1.0), Err(Error::EmptyMask)));
        // only the border is masked: no window centre qualifies
        let mut px = vec![false; 256];
        px[0] = true;
        let m = ForegroundMask::new(16, 16, px).unwrap();
        assert!(matches!(ssim(&a, &a, &m, 1.0), Err(Error::EmptyMask)));
        let s = rand_img(6, 6, 4);
        assert!(matches!(ssim(&s, &s, &ForegroundMask::full(6, 6), 1.0), Err(Error::EmptyMask)));
    }

    #[test]
    fn symmetric() {
        let a = rand_img(12, 14, 5);
        let b = rand_img(12, 14, 6);
        let m = ForegroundMask::full(12, 14);
        let ab = ssim_score(&a, &b, &m, 1.0).unwrap();
        let ba = ssim_score(&b, &a, &m, 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn box_sum_matches_direct() {
        let a = rand_img(9, 11, 7);
        let s = box_sum(a.data(), 9, 11, 3);
        for i in 0..9usize {
            for j in 0..11usize {
                let mut d = 0.0;
                for y in i.saturating_sub(3)..(i + 4).min(9) {
                    for x in j.saturating_sub(3)..(j + 4).min(11) {
                        d += a.at(y, x);
                    }
                }
                assert!((d - s[i * 11 + j]).abs() < 1e-12);
            }
        }
    }
}
