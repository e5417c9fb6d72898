//! Centered orthonormal Fourier transforms.
//!
//! `fft2c = fftshift . DFT . ifftshift` scaled by `1/sqrt(HW)`, so the DC
//! sample sits at index `(H/2, W/2)` (integer division) and the transform is
//! unitary. Works for any size; odd sizes shift by `floor(N/2)` forward and
//! `ceil(N/2)` back.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::domain::ComplexImage;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, dir: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, dir))
}

/// Centered, orthonormal 1-D transform of `buf` in place.
fn centered_1d(buf: &mut [Complex64], scratch: &mut Vec<Complex64>, fft: &dyn Fft<f64>) {
    let n = buf.len();
    // ifftshift
    buf.rotate_left(n / 2);
    scratch.resize(fft.get_inplace_scratch_len(), Complex64::default());
    fft.process_with_scratch(buf, scratch);
    // fftshift
    buf.rotate_right(n / 2);
    let s = 1.0 / (n as f64).sqrt();
    for z in buf.iter_mut() {
        *z *= s;
    }
}

fn transform_rows(data: &mut [Complex64], width: usize, dir: FftDirection) {
    let fft = plan(width, dir);
    let mut scratch = Vec::new();
    for row in data.chunks_exact_mut(width) {
        centered_1d(row, &mut scratch, fft.as_ref());
    }
}

fn transform_cols(data: &mut [Complex64], height: usize, width: usize, dir: FftDirection) {
    let fft = plan(height, dir);
    let mut scratch = Vec::new();
    let mut col = vec![Complex64::default(); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = data[r * width + c];
        }
        centered_1d(&mut col, &mut scratch, fft.as_ref());
        for r in 0..height {
            data[r * width + c] = col[r];
        }
    }
}

fn transform2(img: &ComplexImage, dir: FftDirection) -> ComplexImage {
    let (h, w) = img.shape();
    let mut data = img.data().to_vec();
    transform_rows(&mut data, w, dir);
    transform_cols(&mut data, h, w, dir);
    ComplexImage::from_raw(h, w, data)
}

pub fn fft2c(img: &ComplexImage) -> ComplexImage {
    transform2(img, FftDirection::Forward)
}

pub fn ifft2c(k: &ComplexImage) -> ComplexImage {
    transform2(k, FftDirection::Inverse)
}

/// Centered orthonormal transform along the frequency-encode (column) axis only.
pub fn fft_fe(img: &ComplexImage) -> ComplexImage {
    let (h, w) = img.shape();
    let mut data = img.data().to_vec();
    transform_rows(&mut data, w, FftDirection::Forward);
    ComplexImage::from_raw(h, w, data)
}

pub fn ifft_fe(k: &ComplexImage) -> ComplexImage {
    let (h, w) = k.shape();
    let mut data = k.data().to_vec();
    transform_rows(&mut data, w, FftDirection::Inverse);
    ComplexImage::from_raw(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::seeded_rng;
    use rand::Rng;
    use std::f64::consts::PI;

    fn random(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = seeded_rng(seed);
        ComplexImage::from_fn(h, w, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).unwrap()
    }

    /// Direct O(N^2) centered DFT, used as an oracle.
    fn naive_fft2c(x: &ComplexImage) -> ComplexImage {
        let (h, w) = x.shape();
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let s = 1.0 / ((h * w) as f64).sqrt();
        ComplexImage::from_fn(h, w, |ku, kv| {
            let mut acc = Complex64::default();
            for r in 0..h {
                for c in 0..w {
                    let ph = -2.0 * PI
                        * ((ku as f64 - ch) * (r as f64 - ch) / h as f64
                            + (kv as f64 - cw) * (c as f64 - cw) / w as f64);
                    acc += x.at(r, c) * Complex64::from_polar(1.0, ph);
                }
            }
            acc * s
        })
        .unwrap()
    }

    fn max_diff(a: &ComplexImage, b: &ComplexImage) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn inverse_pair() {
        let x = random(16, 16, 1);
        assert!(max_diff(&ifft2c(&fft2c(&x)), &x) < 1e-12);
        let y = random(12, 20, 2);
        assert!(max_diff(&fft2c(&ifft2c(&y)), &y) < 1e-12);
    }

    #[test]
    fn constant_maps_to_center_impulse() {
        let c = Complex64::new(0.7, -0.2);
        let x = ComplexImage::new(8, 12, vec![c; 96]).unwrap();
        let k = fft2c(&x);
        let peak = c * (96f64).sqrt();
        for r in 0..8 {
            for col in 0..12 {
                let want = if (r, col) == (4, 6) { peak } else { Complex64::default() };
                assert!((k.at(r, col) - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn parseval() {
        let x = random(16, 16, 3);
        assert!((fft2c(&x).norm_sqr().sqrt() - x.norm_sqr().sqrt()).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_dft_even_and_odd() {
        for &(h, w) in &[(8, 8), (6, 10), (5, 7)] {
            let x = random(h, w, 4);
            assert!(max_diff(&fft2c(&x), &naive_fft2c(&x)) < 1e-12, "{h}x{w}");
            assert!(max_diff(&ifft2c(&fft2c(&x)), &x) < 1e-12);
        }
    }

    #[test]
    fn fe_transform_is_row_half_of_2d() {
        let x = random(8, 16, 5);
        let y = fft_fe(&x);
        assert!(max_diff(&ifft_fe(&y), &x) < 1e-12);
        assert!((y.norm_sqr() - x.norm_sqr()).abs() < 1e-10);
    }
}
