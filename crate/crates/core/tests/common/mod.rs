#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use sigmanet::domain::{ComplexImage, MultiChannelImage, Rng64, SamplingMask, SensitivitySet, Variant};
use sigmanet::operators::{rss, ForwardOperator};

pub fn rand_mc(rng: &mut Rng64, c: usize, h: usize, w: usize) -> MultiChannelImage {
    MultiChannelImage::new(
        (0..c)
            .map(|_| ComplexImage::from_fn(h, w, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).unwrap())
            .collect(),
    )
    .unwrap()
}

/// Random maps scaled so that the energy over all map sets is at most 1 per pixel.
pub fn rand_sens(rng: &mut Rng64, n_maps: usize, q: usize, h: usize, w: usize) -> SensitivitySet {
    let sets: Vec<MultiChannelImage> = (0..n_maps).map(|_| rand_mc(rng, q, h, w)).collect();
    let mut energy = vec![0.0; h * w];
    for s in &sets {
        for (e, r) in energy.iter_mut().zip(rss(s).data()) {
            *e += r * r;
        }
    }
    let scale: Vec<f64> = energy.iter().map(|e| 1.0 / e.sqrt()).collect();
    SensitivitySet::new(
        sets.iter()
            .map(|s| {
                MultiChannelImage::new(
                    s.channels()
                        .iter()
                        .map(|c| ComplexImage::new(h, w, c.data().iter().zip(&scale).map(|(z, k)| z * *k).collect()).unwrap())
                        .collect(),
                )
                .unwrap()
            })
            .collect(),
    )
    .unwrap()
}

/// Random line mask with the two central lines always sampled.
pub fn rand_mask(rng: &mut Rng64, pe: usize) -> SamplingMask {
    let mut flags: Vec<bool> = (0..pe).map(|_| rng.gen_bool(0.4)).collect();
    flags[pe / 2 - 1] = true;
    flags[pe / 2] = true;
    let n = flags.iter().filter(|f| **f).count();
    SamplingMask::new(flags, 2, pe as f64 / n as f64).unwrap()
}

/// Undersampled k-space consistent with the mask (rows off the mask zeroed).
pub fn rand_kspace(rng: &mut Rng64, q: usize, mask: &SamplingMask, w: usize) -> MultiChannelImage {
    let h = mask.pe_lines();
    let mut k = rand_mc(rng, q, h, w);
    for c in 0..q {
        let d = k.channel_data_mut(c);
        for (line, row) in d.chunks_exact_mut(w).enumerate() {
            if !mask.is_sampled(line) {
                row.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            }
        }
    }
    k
}

pub fn flatten(x: &MultiChannelImage) -> Vec<f64> {
    x.channels().iter().flat_map(|c| c.data().iter().flat_map(|z| [z.re, z.im])).collect()
}

pub fn unflatten(v: &[f64], c: usize, h: usize, w: usize) -> MultiChannelImage {
    MultiChannelImage::new(
        (0..c)
            .map(|ch| {
                let base = ch * h * w * 2;
                ComplexImage::new(h, w, (0..h * w).map(|p| Complex64::new(v[base + 2 * p], v[base + 2 * p + 1])).collect()).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

/// Relative error between a central-difference directional derivative and `grad . dir`.
pub fn directional_error(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], dir: &[f64], h: f64) -> f64 {
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
    let fd = (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h);
    let an: f64 = grad.iter().zip(dir).map(|(g, d)| g * d).sum();
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-300)
}

/// Worst relative error over `n` random directions plus `coords` single coordinates.
pub fn gradient_error(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], rng: &mut Rng64, n: usize, coords: usize, h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let dir: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst = worst.max(directional_error(&f, x, grad, &dir, h));
    }
    // coordinates with a non-negligible gradient, so the relative error is meaningful
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let candidates: Vec<usize> = (0..x.len()).filter(|&i| grad[i].abs() > 1e-3 * gmax).collect();
    for _ in 0..coords.min(candidates.len()) {
        let i = candidates[rng.gen_range(0..candidates.len())];
        let mut dir = vec![0.0; x.len()];
        dir[i] = 1.0;
        worst = worst.max(directional_error(&f, x, grad, &dir, h));
    }
    worst
}

/// `|<Ax, k> - <x, A^H k>| / max(|<Ax, k>|, tiny)` for one random pair.
pub fn adjoint_error(op: &ForwardOperator, rng: &mut Rng64) -> f64 {
    let (h, w) = op.shape();
    let x = rand_mc(rng, op.image_channels(), h, w);
    let k = rand_kspace(rng, op.coils(), op.mask(), w);
    let lhs = op.forward(&x).unwrap().dot(&k);
    let rhs = x.dot(&op.adjoint(&k).unwrap());
    (lhs - rhs).norm() / lhs.norm().max(1e-300)
}

/// Random SN (with `n_maps`) or PCN operator on an `h x w` grid.
pub fn rand_operator(rng: &mut Rng64, variant: Variant, q: usize, n_maps: usize, h: usize, w: usize) -> ForwardOperator {
    let mask = rand_mask(rng, h);
    match variant {
        Variant::Sn => ForwardOperator::sn(rand_sens(rng, n_maps, q, h, w), mask).unwrap(),
        Variant::Pcn => ForwardOperator::pcn(q, (h, w), mask).unwrap(),
    }
}

pub fn to_vector(x: &MultiChannelImage) -> DVector<Complex64> {
    DVector::from_iterator(x.count() * x.height() * x.width(), x.channels().iter().flat_map(|c| c.data().iter().copied()))
}

pub fn from_vector(v: &DVector<Complex64>, c: usize, h: usize, w: usize) -> MultiChannelImage {
    MultiChannelImage::new((0..c).map(|ch| ComplexImage::new(h, w, v.as_slice()[ch * h * w..(ch + 1) * h * w].to_vec()).unwrap()).collect()).unwrap()
}

/// Dense matrix of a complex-linear map from images of `c_in` channels, built column by column.
pub fn matrixize(f: impl Fn(&MultiChannelImage) -> MultiChannelImage, c_in: usize, h: usize, w: usize) -> DMatrix<Complex64> {
    let n = c_in * h * w;
    let cols: Vec<DVector<Complex64>> = (0..n)
        .map(|j| {
            let mut e = DVector::zeros(n);
            e[j] = Complex64::new(1.0, 0.0);
            to_vector(&f(&from_vector(&e, c_in, h, w)))
        })
        .collect();
    DMatrix::from_columns(&cols)
}
