//! Shared domain types.
//!
//! Layout is row-major with the phase-encode (PE) axis first: sample `(row, col)`
//! of an image lives at `row * width + col`, rows are PE lines and columns are
//! frequency-encode (FE) samples. Complex samples are stored as `Complex64`
//! (an interleaved `re, im` pair of `f64`).

pub mod config;
pub mod rng;
mod validate;

use num_complex::Complex64;

use crate::error::{shape_err, Error, Result};

pub use config::{parse_key_values, FinetuneMode, OptimizerKind, RunConfig};
pub use rng::{seeded_rng, substream, Rng64};
pub use validate::validate;

pub const MIN_DIM: usize = 4;

/// Network family: explicit sensitivities (SN) or parallel coils (PCN).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Sn,
    Pcn,
}

/// Data-consistency layer flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DcKind {
    Gd,
    Pm,
    Vs,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sn => "SN",
            Variant::Pcn => "PCN",
        }
    }
}

impl DcKind {
    pub fn name(self) -> &'static str {
        match self {
            DcKind::Gd => "GD",
            DcKind::Pm => "PM",
            DcKind::Vs => "VS",
        }
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < MIN_DIM || width < MIN_DIM {
        return shape_err(format!(
            "image {height}x{width} is smaller than {MIN_DIM}x{MIN_DIM}"
        ));
    }
    Ok(())
}

/// Dense 2-D complex image (or k-space grid).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return shape_err(format!(
                "data length {} != {height}x{width}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFiniteData(format!(
                "sample ({}, {})",
                i / width,
                i % width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= MIN_DIM && width >= MIN_DIM, "image too small");
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    /// Constructor for crate-internal arithmetic where the shape is known good.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn at(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Inner product `<self, other> = sum conj(self) * other`.
    pub fn dot(&self, other: &Self) -> Complex64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn abs(&self) -> RealImage {
        RealImage::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|z| z.norm()).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self::from_raw(self.height, self.width, self.data.iter().map(|&z| f(z)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self::from_raw(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Columns `start..start + len` of every row.
    pub fn crop_cols(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.width);
        let mut data = Vec::with_capacity(self.height * len);
        for row in self.data.chunks_exact(self.width) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Self::from_raw(self.height, len, data)
    }
}

/// Real-valued image, e.g. a magnitude or RSS reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct RealImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return shape_err(format!(
                "data length {} != {height}x{width}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData("real image".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= MIN_DIM && width >= MIN_DIM, "image too small");
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn masked(&self, mask: &ForegroundMask) -> Self {
        debug_assert_eq!(self.shape(), mask.shape());
        Self::from_raw(
            self.height,
            self.width,
            self.data
                .iter()
                .zip(mask.pixels())
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect(),
        )
    }

    pub fn crop_cols(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.width);
        let mut data = Vec::with_capacity(self.height * len);
        for row in self.data.chunks_exact(self.width) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Self::from_raw(self.height, len, data)
    }
}

/// A stack of equally shaped complex images: coil images (PCN), map images (SN)
/// or per-coil k-space.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelImage {
    channels: Vec<ComplexImage>,
}

impl MultiChannelImage {
    pub fn new(channels: Vec<ComplexImage>) -> Result<Self> {
        let Some(first) = channels.first() else {
            return shape_err("multi-channel image needs at least one channel");
        };
        let shape = first.shape();
        if let Some(i) = channels.iter().position(|c| c.shape() != shape) {
            return shape_err(format!(
                "channel {i} has shape {:?}, channel 0 has {:?}",
                channels[i].shape(),
                shape
            ));
        }
        Ok(Self { channels })
    }

    pub fn zeros(count: usize, height: usize, width: usize) -> Self {
        assert!(count >= 1);
        Self {
            channels: (0..count).map(|_| ComplexImage::zeros(height, width)).collect(),
        }
    }

    pub(crate) fn from_raw(channels: Vec<ComplexImage>) -> Self {
        debug_assert!(!channels.is_empty());
        Self { channels }
    }

    pub fn count(&self) -> usize {
        self.channels.len()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    pub fn channels(&self) -> &[ComplexImage] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &ComplexImage {
        &self.channels[i]
    }

    pub fn channel_data_mut(&mut self, i: usize) -> &mut [Complex64] {
        &mut self.channels[i].data
    }

    pub fn into_channels(self) -> Vec<ComplexImage> {
        self.channels
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.count() == other.count() && self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().all(ComplexImage::is_finite)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.channels.iter().map(ComplexImage::norm_sqr).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Complex64 {
        self.channels.iter().zip(&other.channels).map(|(a, b)| a.dot(b)).sum()
    }

    /// Real part of the inner product; the Euclidean inner product on `R^{2n}`.
    pub fn real_dot(&self, other: &Self) -> f64 {
        self.channels
            .iter()
            .zip(&other.channels)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64 + Copy) -> Self {
        Self::from_raw(self.channels.iter().map(|c| c.map(f)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64 + Copy) -> Self {
        debug_assert!(self.same_shape(other));
        Self::from_raw(
            self.channels
                .iter()
                .zip(&other.channels)
                .map(|(a, b)| a.zip_map(b, f))
                .collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += alpha * x` in place.
    pub fn axpy(&mut self, alpha: Complex64, x: &Self) {
        for (a, b) in self.channels.iter_mut().zip(&x.channels) {
            for (u, v) in a.data.iter_mut().zip(&b.data) {
                *u += alpha * v;
            }
        }
    }

    pub fn crop_cols(&self, start: usize, len: usize) -> Self {
        Self::from_raw(self.channels.iter().map(|c| c.crop_cols(start, len)).collect())
    }
}

/// Which phase-encode lines were acquired.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pe_line_flags: Vec<bool>,
    acl_count: usize,
    nominal_r: f64,
}

impl SamplingMask {
    pub fn new(pe_line_flags: Vec<bool>, acl_count: usize, nominal_r: f64) -> Result<Self> {
        let n = pe_line_flags.len();
        if n == 0 {
            return Err(Error::InvalidParams("mask has no lines".into()));
        }
        if acl_count > n {
            return Err(Error::InvalidParams(format!(
                "acl_count {acl_count} exceeds {n} lines"
            )));
        }
        if !(nominal_r.is_finite() && nominal_r >= 1.0) {
            return Err(Error::InvalidParams(format!("nominal R {nominal_r} < 1")));
        }
        let mask = Self {
            pe_line_flags,
            acl_count,
            nominal_r,
        };
        if !mask.acl_range().all(|l| mask.pe_line_flags[l]) {
            return Err(Error::InvalidParams("central calibration block not fully flagged".into()));
        }
        if mask.flagged_count() == 0 {
            return Err(Error::InvalidParams("mask flags no lines".into()));
        }
        Ok(mask)
    }

    pub fn full(pe_lines: usize) -> Self {
        Self {
            pe_line_flags: vec![true; pe_lines],
            acl_count: pe_lines,
            nominal_r: 1.0,
        }
    }

    pub fn pe_lines(&self) -> usize {
        self.pe_line_flags.len()
    }

    pub fn flags(&self) -> &[bool] {
        &self.pe_line_flags
    }

    pub fn is_sampled(&self, line: usize) -> bool {
        self.pe_line_flags[line]
    }

    pub fn acl_count(&self) -> usize {
        self.acl_count
    }

    pub fn nominal_r(&self) -> f64 {
        self.nominal_r
    }

    pub fn flagged_count(&self) -> usize {
        self.pe_line_flags.iter().filter(|&&f| f).count()
    }

    /// Measured acceleration: total lines over acquired lines.
    pub fn true_r(&self) -> f64 {
        self.pe_lines() as f64 / self.flagged_count() as f64
    }

    pub fn is_full(&self) -> bool {
        self.pe_line_flags.iter().all(|&f| f)
    }

    /// The calibration block, centred on line `pe_lines / 2`.
    pub fn acl_range(&self) -> std::ops::Range<usize> {
        acl_range(self.pe_lines(), self.acl_count)
    }

    /// Zero every unsampled line of a k-space grid in place.
    pub fn apply(&self, k: &mut ComplexImage) {
        let w = k.width;
        for (row, &f) in k.data.chunks_exact_mut(w).zip(&self.pe_line_flags) {
            if !f {
                row.fill(Complex64::new(0.0, 0.0));
            }
        }
    }
}

pub(crate) fn acl_range(pe_lines: usize, acl: usize) -> std::ops::Range<usize> {
    let start = pe_lines / 2 - acl / 2;
    start..start + acl
}

/// Multi-slice, multi-coil k-space with its sampling pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceVolume {
    slices: Vec<MultiChannelImage>,
    mask: SamplingMask,
    coil_count: usize,
}

impl KSpaceVolume {
    pub fn new(slices: Vec<MultiChannelImage>, mask: SamplingMask) -> Result<Self> {
        let Some(first) = slices.first() else {
            return shape_err("volume needs at least one slice");
        };
        let coil_count = first.count();
        let shape = first.shape();
        for (s, sl) in slices.iter().enumerate() {
            if sl.count() != coil_count {
                return shape_err(format!(
                    "slice {s} has {} coils, slice 0 has {coil_count}",
                    sl.count()
                ));
            }
            if sl.shape() != shape {
                return shape_err(format!("slice {s} shape {:?} != {:?}", sl.shape(), shape));
            }
        }
        if mask.pe_lines() != shape.0 {
            return shape_err(format!(
                "mask has {} lines, k-space has {} PE lines",
                mask.pe_lines(),
                shape.0
            ));
        }
        let vol = Self {
            slices,
            mask,
            coil_count,
        };
        vol.check_unsampled_zero()?;
        Ok(vol)
    }

    pub(crate) fn check_unsampled_zero(&self) -> Result<()> {
        let w = self.width();
        for (s, sl) in self.slices.iter().enumerate() {
            for (q, coil) in sl.channels().iter().enumerate() {
                for (line, row) in coil.data().chunks_exact(w).enumerate() {
                    if !self.mask.is_sampled(line) && row.iter().any(|z| z.re != 0.0 || z.im != 0.0) {
                        return Err(Error::MaskViolation(format!(
                            "slice {s}, coil {q}: unsampled line {line} is nonzero"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn slices(&self) -> &[MultiChannelImage] {
        &self.slices
    }

    pub fn slice(&self, i: usize) -> &MultiChannelImage {
        &self.slices[i]
    }

    /// Mutable sample access; callers are expected to re-run [`validate`].
    pub fn slice_data_mut(&mut self, slice: usize, coil: usize) -> &mut [Complex64] {
        self.slices[slice].channel_data_mut(coil)
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn coil_count(&self) -> usize {
        self.coil_count
    }

    pub fn shape(&self) -> (usize, usize) {
        self.slices[0].shape()
    }

    pub fn height(&self) -> usize {
        self.shape().0
    }

    pub fn width(&self) -> usize {
        self.shape().1
    }

    /// Retain only lines flagged in `mask`.
    pub fn undersample(&self, mask: &SamplingMask) -> Result<Self> {
        if mask.pe_lines() != self.height() {
            return shape_err(format!(
                "mask has {} lines, volume has {}",
                mask.pe_lines(),
                self.height()
            ));
        }
        let slices = self
            .slices
            .iter()
            .map(|sl| {
                MultiChannelImage::from_raw(
                    sl.channels()
                        .iter()
                        .map(|c| {
                            let mut c = c.clone();
                            mask.apply(&mut c);
                            c
                        })
                        .collect(),
                )
            })
            .collect();
        Self::new(slices, mask.clone())
    }

    pub fn into_parts(self) -> (Vec<MultiChannelImage>, SamplingMask) {
        (self.slices, self.mask)
    }
}

/// Coil sensitivities: `n_maps` sets of `Q` complex maps (soft-SENSE layout).
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivitySet {
    maps: Vec<MultiChannelImage>,
}

impl SensitivitySet {
    pub fn new(maps: Vec<MultiChannelImage>) -> Result<Self> {
        if !(1..=2).contains(&maps.len()) {
            return Err(Error::InvalidParams(format!(
                "n_maps must be 1 or 2, got {}",
                maps.len()
            )));
        }
        let first = &maps[0];
        for (m, set) in maps.iter().enumerate() {
            if !set.same_shape(first) {
                return shape_err(format!("map set {m} differs in coil count or shape from set 0"));
            }
            if !set.is_finite() {
                return Err(Error::NonFiniteData(format!("map set {m}")));
            }
        }
        Ok(Self { maps })
    }

    pub fn n_maps(&self) -> usize {
        self.maps.len()
    }

    pub fn coil_count(&self) -> usize {
        self.maps[0].count()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.maps[0].shape()
    }

    pub fn map_set(&self, m: usize) -> &MultiChannelImage {
        &self.maps[m]
    }

    pub fn map(&self, m: usize, q: usize) -> &ComplexImage {
        self.maps[m].channel(q)
    }

    pub fn map_sets(&self) -> &[MultiChannelImage] {
        &self.maps
    }

    /// Per-pixel `sum_m sum_q |s_mq|^2`.
    pub fn energy(&self) -> RealImage {
        let (h, w) = self.shape();
        let mut e = vec![0.0; h * w];
        for set in &self.maps {
            for c in set.channels() {
                for (acc, z) in e.iter_mut().zip(c.data()) {
                    *acc += z.norm_sqr();
                }
            }
        }
        RealImage::from_raw(h, w, e)
    }

    pub fn crop_cols(&self, start: usize, len: usize) -> Self {
        Self {
            maps: self.maps.iter().map(|m| m.crop_cols(start, len)).collect(),
        }
    }
}

/// Binary foreground mask in image space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForegroundMask {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        if pixels.len() != height * width {
            return shape_err(format!(
                "mask length {} != {height}x{width}",
                pixels.len()
            ));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![false; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn crop_cols(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.width);
        let mut pixels = Vec::with_capacity(self.height * len);
        for row in self.pixels.chunks_exact(self.width) {
            pixels.extend_from_slice(&row[start..start + len]);
        }
        Self {
            height: self.height,
            width: len,
            pixels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_small_and_nonfinite() {
        assert!(matches!(
            ComplexImage::new(3, 8, vec![Complex64::default(); 24]),
            Err(Error::ShapeMismatch(_))
        ));
        let mut d = vec![Complex64::default(); 16];
        d[5] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(ComplexImage::new(4, 4, d), Err(Error::NonFiniteData(_))));
    }

    #[test]
    fn mask_true_r_and_acl() {
        let mut flags = vec![false; 16];
        flags[6..10].fill(true);
        let m = SamplingMask::new(flags.clone(), 4, 4.0).unwrap();
        assert_eq!(m.true_r(), 4.0);
        assert_eq!(m.acl_range(), 6..10);
        flags[6] = false;
        assert!(SamplingMask::new(flags, 4, 4.0).is_err());
    }

    #[test]
    fn volume_rejects_nonzero_unsampled_line() {
        let mut flags = vec![true; 8];
        flags[0] = false;
        let mask = SamplingMask::new(flags, 2, 1.0).unwrap();
        let mut c = ComplexImage::zeros(8, 8);
        c.data_mut()[3] = Complex64::new(1.0, 0.0);
        let sl = MultiChannelImage::new(vec![c]).unwrap();
        assert!(matches!(
            KSpaceVolume::new(vec![sl], mask),
            Err(Error::MaskViolation(_))
        ));
    }

    proptest! {
        #[test]
        fn constructors_enforce_shape(h in 1usize..12, w in 1usize..12, extra in 0usize..3) {
            let n = h * w + extra;
            let r = ComplexImage::new(h, w, vec![Complex64::new(1.0, -1.0); n]);
            let ok = h >= MIN_DIM && w >= MIN_DIM && extra == 0;
            prop_assert_eq!(r.is_ok(), ok);
            if let Ok(img) = r {
                prop_assert_eq!(img.data().len(), img.height() * img.width());
                let mc = MultiChannelImage::new(vec![img.clone(), img]).unwrap();
                prop_assert_eq!(mc.count(), 2);
            }
        }

        #[test]
        fn multichannel_rejects_mixed_shapes(h in 4usize..9, w in 4usize..9) {
            let a = ComplexImage::zeros(h, w);
            let b = ComplexImage::zeros(h + 1, w);
            prop_assert!(MultiChannelImage::new(vec![a, b]).is_err());
        }
    }
}
