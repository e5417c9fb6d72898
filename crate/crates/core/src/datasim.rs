//! Synthetic multi-coil data: ellipse phantoms, Gaussian coil profiles,
//! line-undersampling masks, calibration-based sensitivity estimates,
//! foreground masks and background noise-level replacement.
//!
//! Phantom geometry lives in normalised coordinates `[-1, 1]^2`; pixel
//! `(r, c)` has centre `x = (2c + 1) / W - 1`, `y = (2r + 1) / H - 1`.

use std::f64::consts::PI;
use std::ops::Range;

use log::info;
use num_complex::Complex64;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::domain::config::{parse_key_values, parse_value};
use crate::domain::{
    acl_range, substream, ComplexImage, ForegroundMask, KSpaceVolume, MultiChannelImage, RealImage, Rng64,
    SamplingMask, SensitivitySet,
};
use crate::error::{Error, Result};
use crate::operators::{fft2c, ifft2c, rss};

pub const MIN_ACS_LINES: usize = 8;
pub const NOISE_PATCH: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    /// Rotation in degrees, counter-clockwise.
    pub angle: f64,
    pub amplitude: Complex64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }

    fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (a, b) = self.axes;
        (
            (a * a * c * c + b * b * s * s).sqrt(),
            (a * a * s * s + b * b * c * c).sqrt(),
        )
    }
}

/// Gaussian receive profile; `width: None` means a flat unit profile.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilProfile {
    pub center: (f64, f64),
    pub width: Option<f64>,
    /// Constant phase offset in radians.
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub ellipses: Vec<Ellipse>,
    pub coils: Vec<CoilProfile>,
    /// Standard deviation of the complex k-space noise, `E|n|^2 = sigma^2`.
    pub noise_sigma: f64,
}

/// Modified Shepp-Logan ellipses (Toft's higher-contrast variant) with the
/// two ventricles at 0.15 instead of 0, so every pixel inside the skull carries
/// signal.
pub fn shepp_logan_ellipses() -> Vec<Ellipse> {
    let table: [(f64, f64, f64, f64, f64, f64); 10] = [
        (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
        (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
        (0.22, 0.0, 0.11, 0.31, -18.0, -0.05),
        (-0.22, 0.0, 0.16, 0.41, 18.0, -0.05),
        (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
        (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
        (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
        (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
        (0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
        (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
    ];
    table
        .iter()
        .map(|&(x, y, a, b, ang, amp)| Ellipse {
            center: (x, y),
            axes: (a, b),
            angle: ang,
            amplitude: Complex64::new(amp, 0.0),
        })
        .collect()
}

/// `count` Gaussian coils evenly spaced on a circle around the object.
pub fn ring_coils(count: usize, radius: f64, width: f64) -> Vec<CoilProfile> {
    (0..count)
        .map(|q| {
            let t = 2.0 * PI * q as f64 / count as f64;
            CoilProfile {
                center: (radius * t.cos(), radius * t.sin()),
                width: Some(width),
                phase: t / 2.0,
            }
        })
        .collect()
}

impl PhantomSpec {
    pub fn shepp_logan(height: usize, width: usize, coils: usize) -> Self {
        Self {
            height,
            width,
            ellipses: shepp_logan_ellipses(),
            coils: ring_coils(coils, 1.2, 0.9),
            noise_sigma: 0.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.height < 4 || self.width < 4 {
            return bad(format!("image {}x{} too small", self.height, self.width));
        }
        if self.coils.is_empty() {
            return bad("at least one coil required".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        for (i, e) in self.ellipses.iter().enumerate() {
            let (ex, ey) = e.half_extent();
            if !(e.axes.0 > 0.0 && e.axes.1 > 0.0) {
                return bad(format!("ellipse {i} has non-positive axes"));
            }
            if e.center.0.abs() + ex > 1.0 || e.center.1.abs() + ey > 1.0 {
                return bad(format!("ellipse {i} leaves the unit square"));
            }
        }
        for (q, c) in self.coils.iter().enumerate() {
            if let Some(w) = c.width {
                if !(w > 0.0 && w.is_finite()) {
                    return bad(format!("coil {q} width must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Parse from `key = value` text.
    ///
    /// Keys: `height`, `width`, `coils` (ring count), `coil_radius`,
    /// `coil_width` (0 = flat), `noise_sigma`, `shepp_logan` (bool, default
    /// true) and repeatable `ellipse = cx, cy, a, b, angle_deg, re[, im]`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut height = 64;
        let mut width = 64;
        let mut coils = 4usize;
        let mut radius = 1.2;
        let mut coil_width = 0.9;
        let mut noise = 0.0;
        let mut base = true;
        let mut extra = Vec::new();
        for e in parse_key_values(text)? {
            match e.key.as_str() {
                "height" => height = parse_value(&e)?,
                "width" => width = parse_value(&e)?,
                "coils" => coils = parse_value(&e)?,
                "coil_radius" => radius = parse_value(&e)?,
                "coil_width" => coil_width = parse_value(&e)?,
                "noise_sigma" => noise = parse_value(&e)?,
                "shepp_logan" => {
                    base = matches!(e.value.to_ascii_lowercase().as_str(), "true" | "1" | "yes" | "on")
                }
                "ellipse" => {
                    let nums: std::result::Result<Vec<f64>, _> =
                        e.value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                    let nums = nums.map_err(|_| Error::Config {
                        line: e.line,
                        msg: format!("bad ellipse {:?}", e.value),
                    })?;
                    if !(6..=7).contains(&nums.len()) {
                        return Err(Error::Config {
                            line: e.line,
                            msg: "ellipse needs cx, cy, a, b, angle, re[, im]".into(),
                        });
                    }
                    extra.push(Ellipse {
                        center: (nums[0], nums[1]),
                        axes: (nums[2], nums[3]),
                        angle: nums[4],
                        amplitude: Complex64::new(nums[5], nums.get(6).copied().unwrap_or(0.0)),
                    });
                }
                other => {
                    return Err(Error::Config {
                        line: e.line,
                        msg: format!("unknown phantom key `{other}`"),
                    })
                }
            }
        }
        let mut ellipses = if base { shepp_logan_ellipses() } else { Vec::new() };
        ellipses.extend(extra);
        let coils = if coil_width > 0.0 {
            ring_coils(coils, radius, coil_width)
        } else {
            (0..coils)
                .map(|_| CoilProfile {
                    center: (0.0, 0.0),
                    width: None,
                    phase: 0.0,
                })
                .collect()
        };
        let spec = Self {
            height,
            width,
            ellipses,
            coils,
            noise_sigma: noise,
        };
        spec.check()?;
        Ok(spec)
    }

    fn coord(&self, r: usize, c: usize) -> (f64, f64) {
        (
            (2 * c + 1) as f64 / self.width as f64 - 1.0,
            (2 * r + 1) as f64 / self.height as f64 - 1.0,
        )
    }

    pub fn object(&self) -> ComplexImage {
        ComplexImage::from_fn(self.height, self.width, |r, c| {
            let (x, y) = self.coord(r, c);
            self.ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.amplitude)
                .sum()
        })
        .expect("finite by construction")
    }

    /// Analytic support: pixels inside the first (outermost) ellipse.
    pub fn support(&self) -> ForegroundMask {
        let mut px = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let (x, y) = self.coord(r, c);
                px.push(self.ellipses.first().is_some_and(|e| e.contains(x, y)));
            }
        }
        ForegroundMask::new(self.height, self.width, px).expect("shape by construction")
    }

    /// Coil maps normalised to unit root-sum-of-squares at every pixel.
    pub fn sensitivities(&self) -> SensitivitySet {
        let (h, w) = (self.height, self.width);
        let raw: Vec<Vec<Complex64>> = self
            .coils
            .iter()
            .map(|coil| {
                let mut v = Vec::with_capacity(h * w);
                for r in 0..h {
                    for c in 0..w {
                        let (x, y) = self.coord(r, c);
                        let mag = match coil.width {
                            None => 1.0,
                            Some(s) => {
                                let d2 = (x - coil.center.0).powi(2) + (y - coil.center.1).powi(2);
                                (-d2 / (2.0 * s * s)).exp()
                            }
                        };
                        v.push(Complex64::from_polar(mag, coil.phase));
                    }
                }
                v
            })
            .collect();
        let maps = (0..raw.len())
            .map(|q| {
                let data = (0..h * w)
                    .map(|p| {
                        let e: f64 = raw.iter().map(|m| m[p].norm_sqr()).sum::<f64>().sqrt();
                        if e > 0.0 {
                            raw[q][p] / e
                        } else {
                            Complex64::new((raw.len() as f64).sqrt().recip(), 0.0)
                        }
                    })
                    .collect();
                ComplexImage::from_raw(h, w, data)
            })
            .collect();
        SensitivitySet::new(vec![MultiChannelImage::from_raw(maps)]).expect("valid by construction")
    }

    /// A perturbed copy: inner ellipse amplitudes, centres and axes jittered.
    pub fn jittered(&self, rng: &mut Rng64) -> Self {
        let mut out = self.clone();
        for (i, e) in out.ellipses.iter_mut().enumerate() {
            let scale: f64 = rng.gen_range(0.92..1.04);
            let shift = (rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
            let amp: f64 = rng.gen_range(0.8..1.2);
            if i == 0 {
                continue;
            }
            let trial = Ellipse {
                center: (e.center.0 + shift.0, e.center.1 + shift.1),
                axes: (e.axes.0 * scale, e.axes.1 * scale),
                angle: e.angle,
                amplitude: if i >= 2 { e.amplitude * amp } else { e.amplitude },
            };
            let (ex, ey) = trial.half_extent();
            if trial.center.0.abs() + ex <= 1.0 && trial.center.1.abs() + ey <= 1.0 {
                *e = trial;
            }
        }
        out
    }
}

/// Ground truth and fully sampled data for one or more slices.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub objects: Vec<ComplexImage>,
    pub coil_images: Vec<MultiChannelImage>,
    pub supports: Vec<ForegroundMask>,
    pub sens: SensitivitySet,
    pub kspace: KSpaceVolume,
}

impl Phantom {
    /// `|object|` per slice: the sensitivity-combined reference.
    pub fn references(&self) -> Vec<RealImage> {
        self.objects.iter().map(ComplexImage::abs).collect()
    }
}

fn simulate_slice(spec: &PhantomSpec, sens: &SensitivitySet, rng: &mut Rng64) -> (ComplexImage, MultiChannelImage, MultiChannelImage) {
    let object = spec.object();
    let coils: Vec<ComplexImage> = sens
        .map_set(0)
        .channels()
        .iter()
        .map(|s| s.zip_map(&object, |a, b| a * b))
        .collect();
    let sd = spec.noise_sigma / 2f64.sqrt();
    let kspace: Vec<ComplexImage> = coils
        .iter()
        .map(|c| {
            let mut k = fft2c(c);
            if spec.noise_sigma > 0.0 {
                for z in k.data_mut() {
                    let nr: f64 = rng.sample(StandardNormal);
                    let ni: f64 = rng.sample(StandardNormal);
                    *z += Complex64::new(nr * sd, ni * sd);
                }
            }
            k
        })
        .collect();
    (
        object,
        MultiChannelImage::from_raw(coils),
        MultiChannelImage::from_raw(kspace),
    )
}

/// Single-slice phantom: coil images `s_q * object`, unit-RSS maps and
/// fully sampled noisy k-space.
pub fn make_phantom(spec: &PhantomSpec, rng: &mut Rng64) -> Result<Phantom> {
    spec.check()?;
    let sens = spec.sensitivities();
    let (object, coils, k) = simulate_slice(spec, &sens, rng);
    Ok(Phantom {
        objects: vec![object],
        coil_images: vec![coils],
        supports: vec![spec.support()],
        kspace: KSpaceVolume::new(vec![k], SamplingMask::full(spec.height))?,
        sens,
    })
}

/// `n_slices` jittered slices sharing one coil geometry. Slice `i` draws from
/// its own substream of `seed`, so slices are independent of each other.
pub fn make_phantom_volume(spec: &PhantomSpec, n_slices: usize, seed: u64) -> Result<Phantom> {
    spec.check()?;
    if n_slices == 0 {
        return Err(Error::InvalidSpec("need at least one slice".into()));
    }
    let sens = spec.sensitivities();
    let mut objects = Vec::new();
    let mut coil_images = Vec::new();
    let mut supports = Vec::new();
    let mut ks = Vec::new();
    for i in 0..n_slices {
        let mut rng = substream(seed, i as u64);
        let slice_spec = if n_slices == 1 { spec.clone() } else { spec.jittered(&mut rng) };
        let (o, c, k) = simulate_slice(&slice_spec, &sens, &mut rng);
        objects.push(o);
        coil_images.push(c);
        supports.push(slice_spec.support());
        ks.push(k);
    }
    Ok(Phantom {
        objects,
        coil_images,
        supports,
        kspace: KSpaceVolume::new(ks, SamplingMask::full(spec.height))?,
        sens,
    })
}

/// Random line mask: the central `acl_count` lines plus uniformly drawn lines
/// (without replacement) up to `round(pe_lines / r)` flagged lines in total.
pub fn make_mask(pe_lines: usize, r: f64, acl_count: usize, rng: &mut Rng64) -> Result<SamplingMask> {
    if pe_lines == 0 || !(r >= 1.0) {
        return Err(Error::InvalidParams(format!("pe_lines {pe_lines}, R {r}")));
    }
    if acl_count > pe_lines {
        return Err(Error::InvalidParams(format!(
            "acl_count {acl_count} exceeds {pe_lines} lines"
        )));
    }
    let target = (pe_lines as f64 / r).round() as usize;
    if target < acl_count {
        return Err(Error::InvalidParams(format!(
            "target of {target} lines is below the {acl_count} calibration lines"
        )));
    }
    let acl = acl_range(pe_lines, acl_count);
    let mut flags = vec![false; pe_lines];
    for l in acl.clone() {
        flags[l] = true;
    }
    let candidates: Vec<usize> = (0..pe_lines).filter(|l| !acl.contains(l)).collect();
    for i in index::sample(rng, candidates.len(), target - acl_count) {
        flags[candidates[i]] = true;
    }
    SamplingMask::new(flags, acl_count, r)
}

/// Hann taper over the calibration block, symmetric about the k-space centre
/// `pe_lines / 2` so the low-resolution image of a real object stays real. For
/// an even block the unpaired outermost line gets weight 0.
fn hann(acl: &Range<usize>, pe_lines: usize) -> Vec<f64> {
    let half = (acl.len() / 2 + acl.len() % 2) as f64;
    let c = (pe_lines / 2) as f64;
    acl.clone()
        .map(|l| {
            let d = (l as f64 - c) / half;
            if d.abs() >= 1.0 {
                0.0
            } else {
                0.5 + 0.5 * (PI * d).cos()
            }
        })
        .collect()
}

/// Low-resolution sensitivity estimate from the calibration lines `acl` of a
/// k-space slice: zero-fill, Hann apodisation along PE (see [`hann`]), inverse FFT per coil,
/// divide by `RSS + eps` with `eps = 1e-8 * max RSS`. With `n_maps = 2` the
/// second map set is all zeros.
pub fn estimate_sensitivities(kspace: &MultiChannelImage, acl: Range<usize>, n_maps: usize) -> Result<SensitivitySet> {
    let (h, w) = kspace.shape();
    if acl.len() < MIN_ACS_LINES {
        return Err(Error::TooFewLines {
            got: acl.len(),
            need: MIN_ACS_LINES,
        });
    }
    if acl.end > h {
        return Err(Error::InvalidParams(format!("calibration lines {acl:?} exceed {h}")));
    }
    if !(1..=2).contains(&n_maps) {
        return Err(Error::InvalidParams(format!("n_maps must be 1 or 2, got {n_maps}")));
    }
    let win = hann(&acl, h);
    let low: Vec<ComplexImage> = kspace
        .channels()
        .iter()
        .map(|k| {
            let mut z = ComplexImage::zeros(h, w);
            for (j, line) in acl.clone().enumerate() {
                let src = &k.data()[line * w..(line + 1) * w];
                let dst = &mut z.data_mut()[line * w..(line + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s * win[j];
                }
            }
            ifft2c(&z)
        })
        .collect();
    let low = MultiChannelImage::from_raw(low);
    let r = rss(&low);
    let eps = 1e-8 * r.max();
    let set1 = MultiChannelImage::from_raw(
        low.channels()
            .iter()
            .map(|c| ComplexImage::from_raw(h, w, c.data().iter().zip(r.data()).map(|(z, &n)| z / (n + eps)).collect()))
            .collect(),
    );
    let mut maps = vec![set1];
    if n_maps == 2 {
        maps.push(MultiChannelImage::zeros(kspace.count(), h, w));
    }
    if r.max() == 0.0 {
        return Err(Error::InvalidParams("calibration data is all zero".into()));
    }
    SensitivitySet::new(maps)
}

/// Estimate from every slice of a volume: calibration data summed over slices.
pub fn estimate_sensitivities_volume(volume: &KSpaceVolume, n_maps: usize) -> Result<SensitivitySet> {
    let mut acc = volume.slice(0).clone();
    for sl in &volume.slices()[1..] {
        acc = acc.add(sl);
    }
    estimate_sensitivities(&acc, volume.mask().acl_range(), n_maps)
}

/// Threshold at `threshold_frac * max` followed by a 3x3 binary closing.
/// Only strictly positive pixels can be foreground.
pub fn foreground_mask(rss_image: &RealImage, threshold_frac: f64) -> Result<ForegroundMask> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::InvalidParams(format!(
            "threshold_frac {threshold_frac} outside (0, 1)"
        )));
    }
    let (h, w) = rss_image.shape();
    let t = threshold_frac * rss_image.max();
    let raw: Vec<bool> = rss_image.data().iter().map(|&v| v > 0.0 && v >= t).collect();
    let closed = erode(&dilate(&raw, h, w), h, w);
    ForegroundMask::new(h, w, closed)
}

fn neighbourhood(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let rs = r.saturating_sub(1)..(r + 2).min(h);
    rs.flat_map(move |rr| (c.saturating_sub(1)..(c + 2).min(w)).map(move |cc| rr * w + cc))
}

fn dilate(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .map(|p| neighbourhood(p / w, p % w, h, w).any(|q| m[q]))
        .collect()
}

// Out-of-bounds neighbours are ignored, so a full mask stays full.
fn erode(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .map(|p| neighbourhood(p / w, p % w, h, w).all(|q| m[q]))
        .collect()
}

/// Replace the background by the top-left-corner noise mean times `true_r`.
/// Only patch pixels outside `mask` enter the mean, so a patch that reaches
/// into the object on a small image still measures the noise floor.
pub fn background_replace(rss_under: &RealImage, mask: &ForegroundMask, true_r: f64) -> Result<RealImage> {
    if rss_under.shape() != mask.shape() {
        return Err(Error::ShapeMismatch("image and foreground mask differ".into()));
    }
    if mask.count() == mask.pixels().len() {
        return Ok(rss_under.clone());
    }
    let (h, w) = rss_under.shape();
    let p = NOISE_PATCH.min(h).min(w);
    if p < NOISE_PATCH {
        info!("noise patch shrunk to {p}x{p} for a {h}x{w} image");
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 0..p {
        for c in 0..p {
            if !mask.get(r, c) {
                sum += rss_under.at(r, c);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidParams("noise patch lies entirely in the foreground".into()));
    }
    let level = sum / n as f64 * true_r;
    Ok(RealImage::from_raw(
        h,
        w,
        rss_under
            .data()
            .iter()
            .zip(mask.pixels())
            .map(|(&v, &m)| if m { v } else { level })
            .collect(),
    ))
}

/// `m * x_rec` plus the replaced background level of the undersampled RSS.
pub fn compose_background(x_rec: &RealImage, rss_under: &RealImage, mask: &ForegroundMask, true_r: f64) -> Result<RealImage> {
    if x_rec.shape() != mask.shape() {
        return Err(Error::ShapeMismatch("reconstruction and foreground mask differ".into()));
    }
    let bg = background_replace(rss_under, mask, true_r)?;
    Ok(RealImage::from_raw(
        x_rec.height(),
        x_rec.width(),
        x_rec
            .data()
            .iter()
            .zip(bg.data())
            .zip(mask.pixels())
            .map(|((&x, &b), &m)| if m { x } else { b })
            .collect(),
    ))
}
