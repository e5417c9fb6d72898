//! File formats and the command-line front end.
//!
//! All binary formats are little-endian, start with a 4-byte magic and a u32
//! version, and are rejected if any bytes follow the declared payload.
//!
//! KRD (`KRD1`): u32 version, n_slices, Q, PE, FE, flags (bit 0 mask, bit 1
//! sensitivities), n_maps, acl_count, then f64 nominal_r. The k-space payload
//! follows as interleaved (re, im) f64 pairs, slice-major then coil-major,
//! rows of FE samples. Then PE mask bytes (0/1) if flagged, then the
//! `n_maps x Q` sensitivity images if flagged. Without a mask block the volume
//! is fully sampled.

pub mod cli;

use num_complex::Complex64;

use crate::dc::DcConfig;
use crate::domain::{ComplexImage, DcKind, KSpaceVolume, MultiChannelImage, RealImage, SamplingMask, SensitivitySet, Variant};
use crate::error::{Error, Result};
use crate::net::{ConvLayer, DenoiserParams, KERNEL};
use crate::unrolled::UnrolledModel;

pub const KRD_MAGIC: &[u8; 4] = b"KRD1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNC1";
pub const PARAMS_MAGIC: &[u8; 4] = b"DNP1";
pub const RIM_MAGIC: &[u8; 4] = b"RIM1";
pub const VERSION: u32 = 1;

const FLAG_MASK: u32 = 1;
const FLAG_SENS: u32 = 2;

/// Bounds-checked little-endian reader over a byte buffer.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::TruncatedFile("shorter than the magic".into()));
        }
        if &buf[..4] != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&buf[..4]).into_owned(),
            });
        }
        let mut r = Self { buf, pos: 4 };
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::HeaderMismatch(format!("unsupported version {v}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::TruncatedFile(format!("need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::HeaderMismatch("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn image(&mut self, h: usize, w: usize) -> Result<ComplexImage> {
        let v = self.f64s(2 * h * w)?;
        ComplexImage::new(h, w, v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::HeaderMismatch(format!("{} trailing bytes after payload", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self(magic.to_vec());
        w.u32(VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidParams(format!("{v} does not fit a u32 header field")))?;
        self.u32(v);
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }

    fn image(&mut self, img: &ComplexImage) {
        for z in img.data() {
            self.f64(z.re);
            self.f64(z.im);
        }
    }
}

pub fn encode_krd(volume: &KSpaceVolume, sens: Option<&SensitivitySet>) -> Result<Vec<u8>> {
    let (h, w) = volume.shape();
    let q = volume.coil_count();
    if let Some(s) = sens {
        if s.shape() != (h, w) || s.coil_count() != q {
            return Err(Error::ShapeMismatch("sensitivities do not match the volume".into()));
        }
    }
    let mask = volume.mask();
    let with_mask = *mask != SamplingMask::full(h);
    let mut out = Writer::new(KRD_MAGIC);
    out.usize(volume.n_slices())?;
    out.usize(q)?;
    out.usize(h)?;
    out.usize(w)?;
    out.u32(if with_mask { FLAG_MASK } else { 0 } | if sens.is_some() { FLAG_SENS } else { 0 });
    out.usize(sens.map_or(0, SensitivitySet::n_maps))?;
    out.usize(mask.acl_count())?;
    out.f64(mask.nominal_r());
    for sl in volume.slices() {
        sl.channels().iter().for_each(|c| out.image(c));
    }
    if with_mask {
        mask.flags().iter().for_each(|&f| out.u8(f as u8));
    }
    if let Some(s) = sens {
        for set in s.map_sets() {
            set.channels().iter().for_each(|c| out.image(c));
        }
    }
    Ok(out.0)
}

pub fn decode_krd(bytes: &[u8]) -> Result<(KSpaceVolume, Option<SensitivitySet>)> {
    let mut r = Reader::new(bytes, KRD_MAGIC)?;
    let n_slices = r.usize()?;
    let q = r.usize()?;
    let h = r.usize()?;
    let w = r.usize()?;
    let flags = r.u32()?;
    let n_maps = r.usize()?;
    let acl = r.usize()?;
    let nominal_r = r.f64()?;
    if flags & !(FLAG_MASK | FLAG_SENS) != 0 {
        return Err(Error::HeaderMismatch(format!("unknown flag bits {flags:#x}")));
    }
    if n_slices == 0 || q == 0 {
        return Err(Error::HeaderMismatch("zero slices or coils".into()));
    }
    let has_sens = flags & FLAG_SENS != 0;
    if has_sens != (n_maps > 0) || n_maps > 2 {
        return Err(Error::HeaderMismatch(format!("n_maps {n_maps} inconsistent with flags {flags:#x}")));
    }
    // payload length is fixed by the header; check it before decoding anything
    let image = 16u128 * h as u128 * w as u128;
    let expected = r.pos as u128
        + image * (n_slices as u128 * q as u128 + n_maps as u128 * q as u128)
        + if flags & FLAG_MASK != 0 { h as u128 } else { 0 };
    let actual = bytes.len() as u128;
    if actual < expected {
        return Err(Error::TruncatedFile(format!("header implies {expected} bytes, file has {actual}")));
    }
    if actual > expected {
        return Err(Error::HeaderMismatch(format!("{} trailing bytes after payload", actual - expected)));
    }
    let mut slices = Vec::with_capacity(n_slices);
    for _ in 0..n_slices {
        slices.push(MultiChannelImage::new((0..q).map(|_| r.image(h, w)).collect::<Result<_>>()?)?);
    }
    let mask = if flags & FLAG_MASK != 0 {
        let raw = r.take(h)?;
        if raw.iter().any(|&b| b > 1) {
            return Err(Error::HeaderMismatch("mask bytes must be 0 or 1".into()));
        }
        SamplingMask::new(raw.iter().map(|&b| b == 1).collect(), acl, nominal_r)?
    } else {
        SamplingMask::full(h)
    };
    let sens = if has_sens {
        let sets = (0..n_maps)
            .map(|_| MultiChannelImage::new((0..q).map(|_| r.image(h, w)).collect::<Result<_>>()?))
            .collect::<Result<Vec<_>>>()?;
        Some(SensitivitySet::new(sets)?)
    } else {
        None
    };
    r.finish()?;
    Ok((KSpaceVolume::new(slices, mask)?, sens))
}

pub fn read_krd(path: &std::path::Path) -> Result<(KSpaceVolume, Option<SensitivitySet>)> {
    decode_krd(&std::fs::read(path)?)
}

pub fn write_krd(path: &std::path::Path, volume: &KSpaceVolume, sens: Option<&SensitivitySet>) -> Result<()> {
    std::fs::write(path, encode_krd(volume, sens)?)?;
    Ok(())
}

fn write_params(out: &mut Writer, p: &DenoiserParams) -> Result<()> {
    let widths = p.plan().widths().to_vec();
    out.usize(widths.len())?;
    for wd in widths {
        out.usize(wd)?;
    }
    out.f64s(&p.to_flat());
    Ok(())
}

fn read_params(r: &mut Reader<'_>) -> Result<DenoiserParams> {
    let n = r.usize()?;
    if n < 2 {
        return Err(Error::HeaderMismatch(format!("plan with {n} widths")));
    }
    let widths = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let layers = widths
        .windows(2)
        .map(|wd| {
            let weights = r.f64s(wd[0] * wd[1] * KERNEL * KERNEL)?;
            let bias = r.f64s(wd[1])?;
            Ok(ConvLayer {
                c_in: wd[0],
                c_out: wd[1],
                weights,
                bias,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DenoiserParams::from_layers(layers)
}

/// Checkpoint (`SNC1`): u8 variant (0 SN, 1 PCN), u8 DC kind (0 GD, 1 PM,
/// 2 VS), u8 shared, u8 dc_trainable, u32 T, f64 eta, f64 lambda, u32
/// cg_max_iter, f64 cg_tol, T f64 per-step DC weights, then each block as
/// u32 width count, u32 widths and its raw parameters.
pub fn encode_checkpoint(model: &UnrolledModel) -> Result<Vec<u8>> {
    let mut out = Writer::new(CHECKPOINT_MAGIC);
    out.u8(match model.variant {
        Variant::Sn => 0,
        Variant::Pcn => 1,
    });
    out.u8(match model.dc.kind {
        DcKind::Gd => 0,
        DcKind::Pm => 1,
        DcKind::Vs => 2,
    });
    out.u8(model.shared as u8);
    out.u8(model.dc_trainable as u8);
    out.usize(model.steps())?;
    out.f64(model.dc.eta);
    out.f64(model.dc.lambda);
    out.usize(model.dc.cg_max_iter)?;
    out.f64(model.dc.cg_tol);
    out.f64s(&model.dc_weights);
    for b in &model.blocks {
        write_params(&mut out, b)?;
    }
    Ok(out.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<UnrolledModel> {
    let mut r = Reader::new(bytes, CHECKPOINT_MAGIC)?;
    let variant = match r.u8()? {
        0 => Variant::Sn,
        1 => Variant::Pcn,
        v => return Err(Error::HeaderMismatch(format!("variant code {v}"))),
    };
    let kind = match r.u8()? {
        0 => DcKind::Gd,
        1 => DcKind::Pm,
        2 => DcKind::Vs,
        v => return Err(Error::HeaderMismatch(format!("DC kind code {v}"))),
    };
    let flag = |v: u8, what: &str| match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::HeaderMismatch(format!("{what} flag {v}"))),
    };
    let shared = flag(r.u8()?, "shared")?;
    let dc_trainable = flag(r.u8()?, "dc_trainable")?;
    let steps = r.usize()?;
    if steps == 0 {
        return Err(Error::HeaderMismatch("T = 0".into()));
    }
    let dc = DcConfig {
        kind,
        eta: r.f64()?,
        lambda: r.f64()?,
        cg_max_iter: r.usize()?,
        cg_tol: r.f64()?,
    };
    let dc_weights = r.f64s(steps)?;
    let blocks = (0..if shared { 1 } else { steps }).map(|_| read_params(&mut r)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let mut model = UnrolledModel::new(variant, dc, steps, blocks, shared).map_err(|e| Error::HeaderMismatch(e.to_string()))?;
    model.dc_weights = dc_weights;
    model.dc_trainable = dc_trainable;
    Ok(model)
}

/// A single denoiser (`DNP1`), used for the style-transfer layer.
pub fn encode_params(p: &DenoiserParams) -> Result<Vec<u8>> {
    let mut out = Writer::new(PARAMS_MAGIC);
    write_params(&mut out, p)?;
    Ok(out.0)
}

pub fn decode_params(bytes: &[u8]) -> Result<DenoiserParams> {
    let mut r = Reader::new(bytes, PARAMS_MAGIC)?;
    let p = read_params(&mut r)?;
    r.finish()?;
    Ok(p)
}

/// Real image stack (`RIM1`): u32 count, height, width, then f64 pixels.
pub fn encode_images(images: &[RealImage]) -> Result<Vec<u8>> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidParams("empty image stack".into()));
    };
    let (h, w) = first.shape();
    if images.iter().any(|i| i.shape() != (h, w)) {
        return Err(Error::ShapeMismatch("images in a stack must share one shape".into()));
    }
    let mut out = Writer::new(RIM_MAGIC);
    out.usize(images.len())?;
    out.usize(h)?;
    out.usize(w)?;
    images.iter().for_each(|i| out.f64s(i.data()));
    Ok(out.0)
}

pub fn decode_images(bytes: &[u8]) -> Result<Vec<RealImage>> {
    let mut r = Reader::new(bytes, RIM_MAGIC)?;
    let n = r.usize()?;
    let h = r.usize()?;
    let w = r.usize()?;
    if n == 0 {
        return Err(Error::HeaderMismatch("empty image stack".into()));
    }
    let images = (0..n).map(|_| RealImage::new(h, w, r.f64s(h * w)?)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::{make_mask, make_phantom_volume, PhantomSpec};
    use crate::domain::{seeded_rng, RunConfig};

    fn volume() -> (KSpaceVolume, SensitivitySet) {
        let ph = make_phantom_volume(&PhantomSpec { noise_sigma: 0.01, ..PhantomSpec::shepp_logan(8, 10, 4) }, 2, 1).unwrap();
        let mask = make_mask(8, 2.0, 2, &mut seeded_rng(2)).unwrap();
        (ph.kspace.undersample(&mask).unwrap(), ph.sens)
    }

    #[test]
    fn krd_round_trip_is_bit_exact() {
        let (v, s) = volume();
        for sens in [None, Some(&s)] {
            let bytes = encode_krd(&v, sens).unwrap();
            let (v2, s2) = decode_krd(&bytes).unwrap();
            assert_eq!(v2, v);
            assert_eq!(s2.as_ref(), sens);
            assert_eq!(encode_krd(&v2, s2.as_ref()).unwrap(), bytes);
        }
    }

    #[test]
    fn krd_rejects_corruption() {
        let (v, s) = volume();
        let bytes = encode_krd(&v, Some(&s)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_krd(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_krd(&bad), Err(Error::TruncatedFile(_))));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode_krd(&bad), Err(Error::HeaderMismatch(_))));
        assert!(matches!(decode_krd(&bytes[..bytes.len() - 1]), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for shared in [false, true] {
            let cfg = RunConfig {
                steps: 3,
                net_features: 4,
                shared_weights: shared,
                dc_trainable: true,
                ..RunConfig::default()
            };
            let m = UnrolledModel::init(&cfg, 2, &mut seeded_rng(3)).unwrap();
            let bytes = encode_checkpoint(&m).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
            assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::TruncatedFile(_))));
        }
    }

    #[test]
    fn image_stack_round_trip() {
        let imgs = vec![RealImage::new(4, 5, (0..20).map(|i| i as f64 * 0.1).collect()).unwrap(); 3];
        let back = decode_images(&encode_images(&imgs).unwrap()).unwrap();
        assert_eq!(back, imgs);
        assert!(decode_images(b"KRD1").is_err());
    }
}
