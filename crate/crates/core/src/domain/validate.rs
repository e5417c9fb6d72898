use crate::error::{Error, Result};

use super::{ForegroundMask, KSpaceVolume, SensitivitySet};

/// Tolerance on `sum |s|^2 <= 1` inside the foreground.
pub const SENS_ENERGY_TOL: f64 = 1e-6;

/// Cross-type consistency check; the error names the first violated invariant.
pub fn validate(volume: &KSpaceVolume, sens: &SensitivitySet, mask: &ForegroundMask) -> Result<()> {
    let shape = volume.shape();
    if sens.coil_count() != volume.coil_count() {
        return Err(Error::ShapeMismatch(format!(
            "sensitivities have {} coils, volume has {}",
            sens.coil_count(),
            volume.coil_count()
        )));
    }
    if sens.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "sensitivity shape {:?} != k-space shape {:?}",
            sens.shape(),
            shape
        )));
    }
    if mask.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "foreground mask shape {:?} != image shape {:?}",
            mask.shape(),
            shape
        )));
    }
    for (s, sl) in volume.slices().iter().enumerate() {
        for (q, coil) in sl.channels().iter().enumerate() {
            if !coil.is_finite() {
                return Err(Error::NonFiniteData(format!("slice {s}, coil {q}")));
            }
        }
    }
    volume.check_unsampled_zero()?;
    let energy = sens.energy();
    if let Some(i) = energy
        .data()
        .iter()
        .zip(mask.pixels())
        .position(|(&e, &m)| m && e > 1.0 + SENS_ENERGY_TOL)
    {
        return Err(Error::InvalidParams(format!(
            "sensitivity energy {} > 1 at foreground pixel ({}, {})",
            energy.data()[i],
            i / shape.1,
            i % shape.1
        )));
    }
    Ok(())
}
