//! Global compute-precision profile.
//!
//! Everything is computed in f64; the f32 profile additionally rounds the
//! output of each major operator (selective scan, block, attention, logits)
//! through f32, so downstream consumers see single-precision values. The
//! profile is selected by the `ABMAMBA_PRECISION` environment variable
//! (`f64`, the default, or `f32`).

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

static MODE: AtomicU8 = AtomicU8::new(0);

pub fn set_precision(p: Precision) {
    MODE.store(if p == Precision::F32 { 1 } else { 0 }, Ordering::Relaxed);
}

pub fn precision() -> Precision {
    if MODE.load(Ordering::Relaxed) == 1 {
        Precision::F32
    } else {
        Precision::F64
    }
}

/// Reads `ABMAMBA_PRECISION` and installs the profile. Unknown values error.
pub fn init_from_env() -> crate::error::Result<Precision> {
    let p = match std::env::var("ABMAMBA_PRECISION") {
        Ok(v) if v.eq_ignore_ascii_case("f32") => Precision::F32,
        Ok(v) if v.eq_ignore_ascii_case("f64") => Precision::F64,
        Ok(v) => {
            return Err(crate::error::Error::Config(format!(
                "ABMAMBA_PRECISION must be f32 or f64, got {v:?}"
            )))
        }
        Err(_) => Precision::F64,
    };
    set_precision(p);
    Ok(p)
}

/// Rounds a value through f32 when the f32 profile is active.
#[inline]
pub fn quantize(x: f64) -> f64 {
    match precision() {
        Precision::F64 => x,
        Precision::F32 => x as f32 as f64,
    }
}

/// In-place f32 rounding of a slice under the f32 profile.
pub fn quantize_slice(xs: &mut [f64]) {
    if precision() == Precision::F32 {
        for x in xs.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
}
