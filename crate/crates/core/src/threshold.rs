//! Binarization of difference images.
//!
//! Otsu's method runs on a fixed 256-bin histogram over `[0, 1]`. Candidate
//! thresholds are the 255 interior bin boundaries `k/256`, and a pixel is
//! labeled changed iff its value is `>=` the threshold. Between-class
//! variances are compared exactly in integer arithmetic, so ties resolve
//! deterministically to the smallest boundary.

use crate::error::{Error, Result};
use crate::raster::{ChangeMap, ScalarMap};

pub const OTSU_BINS: usize = 256;

/// Threshold returned when the histogram has no split with both classes
/// populated.
pub const OTSU_SENTINEL: f64 = 1.0;

/// Histogram bin of a value in `[0, 1]`.
pub fn bin_of(value: f64) -> usize {
    ((value * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

pub fn histogram(di: &ScalarMap) -> [u64; OTSU_BINS] {
    let mut hist = [0u64; OTSU_BINS];
    for &v in di.data() {
        hist[bin_of(v)] += 1;
    }
    hist
}

/// 192-bit product of a u128 and a u64, as (high, low) limbs.
fn widening_mul(a: u128, b: u64) -> (u64, u128) {
    let lo = (a as u64 as u128) * b as u128;
    let hi = (a >> 64) * b as u128;
    let (low, carry) = lo.overflowing_add(hi << 64);
    let high = (hi >> 64) as u64 + u64::from(carry);
    (high, low)
}

/// Between-class variance of a split as the exact fraction `num / den`, up to
/// the common factor `1/n^2`.
#[derive(Clone, Copy)]
struct Separation {
    num: u128,
    den: u64,
}

impl Separation {
    fn greater_than(self, other: Separation) -> bool {
        widening_mul(self.num, other.den) > widening_mul(other.num, self.den)
    }
}

/// Boundary index `k` in `1..=255` maximizing between-class variance, or
/// `None` when every pixel falls into a single bin.
pub fn otsu_boundary(hist: &[u64; OTSU_BINS]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    let total_sum: u128 = hist
        .iter()
        .enumerate()
        .map(|(b, &n)| b as u128 * n as u128)
        .sum();
    let mut below = 0u64;
    let mut below_sum = 0u128;
    let mut best: Option<(usize, Separation)> = None;
    for k in 1..OTSU_BINS {
        below += hist[k - 1];
        below_sum += (k as u128 - 1) * hist[k - 1] as u128;
        let above = total - below;
        if below == 0 || above == 0 {
            continue;
        }
        // n1*S0 - n0*S1 simplifies to n*S0 - n0*S
        let a = total as u128 * below_sum;
        let b = below as u128 * total_sum;
        let diff = a.abs_diff(b);
        let candidate = Separation {
            num: diff * diff,
            den: below * above,
        };
        match best {
            Some((_, current)) if !candidate.greater_than(current) => {}
            _ => best = Some((k, candidate)),
        }
    }
    best.map(|(k, _)| k)
}

/// Otsu binarization. Returns the change map and the threshold used.
pub fn otsu(di: &ScalarMap) -> (ChangeMap, f64) {
    match otsu_boundary(&histogram(di)) {
        Some(k) => {
            let t = k as f64 / OTSU_BINS as f64;
            (label_at_or_above(di, t), t)
        }
        None => (ChangeMap::zeros(di.height(), di.width()), OTSU_SENTINEL),
    }
}

fn label_at_or_above(di: &ScalarMap, t: f64) -> ChangeMap {
    let labels = di.data().iter().map(|&v| u8::from(v >= t)).collect();
    ChangeMap::new(di.height(), di.width(), labels).expect("labels are binary")
}

/// Label 1 iff value `>= t`.
pub fn fixed_threshold(di: &ScalarMap, t: f64) -> Result<ChangeMap> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("threshold {t} outside [0, 1]")));
    }
    Ok(label_at_or_above(di, t))
}
