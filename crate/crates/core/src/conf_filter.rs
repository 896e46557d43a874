//! Neighborhood agreement filter for pseudo labels.
//!
//! For every pixel with a full `w`x`w` window inside the map, the confidence
//! is the fraction of window pixels carrying the same label as the center
//! (the center counts itself). Pixels closer than `(w-1)/2` to any border get
//! confidence 0. The gate then zeroes confidences below `alpha`; the gated map
//! is used directly as per-pixel loss weights.

use crate::error::{Error, Result};
use crate::raster::{ChangeMap, ScalarMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub w: usize,
    pub alpha: f64,
}

impl FilterConfig {
    pub fn new(w: usize, alpha: f64) -> Result<Self> {
        check_window(w)?;
        check_alpha(alpha)?;
        Ok(Self { w, alpha })
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { w: 5, alpha: 0.5 }
    }
}

fn check_window(w: usize) -> Result<()> {
    if w < 3 || w.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "neighborhood size must be odd and >= 3, got {w}"
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

pub fn filter(cm: &ChangeMap, w: usize) -> Result<ScalarMap> {
    check_window(w)?;
    let (h, wd) = (cm.height(), cm.width());
    let mut out = vec![0.0; h * wd];
    if h < w || wd < w {
        return ScalarMap::new(h, wd, out);
    }

    // summed-area table of changed labels, (h+1)x(wd+1)
    let stride = wd + 1;
    let mut sat = vec![0u32; (h + 1) * stride];
    for r in 0..h {
        let mut row_sum = 0u32;
        for c in 0..wd {
            row_sum += u32::from(cm.get(r, c));
            sat[(r + 1) * stride + c + 1] = sat[r * stride + c + 1] + row_sum;
        }
    }

    let half = (w - 1) / 2;
    let area = (w * w) as u32;
    let denom = (w * w) as f64;
    for r in half..h - half {
        for c in half..wd - half {
            let (top, bottom) = (r - half, r + half + 1);
            let (left, right) = (c - half, c + half + 1);
            let ones = sat[bottom * stride + right] + sat[top * stride + left]
                - sat[top * stride + right]
                - sat[bottom * stride + left];
            let agree = if cm.get(r, c) == 1 { ones } else { area - ones };
            out[r * wd + c] = f64::from(agree) / denom;
        }
    }
    ScalarMap::new(h, wd, out)
}

/// Zero every confidence below `alpha`.
pub fn gate(pc: &ScalarMap, alpha: f64) -> Result<ScalarMap> {
    check_alpha(alpha)?;
    let data = pc
        .data()
        .iter()
        .map(|&v| if v >= alpha { v } else { 0.0 })
        .collect();
    ScalarMap::new(pc.height(), pc.width(), data)
}

/// `gate(filter(cm, w), alpha)`.
pub fn confidence_weights(cm: &ChangeMap, cfg: FilterConfig) -> Result<ScalarMap> {
    gate(&filter(cm, cfg.w)?, cfg.alpha)
}
