//! Block-wise random masking over the patch grid.

use rand::Rng;

use crate::error::{Error, Result};

/// Smallest block the sampler tries to place (in patches).
pub const MIN_BLOCK_PATCHES: usize = 4;
const BLOCK_ASPECT: (f64, f64) = (0.3, 1.0 / 0.3);
const ATTEMPTS_PER_BLOCK: usize = 10;

/// Binary mask over a `grid_h × grid_w` patch grid; `true` means masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPattern {
    grid_h: usize,
    grid_w: usize,
    bits: Vec<bool>,
}

impl MaskPattern {
    pub fn new(grid_h: usize, grid_w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid_h * grid_w {
            return Err(Error::Contract(format!(
                "mask has {} entries for a {grid_h}x{grid_w} grid",
                bits.len()
            )));
        }
        Ok(Self { grid_h, grid_w, bits })
    }

    pub fn empty(grid_h: usize, grid_w: usize) -> Self {
        Self { grid_h, grid_w, bits: vec![false; grid_h * grid_w] }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Number of patches the sampler masks for a given ratio: `ceil(ratio * n)`.
pub fn mask_target(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Masks rectangular blocks until exactly `ceil(ratio * gh * gw)` patches are set.
///
/// Each block draws an area between `min(4, deficit)` and the remaining
/// deficit and an aspect ratio in `[0.3, 1/0.3]`. A block that would overshoot
/// the target is redrawn; after ten failed draws a single random unmasked
/// patch is set instead.
pub fn sample_block_mask<R: Rng + ?Sized>(grid_h: usize, grid_w: usize, ratio: f64, rng: &mut R) -> Result<MaskPattern> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} must lie in [0, 1]")));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Contract(format!("mask grid {grid_h}x{grid_w} is empty")));
    }
    let n = grid_h * grid_w;
    let target = mask_target(n, ratio);
    let mut mask = MaskPattern::empty(grid_h, grid_w);
    let mut count = 0;
    let (log_lo, log_hi) = (BLOCK_ASPECT.0.ln(), BLOCK_ASPECT.1.ln());
    while count < target {
        let deficit = target - count;
        let mut placed = false;
        for _ in 0..ATTEMPTS_PER_BLOCK {
            let area = uniform(rng, MIN_BLOCK_PATCHES.min(deficit) as f64, deficit as f64);
            let aspect = uniform(rng, log_lo, log_hi).exp();
            let h = ((area * aspect).sqrt().round() as usize).clamp(1, grid_h);
            let w = ((area / aspect).sqrt().round() as usize).clamp(1, grid_w);
            let top = rng.gen_range(0..=grid_h - h);
            let left = rng.gen_range(0..=grid_w - w);
            let fresh = (top..top + h)
                .flat_map(|r| (left..left + w).map(move |c| r * grid_w + c))
                .filter(|&i| !mask.bits[i])
                .count();
            if fresh > 0 && fresh <= deficit {
                for r in top..top + h {
                    for c in left..left + w {
                        mask.bits[r * grid_w + c] = true;
                    }
                }
                count += fresh;
                placed = true;
                break;
            }
        }
        if !placed {
            let free: Vec<usize> = (0..n).filter(|&i| !mask.bits[i]).collect();
            let pick = free[rng.gen_range(0..free.len())];
            mask.bits[pick] = true;
            count += 1;
        }
    }
    Ok(mask)
}
