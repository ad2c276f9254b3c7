//! Diamond-square plasma fractal used as the fog pattern.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DistortionError;

/// A square heightmap with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heightmap {
    size: usize,
    values: Vec<f64>,
}

impl Heightmap {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    /// Little-endian bytes of every value, for hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Plasma fractal with unit initial displacement amplitude.
pub fn diamond_square(size: usize, wibble_decay: f64, seed: u64) -> Result<Heightmap, DistortionError> {
    plasma_fractal(size, 1.0, wibble_decay, seed)
}

/// Classic diamond-square on a `(size + 1)^2` grid, folded to `size^2` and
/// min-max normalized. Corners start at zero; each level runs the square step
/// then the diamond step with uniform displacement in `[-wibble, wibble]`,
/// and `wibble` is divided by `wibble_decay` after every level. A constant
/// map normalizes to all zeros.
pub fn plasma_fractal(
    size: usize,
    initial_wibble: f64,
    wibble_decay: f64,
    seed: u64,
) -> Result<Heightmap, DistortionError> {
    if size < 2 || !size.is_power_of_two() {
        return Err(DistortionError::InvalidParams(format!(
            "plasma size must be a power of two >= 2, got {size}"
        )));
    }
    if !(wibble_decay > 1.0 && wibble_decay.is_finite()) {
        return Err(DistortionError::InvalidParams(format!(
            "wibble_decay must be > 1, got {wibble_decay}"
        )));
    }
    if !(initial_wibble >= 0.0 && initial_wibble.is_finite()) {
        return Err(DistortionError::InvalidParams(format!(
            "initial wibble must be >= 0, got {initial_wibble}"
        )));
    }

    let n = size + 1;
    let mut grid = vec![0.0f64; n * n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wibble = initial_wibble;
    let jitter = |rng: &mut ChaCha8Rng, wibble: f64| {
        if wibble > 0.0 {
            rng.random_range(-wibble..=wibble)
        } else {
            0.0
        }
    };

    let mut step = size;
    while step > 1 {
        let half = step / 2;

        // Square step: centers of each step x step cell.
        for r in (half..size).step_by(step) {
            for c in (half..size).step_by(step) {
                let avg = (grid[(r - half) * n + (c - half)]
                    + grid[(r - half) * n + (c + half)]
                    + grid[(r + half) * n + (c - half)]
                    + grid[(r + half) * n + (c + half)])
                    / 4.0;
                grid[r * n + c] = avg + jitter(&mut rng, wibble);
            }
        }

        // Diamond step: edge midpoints, averaging the in-grid neighbours.
        for r in (0..n).step_by(half) {
            let start = if (r / half).is_multiple_of(2) { half } else { 0 };
            for c in (start..n).step_by(step) {
                let mut sum = 0.0;
                let mut count = 0.0;
                if r >= half {
                    sum += grid[(r - half) * n + c];
                    count += 1.0;
                }
                if r + half < n {
                    sum += grid[(r + half) * n + c];
                    count += 1.0;
                }
                if c >= half {
                    sum += grid[r * n + c - half];
                    count += 1.0;
                }
                if c + half < n {
                    sum += grid[r * n + c + half];
                    count += 1.0;
                }
                grid[r * n + c] = sum / count + jitter(&mut rng, wibble);
            }
        }

        wibble /= wibble_decay;
        step = half;
    }

    let mut values = Vec::with_capacity(size * size);
    for r in 0..size {
        values.extend_from_slice(&grid[r * n..r * n + size]);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v - min) / range);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(Heightmap { size, values })
}
