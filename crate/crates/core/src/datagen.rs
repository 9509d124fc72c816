//! Procedural layout feature maps and synthetic IR-drop labels.
//!
//! The label follows the current-over-grid-strength ratio
//! `density · switching / (grid + eps)`, blurred and then min-max
//! normalized. Every sample draws from its own RNG stream derived from
//! `(seed, index)`, so samples can be generated in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::grid::{gaussian_smooth, normalize_minmax, Grid2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub eps: f64,
    pub label_sigma: f64,
    pub blob_count_range: (usize, usize),
    pub blob_sigma_range: (f64, f64),
    pub stripe_period_range: (usize, usize),
    pub grid_floor: f64,
    /// Blur applied to the white noise fields before blending.
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_samples: 1000,
            height: 64,
            width: 64,
            eps: 1e-6,
            label_sigma: 2.0,
            blob_count_range: (3, 8),
            blob_sigma_range: (3.0, 10.0),
            stripe_period_range: (4, 12),
            grid_floor: 0.05,
            noise_sigma: 4.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("map dimensions must be positive".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.grid_floor > 0.0 && self.grid_floor < 1.0) {
            return bad(format!("grid_floor must lie in (0, 1), got {}", self.grid_floor));
        }
        if !(self.label_sigma >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("smoothing sigmas must be nonnegative".into());
        }
        let (k_lo, k_hi) = self.blob_count_range;
        if k_lo == 0 || k_lo > k_hi {
            return bad(format!("blob_count_range {k_lo}..={k_hi} is empty or zero"));
        }
        let (s_lo, s_hi) = self.blob_sigma_range;
        if !(s_lo > 0.0 && s_lo <= s_hi) {
            return bad(format!("blob_sigma_range {s_lo}..={s_hi} is invalid"));
        }
        let (p_lo, p_hi) = self.stripe_period_range;
        if p_lo < 2 || p_lo > p_hi {
            return bad(format!("stripe_period_range {p_lo}..={p_hi} is invalid"));
        }
        Ok(())
    }
}

/// Derives the RNG stream of one sample from the dataset seed and the
/// sample index (splitmix64 finalizer over both words).
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ index))
}

fn uniform_noise(rng: &mut impl Rng, cfg: &GenConfig) -> Grid2D {
    let values = (0..cfg.height * cfg.width).map(|_| rng.random::<f64>()).collect();
    Grid2D::new(cfg.height, cfg.width, values).expect("noise is finite")
}

/// Blurred uniform noise rescaled to `[0, 1]`.
fn smooth_noise(rng: &mut impl Rng, cfg: &GenConfig) -> Grid2D {
    let noise = uniform_noise(rng, cfg);
    normalize_minmax(&gaussian_smooth(&noise, cfg.noise_sigma).expect("sigma validated"))
}

/// Power delivery strength: a mesh of horizontal and vertical straps blended
/// with smooth noise, mapped into `[grid_floor, 1]`.
pub fn gen_power_grid(rng: &mut impl Rng, cfg: &GenConfig) -> Grid2D {
    let (p_lo, p_hi) = cfg.stripe_period_range;
    let row_period = rng.random_range(p_lo..=p_hi);
    let col_period = rng.random_range(p_lo..=p_hi);
    let row_phase = rng.random_range(0..row_period);
    let col_phase = rng.random_range(0..col_period);
    let row_strap = (row_period / 4).max(1);
    let col_strap = (col_period / 4).max(1);

    let straps = Grid2D::from_fn(cfg.height, cfg.width, |r, c| {
        let on_row = (r + row_phase) % row_period < row_strap;
        let on_col = (c + col_phase) % col_period < col_strap;
        0.5 * (on_row as u8 as f64) + 0.5 * (on_col as u8 as f64)
    });
    let noise = smooth_noise(rng, cfg);
    let blended = straps
        .zip_map(&noise, |s, n| 0.5 * s + 0.5 * n)
        .expect("same shape");
    let floor = cfg.grid_floor;
    normalize_minmax(&blended).map(|v| floor + (1.0 - floor) * v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub row: f64,
    pub col: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Sum of isotropic Gaussian bumps, min-max normalized.
pub fn blob_field(blobs: &[Blob], height: usize, width: usize) -> Grid2D {
    let field = Grid2D::from_fn(height, width, |r, c| {
        blobs
            .iter()
            .map(|b| {
                let (dr, dc) = (r as f64 - b.row, c as f64 - b.col);
                b.amplitude * (-(dr * dr + dc * dc) / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum()
    });
    normalize_minmax(&field)
}

/// Cell density: a handful of Gaussian placement clusters.
pub fn gen_cell_density(rng: &mut impl Rng, cfg: &GenConfig) -> Grid2D {
    let (k_lo, k_hi) = cfg.blob_count_range;
    let (s_lo, s_hi) = cfg.blob_sigma_range;
    let count = rng.random_range(k_lo..=k_hi);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            row: rng.random_range(0.0..cfg.height as f64),
            col: rng.random_range(0.0..cfg.width as f64),
            sigma: rng.random_range(s_lo..=s_hi),
            amplitude: rng.random_range(0.5..=1.0),
        })
        .collect();
    blob_field(&blobs, cfg.height, cfg.width)
}

/// `0.6 · density + 0.4 · noise`, clipped to `[0, 1]` and renormalized.
pub fn blend_switching(cell_density: &Grid2D, noise: &Grid2D) -> Result<Grid2D> {
    let blended = cell_density.zip_map(noise, |d, n| (0.6 * d + 0.4 * n).clamp(0.0, 1.0))?;
    Ok(normalize_minmax(&blended))
}

/// Switching activity, correlated with (but not identical to) density.
pub fn gen_switching(rng: &mut impl Rng, cfg: &GenConfig, cell_density: &Grid2D) -> Grid2D {
    let noise = smooth_noise(rng, cfg);
    blend_switching(cell_density, &noise).expect("same shape")
}

/// The unsmoothed, unnormalized label: `density · switching / (grid + eps)`.
pub fn raw_label(power_grid: &Grid2D, cell_density: &Grid2D, switching: &Grid2D, eps: f64) -> Result<Grid2D> {
    power_grid.ensure_same_shape(cell_density)?;
    power_grid.ensure_same_shape(switching)?;
    let values = power_grid
        .values()
        .iter()
        .zip(cell_density.values())
        .zip(switching.values())
        .map(|((&g, &d), &s)| d * s / (g + eps))
        .collect();
    Grid2D::new(power_grid.height(), power_grid.width(), values)
}

pub fn synth_label(power_grid: &Grid2D, cell_density: &Grid2D, switching: &Grid2D, cfg: &GenConfig) -> Result<Grid2D> {
    let raw = raw_label(power_grid, cell_density, switching, cfg.eps)?;
    Ok(normalize_minmax(&gaussian_smooth(&raw, cfg.label_sigma)?))
}

pub fn generate_sample(cfg: &GenConfig, index: u64) -> LabeledSample {
    let mut rng = sample_rng(cfg.seed, index);
    let power_grid = gen_power_grid(&mut rng, cfg);
    let cell_density = gen_cell_density(&mut rng, cfg);
    let switching = gen_switching(&mut rng, cfg, &cell_density);
    let ir_drop = synth_label(&power_grid, &cell_density, &switching, cfg).expect("consistent shapes");
    LabeledSample {
        power_grid,
        cell_density,
        switching,
        ir_drop,
    }
}

pub fn generate_samples(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.n_samples as u64)
        .map(|i| generate_sample(cfg, i))
        .collect();
    Ok(Dataset::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GenConfig {
        GenConfig {
            n_samples: 4,
            ..GenConfig::default()
        }
    }

    #[test]
    fn power_grid_is_deterministic_and_floored() {
        let cfg = cfg();
        let a = gen_power_grid(&mut sample_rng(42, 0), &cfg);
        let b = gen_power_grid(&mut sample_rng(42, 0), &cfg);
        assert_eq!(a, b);
        for i in 0..20 {
            let g = gen_power_grid(&mut sample_rng(42, i), &cfg);
            assert!(g.min() >= 0.05 - 1e-15 && g.max() <= 1.0);
            assert_eq!(g.shape(), (64, 64));
        }
    }

    #[test]
    fn power_grids_differ_across_seeds() {
        let cfg = cfg();
        for s in 0..100u64 {
            let a = gen_power_grid(&mut sample_rng(s, 0), &cfg);
            let b = gen_power_grid(&mut sample_rng(s + 1000, 0), &cfg);
            let differing = a
                .values()
                .iter()
                .zip(b.values())
                .filter(|(x, y)| x != y)
                .count();
            assert!(differing * 10 >= a.len(), "seed pair {s}: only {differing} pixels differ");
        }
    }

    #[test]
    fn single_blob_peaks_at_center() {
        let blob = Blob {
            row: 32.0,
            col: 32.0,
            sigma: 5.0,
            amplitude: 0.7,
        };
        let field = blob_field(&[blob], 64, 64);
        assert_eq!(field.argmax(), (32, 32));
        assert_eq!(field.max(), 1.0);
        assert_eq!(field.min(), 0.0);
    }

    #[test]
    fn density_range_and_determinism() {
        let cfg = cfg();
        let a = gen_cell_density(&mut sample_rng(3, 9), &cfg);
        let b = gen_cell_density(&mut sample_rng(3, 9), &cfg);
        assert_eq!(a, b);
        assert_eq!(a.min(), 0.0);
        assert_eq!(a.max(), 1.0);
    }

    #[test]
    fn switching_zero_inputs_give_zero() {
        let z = Grid2D::zeros(64, 64);
        let out = blend_switching(&z, &z).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    fn pearson(a: &Grid2D, b: &Grid2D) -> f64 {
        let (ma, mb) = (a.mean(), b.mean());
        let mut num = 0.0;
        let (mut va, mut vb) = (0.0, 0.0);
        for (&x, &y) in a.values().iter().zip(b.values()) {
            num += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        num / (va * vb).sqrt()
    }

    #[test]
    fn switching_correlates_with_density() {
        let cfg = cfg();
        let mut total = 0.0;
        for i in 0..100 {
            let mut rng = sample_rng(11, i);
            let density = gen_cell_density(&mut rng, &cfg);
            let switching = gen_switching(&mut rng, &cfg, &density);
            assert_eq!(switching, {
                let mut rng = sample_rng(11, i);
                let d = gen_cell_density(&mut rng, &cfg);
                gen_switching(&mut rng, &cfg, &d)
            });
            total += pearson(&density, &switching);
        }
        assert!(total / 100.0 > 0.3, "mean correlation {}", total / 100.0);
    }

    #[test]
    fn raw_label_uniform_arithmetic() {
        let half = Grid2D::filled(8, 8, 0.5);
        let raw = raw_label(&half, &half, &half, 1e-6).unwrap();
        let expected = 0.25 / 0.500001;
        assert!(raw.values().iter().all(|&v| (v - expected).abs() < 1e-15));
        assert!((expected - 0.4999990).abs() < 1e-7);
    }

    #[test]
    fn zero_switching_gives_zero_label() {
        let cfg = cfg();
        let s = generate_sample(&cfg, 0);
        let zero = Grid2D::zeros(64, 64);
        let label = synth_label(&s.power_grid, &s.cell_density, &zero, &cfg).unwrap();
        assert!(label.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stronger_grid_never_raises_raw_label() {
        let cfg = cfg();
        let s = generate_sample(&cfg, 1);
        let base = raw_label(&s.power_grid, &s.cell_density, &s.switching, cfg.eps).unwrap();
        let boosted_grid = s.power_grid.map(|v| v * 1.7);
        let boosted = raw_label(&boosted_grid, &s.cell_density, &s.switching, cfg.eps).unwrap();
        assert!(base.values().iter().zip(boosted.values()).all(|(a, b)| b <= a));
    }

    #[test]
    fn sample_is_in_unit_range() {
        let cfg = cfg();
        for i in 0..10 {
            let s = generate_sample(&cfg, i);
            for g in [&s.power_grid, &s.cell_density, &s.switching, &s.ir_drop] {
                assert!(g.min() >= 0.0 && g.max() <= 1.0);
            }
            assert_eq!(s.ir_drop.max(), 1.0);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg();
        c.eps = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.blob_count_range = (5, 2);
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.grid_floor = 0.0;
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
