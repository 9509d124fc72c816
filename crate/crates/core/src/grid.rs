//! Dense row-major containers and the spatial primitives shared by the
//! whole pipeline.
//!
//! Every map in the system (the three layout feature maps, labels and model
//! predictions) is a [`Grid2D`]. Model inputs and outputs are [`Tensor3`]
//! values in channel-major `C×H×W` order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel order of a stacked model input.
pub const CHANNEL_NAMES: [&str; 3] = ["power_grid", "cell_density", "switching"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at ({}, {})",
                pos / width,
                pos % width
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        assert!(value.is_finite());
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Builds a grid by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values).expect("from_fn produced an invalid grid")
    }

    /// Builds a grid from nested rows, as used by the JSON interfaces.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|row| row.len() != width) {
            return Err(Error::Shape(format!(
                "ragged rows: row {r} has {} values, row 0 has {width}",
                rows[r].len()
            )));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.width).map(<[f64]>::to_vec).collect()
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Applies `f` to every value. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        Self::new(self.height, self.width, values).expect("map produced a non-finite value")
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.height, self.width, values)
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    /// Index of the (first) largest value as `(row, col)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Rotates the grid by 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Self {
        let (h, w) = self.shape();
        Self::from_fn(w, h, |r, c| self.get(c, w - 1 - r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got ({channels},{height},{width})"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "({channels},{height},{width}) tensor needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("tensor contains non-finite values".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    /// Internal constructor for hot paths that already guarantee the length.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[channel * n..(channel + 1) * n]
    }

    /// Extracts one channel as a grid.
    pub fn channel(&self, channel: usize) -> Result<Grid2D> {
        if channel >= self.channels {
            return Err(Error::Shape(format!(
                "channel {channel} out of range for {} channels",
                self.channels
            )));
        }
        Grid2D::new(self.height, self.width, self.plane(channel).to_vec())
    }

    pub fn from_grid(grid: &Grid2D) -> Self {
        Self::from_raw(1, grid.height(), grid.width(), grid.values().to_vec())
    }
}

/// Min-max normalization into `[0, 1]`. A constant grid maps to all zeros.
pub fn normalize_minmax(g: &Grid2D) -> Grid2D {
    let (lo, hi) = (g.min(), g.max());
    if hi > lo {
        let span = hi - lo;
        // the clamp pins the endpoints exactly even when (hi - lo) / span rounds
        g.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        Grid2D::zeros(g.height(), g.width())
    }
}

/// Normalized 1-D Gaussian kernel truncated at `ceil(3·sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let mut weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

/// Maps an out-of-range index back into `0..n` by mirroring about the
/// array edges (edge samples are repeated: `.. b a | a b c .. | c b ..`).
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_smooth(g: &Grid2D, sigma: f64) -> Result<Grid2D> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma must be a finite nonnegative number, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = g.shape();
    let src = g.values();

    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in kernel.iter().enumerate() {
                acc += wt * row[reflect_index(c as isize + k as isize - radius, w)];
            }
            tmp[r * w + c] = acc;
        }
    }

    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for (k, &wt) in kernel.iter().enumerate() {
            let src_row = reflect_index(r as isize + k as isize - radius, h);
            let line = &tmp[src_row * w..(src_row + 1) * w];
            for (o, &v) in out[r * w..(r + 1) * w].iter_mut().zip(line) {
                *o += wt * v;
            }
        }
    }
    Grid2D::new(h, w, out)
}

/// Stacks the three feature maps in the fixed channel order
/// (power grid, cell density, switching activity).
pub fn stack_channels(power_grid: &Grid2D, cell_density: &Grid2D, switching: &Grid2D) -> Result<Tensor3> {
    power_grid.ensure_same_shape(cell_density)?;
    power_grid.ensure_same_shape(switching)?;
    let (h, w) = power_grid.shape();
    let mut values = Vec::with_capacity(3 * h * w);
    values.extend_from_slice(power_grid.values());
    values.extend_from_slice(cell_density.values());
    values.extend_from_slice(switching.values());
    Ok(Tensor3::from_raw(3, h, w, values))
}

/// The model's input preprocessing: per-map min-max normalization followed
/// by channel stacking.
pub fn preprocess(power_grid: &Grid2D, cell_density: &Grid2D, switching: &Grid2D) -> Result<Tensor3> {
    stack_channels(
        &normalize_minmax(power_grid),
        &normalize_minmax(cell_density),
        &normalize_minmax(switching),
    )
}
