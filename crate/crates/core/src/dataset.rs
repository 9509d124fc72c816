//! On-disk dataset layout: four `(N, H, W)` `.npy` files in one directory.

use std::fs;
use std::path::Path;

use crate::datagen::{generate_samples, GenConfig};
use crate::error::{Error, Result};
use crate::grid::{preprocess, Grid2D, Tensor3};
use crate::npy::{read_npy_file, write_npy_file, ArrayRecord, DType};

pub const POWER_GRID_FILE: &str = "input_power_grid.npy";
pub const CELL_DENSITY_FILE: &str = "input_cell_density.npy";
pub const SWITCHING_FILE: &str = "input_switching.npy";
pub const LABELS_FILE: &str = "labels_ir_drop.npy";

#[derive(Debug, Clone, PartialEq)]
pub struct InputMaps {
    pub power_grid: Grid2D,
    pub cell_density: Grid2D,
    pub switching: Grid2D,
}

impl InputMaps {
    pub fn to_tensor(&self) -> Result<Tensor3> {
        preprocess(&self.power_grid, &self.cell_density, &self.switching)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub power_grid: Grid2D,
    pub cell_density: Grid2D,
    pub switching: Grid2D,
    pub ir_drop: Grid2D,
}

impl LabeledSample {
    pub fn inputs(&self) -> InputMaps {
        InputMaps {
            power_grid: self.power_grid.clone(),
            cell_density: self.cell_density.clone(),
            switching: self.switching.clone(),
        }
    }

    /// Preprocessed `(3, H, W)` model input.
    pub fn input_tensor(&self) -> Result<Tensor3> {
        preprocess(&self.power_grid, &self.cell_density, &self.switching)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let columns: [(&str, fn(&LabeledSample) -> &Grid2D); 4] = [
            (POWER_GRID_FILE, |s| &s.power_grid),
            (CELL_DENSITY_FILE, |s| &s.cell_density),
            (SWITCHING_FILE, |s| &s.switching),
            (LABELS_FILE, |s| &s.ir_drop),
        ];
        for (name, column) in columns {
            let grids: Vec<Grid2D> = self.samples.iter().map(|s| column(s).clone()).collect();
            let rec = ArrayRecord::from_grids(&grids)?;
            write_npy_file(dir.join(name), &rec, dtype)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let inputs = load_inputs(dir)?;
        let labels = load_stack(&dir.join(LABELS_FILE))?;
        if labels.len() != inputs.len() {
            return Err(Error::at(
                dir.join(LABELS_FILE),
                Error::Shape(format!("{} labels for {} input samples", labels.len(), inputs.len())),
            ));
        }
        let samples = inputs
            .into_iter()
            .zip(labels)
            .map(|(m, ir_drop)| {
                m.power_grid.ensure_same_shape(&ir_drop)?;
                Ok(LabeledSample {
                    power_grid: m.power_grid,
                    cell_density: m.cell_density,
                    switching: m.switching,
                    ir_drop,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::at(dir.join(LABELS_FILE), e))?;
        Ok(Self::new(samples))
    }
}

fn load_stack(path: &Path) -> Result<Vec<Grid2D>> {
    read_npy_file(path)?.to_grids().map_err(|e| Error::at(path, e))
}

/// Loads only the three input files (labels may be absent for inference).
pub fn load_inputs(dir: impl AsRef<Path>) -> Result<Vec<InputMaps>> {
    let dir = dir.as_ref();
    let power = load_stack(&dir.join(POWER_GRID_FILE))?;
    let density = load_stack(&dir.join(CELL_DENSITY_FILE))?;
    let switching = load_stack(&dir.join(SWITCHING_FILE))?;
    if power.len() != density.len() || power.len() != switching.len() {
        return Err(Error::at(
            dir,
            Error::Shape(format!(
                "input files hold {}, {} and {} samples",
                power.len(),
                density.len(),
                switching.len()
            )),
        ));
    }
    power
        .into_iter()
        .zip(density)
        .zip(switching)
        .map(|((power_grid, cell_density), switching)| {
            power_grid.ensure_same_shape(&cell_density)?;
            power_grid.ensure_same_shape(&switching)?;
            Ok(InputMaps {
                power_grid,
                cell_density,
                switching,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::at(dir, e))
}

/// Generates `cfg.n_samples` samples and writes the four dataset files as
/// `f4` arrays of shape `(N, H, W)`.
pub fn generate_dataset(cfg: &GenConfig, dir: impl AsRef<Path>) -> Result<Dataset> {
    let dataset = generate_samples(cfg)?;
    dataset.save(dir, DType::F4)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_f4_rounded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_samples: 3,
            seed: 5,
            ..GenConfig::default()
        };
        let generated = generate_dataset(&cfg, dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in generated.samples.iter().zip(&loaded.samples) {
            let rounded = a.ir_drop.map(|v| v as f32 as f64);
            assert_eq!(rounded, b.ir_drop);
        }
    }

    #[test]
    fn missing_labels_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_samples: 2,
            ..GenConfig::default()
        };
        generate_dataset(&cfg, dir.path()).unwrap();
        fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(load_inputs(dir.path()).unwrap().len(), 2);
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains(LABELS_FILE), "{err}");
    }
}
