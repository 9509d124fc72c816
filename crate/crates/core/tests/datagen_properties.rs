use std::fs;

use irdrop_core::datagen::{generate_sample, generate_samples, raw_label, synth_label, GenConfig};
use irdrop_core::dataset::{generate_dataset, Dataset, CELL_DENSITY_FILE, LABELS_FILE, POWER_GRID_FILE, SWITCHING_FILE};
use irdrop_core::Grid2D;

fn small(n: usize, seed: u64) -> GenConfig {
    GenConfig {
        n_samples: n,
        seed,
        ..GenConfig::default()
    }
}

#[test]
fn raw_label_is_monotone_in_each_input() {
    let cfg = GenConfig::default();
    for i in 0..30 {
        let s = generate_sample(&cfg, i);
        let base = raw_label(&s.power_grid, &s.cell_density, &s.switching, cfg.eps).unwrap();
        let more_switching = raw_label(&s.power_grid, &s.cell_density, &s.switching.map(|v| v * 1.1), cfg.eps).unwrap();
        let more_density = raw_label(&s.power_grid, &s.cell_density.map(|v| v * 1.1), &s.switching, cfg.eps).unwrap();
        let stronger_grid = raw_label(&s.power_grid.map(|v| v * 1.1), &s.cell_density, &s.switching, cfg.eps).unwrap();
        for k in 0..base.len() {
            let b = base.values()[k];
            assert!(more_switching.values()[k] >= b);
            assert!(more_density.values()[k] >= b);
            assert!(stronger_grid.values()[k] <= b);
        }
    }
}

#[test]
fn uniform_maps_give_the_closed_form_raw_value() {
    let half = Grid2D::filled(64, 64, 0.5);
    let raw = raw_label(&half, &half, &half, 1e-6).unwrap();
    let expected = 0.25 / 0.500001;
    assert!(raw.values().iter().all(|&v| (v - expected).abs() < 1e-15));
    assert!((expected - 0.4999990).abs() < 1e-7);
}

#[test]
fn zero_switching_gives_zero_label() {
    let s = generate_sample(&GenConfig::default(), 0);
    let label = synth_label(&s.power_grid, &s.cell_density, &Grid2D::zeros(64, 64), &GenConfig::default()).unwrap();
    assert!(label.values().iter().all(|&v| v == 0.0));
}

#[test]
fn every_map_respects_its_range() {
    let cfg = small(40, 3);
    for s in generate_samples(&cfg).unwrap().samples {
        assert!(s.power_grid.min() >= cfg.grid_floor - 1e-12 && s.power_grid.max() <= 1.0);
        for g in [&s.cell_density, &s.switching, &s.ir_drop] {
            assert!(g.min() >= 0.0 && g.max() <= 1.0);
        }
        assert_eq!((s.cell_density.min(), s.cell_density.max()), (0.0, 1.0));
    }
}

#[test]
fn samples_do_not_depend_on_generation_order() {
    let cfg = small(6, 9);
    let all = generate_samples(&cfg).unwrap();
    for i in [5u64, 0, 3] {
        assert_eq!(all.samples[i as usize], generate_sample(&cfg, i));
    }
}

#[test]
fn dataset_files_are_byte_identical_across_runs() {
    let cfg = small(10, 7);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&cfg, a.path()).unwrap();
    generate_dataset(&cfg, b.path()).unwrap();
    for file in [POWER_GRID_FILE, CELL_DENSITY_FILE, SWITCHING_FILE, LABELS_FILE] {
        let (x, y) = (fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
        assert_eq!(x, y, "{file}");
        assert_eq!(x.len(), 128 + 10 * 64 * 64 * 4);
    }
    let loaded = Dataset::load(a.path()).unwrap();
    assert_eq!(loaded.len(), 10);
    assert!(loaded.samples.iter().all(|s| s.ir_drop.min() >= 0.0 && s.ir_drop.max() <= 1.0));
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::load(dir.path().join("nope")).unwrap_err().to_string();
    assert!(err.contains("nope"), "{err}");
}
