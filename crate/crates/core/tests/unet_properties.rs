use std::collections::BTreeMap;

use irdrop_core::unet::{backward, forward, load_checkpoint, save_checkpoint, Architecture, Conv2d, ConvSpec, UNetParams};
use irdrop_core::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(h: usize, w: usize, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::new(3, h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn he_init_matches_closed_form_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // fan_in 27, 27 * 3704 = 100_008 draws
    let layer = Conv2d::he_init(ConvSpec::new(3, 3704, 3), &mut rng);
    let n = layer.weight.len() as f64;
    let mean = layer.weight.iter().sum::<f64>() / n;
    let std = (layer.weight.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let expected = (2.0f64 / 27.0).sqrt();
    assert!((expected - 0.2722).abs() < 1e-4);
    assert!((std - expected).abs() / expected < 0.05, "std {std}");
    assert!(layer.bias.iter().all(|&b| b == 0.0));
}

#[test]
fn shifted_input_gives_shifted_output_in_the_interior() {
    // Shifts by a multiple of 4 commute with both pooling stages; pixels
    // farther than the receptive field from any border never see padding.
    let (size, shift, margin) = (128, 4, 32);
    let params = UNetParams::he_init(Architecture::default(), 5);
    let x = random_input(size, size, 6);
    let shifted = Tensor3::new(3, size, size, {
        let mut v = vec![0.0; 3 * size * size];
        for c in 0..3 {
            for r in shift..size {
                for col in shift..size {
                    v[(c * size + r) * size + col] = x.get(c, r - shift, col - shift);
                }
            }
        }
        v
    })
    .unwrap();
    let y = params.predict(&x).unwrap();
    let ys = params.predict(&shifted).unwrap();
    for r in margin..size - margin {
        for c in margin..size - margin {
            let (a, b) = (y.get(r - shift, c - shift), ys.get(r, c));
            assert!((a - b).abs() <= 1e-6, "({r}, {c}): {a} vs {b}");
        }
    }
}

#[test]
fn loaded_checkpoint_predicts_bitwise_identically() {
    let dir = tempfile::tempdir().unwrap();
    let params = UNetParams::he_init(Architecture::default(), 8);
    save_checkpoint(&params, dir.path(), BTreeMap::new()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let x = random_input(64, 64, 9);
    let (a, b) = (params.predict(&x).unwrap(), loaded.predict(&x).unwrap());
    assert_eq!(a, b);
    assert_eq!(params.fingerprint(), loaded.fingerprint());
}

#[test]
fn forward_and_backward_are_deterministic() {
    let params = UNetParams::he_init(Architecture::default(), 12);
    let x = random_input(64, 64, 13);
    let g = Tensor3::new(1, 64, 64, random_input(64, 64, 14).values()[..4096].to_vec()).unwrap();
    let run = || {
        let (y, cache) = forward(&params, &x).unwrap();
        let (grads, gx) = backward(&params, &cache, &g).unwrap();
        (y, grads, gx)
    };
    assert_eq!(run(), run());
}

#[test]
fn seeds_select_different_networks() {
    let arch = Architecture::default();
    assert_eq!(UNetParams::he_init(arch, 1), UNetParams::he_init(arch, 1));
    assert_ne!(UNetParams::he_init(arch, 1), UNetParams::he_init(arch, 2));
    assert_eq!(UNetParams::he_init(arch, 1).param_count(), 118_273);
}
