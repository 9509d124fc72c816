use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat, maxpool2, maxpool2_backward, relu_backward_inplace, relu_inplace, split_channels, upsample2,
    upsample2_backward, Conv2d, ConvSpec,
};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, Tensor3};

pub const INPUT_CHANNELS: usize = 3;

/// Layer names in storage order.
pub const LAYER_NAMES: [&str; 11] = [
    "enc1.conv1",
    "enc1.conv2",
    "enc2.conv1",
    "enc2.conv2",
    "bottleneck.conv1",
    "bottleneck.conv2",
    "dec2.conv1",
    "dec2.conv2",
    "dec1.conv1",
    "dec1.conv2",
    "head",
];

const ENC1_A: usize = 0;
const ENC1_B: usize = 1;
const ENC2_A: usize = 2;
const ENC2_B: usize = 3;
const BOT_A: usize = 4;
const BOT_B: usize = 5;
const DEC2_A: usize = 6;
const DEC2_B: usize = 7;
const DEC1_A: usize = 8;
const DEC1_B: usize = 9;
const HEAD: usize = 10;

/// Channel widths of the two encoder levels and the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: [usize; 3],
}

impl Default for Architecture {
    fn default() -> Self {
        Self { widths: [16, 32, 64] }
    }
}

impl Architecture {
    pub fn new(widths: [usize; 3]) -> Result<Self> {
        if widths.contains(&0) {
            return Err(Error::InvalidParameter(format!("channel widths must be positive, got {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn layer_specs(&self) -> [ConvSpec; 11] {
        let [w1, w2, w3] = self.widths;
        [
            ConvSpec::new(INPUT_CHANNELS, w1, 3),
            ConvSpec::new(w1, w1, 3),
            ConvSpec::new(w1, w2, 3),
            ConvSpec::new(w2, w2, 3),
            ConvSpec::new(w2, w3, 3),
            ConvSpec::new(w3, w3, 3),
            ConvSpec::new(w3 + w2, w2, 3),
            ConvSpec::new(w2, w2, 3),
            ConvSpec::new(w2 + w1, w1, 3),
            ConvSpec::new(w1, w1, 3),
            ConvSpec::new(w1, 1, 1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams {
    pub arch: Architecture,
    pub layers: Vec<Conv2d>,
}

/// Intermediate tensors of one forward pass, as needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ActivationCache {
    arch: Architecture,
    input: Tensor3,
    e1a: Tensor3,
    e1: Tensor3,
    p1: Tensor3,
    p1_idx: Vec<usize>,
    e2a: Tensor3,
    e2: Tensor3,
    p2: Tensor3,
    p2_idx: Vec<usize>,
    ba: Tensor3,
    b: Tensor3,
    c2: Tensor3,
    d2a: Tensor3,
    d2: Tensor3,
    c1: Tensor3,
    d1a: Tensor3,
    d1: Tensor3,
}

impl UNetParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            layers: arch.layer_specs().into_iter().map(Conv2d::zeros).collect(),
        }
    }

    /// He-initialized parameters drawn from a seeded stream, layer by layer
    /// in storage order.
    pub fn he_init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            arch,
            layers: arch
                .layer_specs()
                .into_iter()
                .map(|spec| Conv2d::he_init(spec, &mut rng))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Zero-valued container with the same structure, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch)
    }

    pub fn check_consistent(&self) -> Result<()> {
        let specs = self.arch.layer_specs();
        if self.layers.len() != specs.len() {
            return Err(Error::InvalidState(format!(
                "expected {} layers, found {}",
                specs.len(),
                self.layers.len()
            )));
        }
        for ((layer, spec), name) in self.layers.iter().zip(specs).zip(LAYER_NAMES) {
            if layer.spec != spec || layer.weight.len() != spec.weight_len() || layer.bias.len() != spec.out_channels {
                return Err(Error::InvalidState(format!("layer {name} does not match the architecture")));
            }
        }
        Ok(())
    }

    /// Visits every parameter array as `(name, values)`.
    pub fn arrays(&self) -> impl Iterator<Item = (String, &[f64])> {
        self.layers.iter().zip(LAYER_NAMES).flat_map(|(l, name)| {
            [
                (format!("{name}.weight"), l.weight.as_slice()),
                (format!("{name}.bias"), l.bias.as_slice()),
            ]
        })
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut [f64])> {
        self.layers
            .iter_mut()
            .zip(LAYER_NAMES)
            .flat_map(|(l, name)| [(name, l.weight.as_mut_slice()), (name, l.bias.as_mut_slice())])
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// 64-bit FNV-1a over every parameter's bit pattern; identifies a
    /// parameter snapshot.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, arr) in self.arrays() {
            for v in arr {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Inference on a preprocessed `(3, H, W)` tensor.
    pub fn predict(&self, x: &Tensor3) -> Result<Grid2D> {
        let (y, _) = forward(self, x)?;
        y.channel(0)
    }
}

fn conv_relu(layer: &Conv2d, x: &Tensor3) -> Result<Tensor3> {
    let mut y = layer.forward(x)?;
    relu_inplace(&mut y);
    Ok(y)
}

pub fn forward(params: &UNetParams, x: &Tensor3) -> Result<(Tensor3, ActivationCache)> {
    params.check_consistent()?;
    let (c, h, w) = x.shape();
    if c != INPUT_CHANNELS {
        return Err(Error::Shape(format!("model input needs {INPUT_CHANNELS} channels, got {c}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!("input height and width must be divisible by 4, got {h}x{w}")));
    }
    let l = &params.layers;

    let e1a = conv_relu(&l[ENC1_A], x)?;
    let e1 = conv_relu(&l[ENC1_B], &e1a)?;
    let (p1, p1_idx) = maxpool2(&e1);
    let e2a = conv_relu(&l[ENC2_A], &p1)?;
    let e2 = conv_relu(&l[ENC2_B], &e2a)?;
    let (p2, p2_idx) = maxpool2(&e2);
    let ba = conv_relu(&l[BOT_A], &p2)?;
    let b = conv_relu(&l[BOT_B], &ba)?;
    let c2 = concat(&upsample2(&b), &e2)?;
    let d2a = conv_relu(&l[DEC2_A], &c2)?;
    let d2 = conv_relu(&l[DEC2_B], &d2a)?;
    let c1 = concat(&upsample2(&d2), &e1)?;
    let d1a = conv_relu(&l[DEC1_A], &c1)?;
    let d1 = conv_relu(&l[DEC1_B], &d1a)?;
    let y = l[HEAD].forward(&d1)?;

    let cache = ActivationCache {
        arch: params.arch,
        input: x.clone(),
        e1a,
        e1,
        p1,
        p1_idx,
        e2a,
        e2,
        p2,
        p2_idx,
        ba,
        b,
        c2,
        d2a,
        d2,
        c1,
        d1a,
        d1,
    };
    Ok((y, cache))
}

/// Backward through `relu(conv(input))` whose output was `activation`.
fn conv_relu_backward(
    layer: &Conv2d,
    input: &Tensor3,
    activation: &Tensor3,
    mut grad: Tensor3,
    grad_layer: &mut Conv2d,
    want_input_grad: bool,
) -> Result<Option<Tensor3>> {
    relu_backward_inplace(&mut grad, activation);
    layer.backward(input, &grad, grad_layer, want_input_grad)
}

fn add_assign(a: &mut Tensor3, b: &Tensor3) {
    for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
        *x += y;
    }
}

/// Exact gradients of the forward computation given `dL/dy`; returns the
/// parameter gradients and `dL/dx`.
pub fn backward(params: &UNetParams, cache: &ActivationCache, grad_y: &Tensor3) -> Result<(UNetParams, Tensor3)> {
    let mut grads = params.zeros_like();
    let grad_x = backward_into(params, cache, grad_y, &mut grads)?;
    Ok((grads, grad_x))
}

/// Like [`backward`] but accumulates into existing gradient storage.
pub fn backward_into(
    params: &UNetParams,
    cache: &ActivationCache,
    grad_y: &Tensor3,
    grads: &mut UNetParams,
) -> Result<Tensor3> {
    params.check_consistent()?;
    if cache.arch != params.arch || grads.arch != params.arch {
        return Err(Error::InvalidState("activation cache or gradient storage belongs to a different architecture".into()));
    }
    let (_, h, w) = cache.input.shape();
    if grad_y.shape() != (1, h, w) {
        return Err(Error::InvalidState(format!(
            "output gradient has shape {:?}, forward produced (1, {h}, {w})",
            grad_y.shape()
        )));
    }
    let l = &params.layers;
    let g = &mut grads.layers;
    let [w1, w2, _] = params.arch.widths;
    let missing = || Error::InvalidState("missing input gradient".into());

    let g_d1 = l[HEAD].backward(&cache.d1, grad_y, &mut g[HEAD], true)?.ok_or_else(missing)?;
    let g_d1a = conv_relu_backward(&l[DEC1_B], &cache.d1a, &cache.d1, g_d1, &mut g[DEC1_B], true)?.ok_or_else(missing)?;
    let g_c1 = conv_relu_backward(&l[DEC1_A], &cache.c1, &cache.d1a, g_d1a, &mut g[DEC1_A], true)?.ok_or_else(missing)?;
    let (g_u1, g_e1_skip) = split_channels(&g_c1, w2);

    let g_d2 = upsample2_backward(&g_u1);
    let g_d2a = conv_relu_backward(&l[DEC2_B], &cache.d2a, &cache.d2, g_d2, &mut g[DEC2_B], true)?.ok_or_else(missing)?;
    let g_c2 = conv_relu_backward(&l[DEC2_A], &cache.c2, &cache.d2a, g_d2a, &mut g[DEC2_A], true)?.ok_or_else(missing)?;
    let (g_u2, g_e2_skip) = split_channels(&g_c2, params.arch.widths[2]);

    let g_b = upsample2_backward(&g_u2);
    let g_ba = conv_relu_backward(&l[BOT_B], &cache.ba, &cache.b, g_b, &mut g[BOT_B], true)?.ok_or_else(missing)?;
    let g_p2 = conv_relu_backward(&l[BOT_A], &cache.p2, &cache.ba, g_ba, &mut g[BOT_A], true)?.ok_or_else(missing)?;

    let mut g_e2 = maxpool2_backward(&g_p2, &cache.p2_idx, cache.e2.shape());
    add_assign(&mut g_e2, &g_e2_skip);
    debug_assert_eq!(g_e2.channels(), w2);
    let g_e2a = conv_relu_backward(&l[ENC2_B], &cache.e2a, &cache.e2, g_e2, &mut g[ENC2_B], true)?.ok_or_else(missing)?;
    let g_p1 = conv_relu_backward(&l[ENC2_A], &cache.p1, &cache.e2a, g_e2a, &mut g[ENC2_A], true)?.ok_or_else(missing)?;

    let mut g_e1 = maxpool2_backward(&g_p1, &cache.p1_idx, cache.e1.shape());
    add_assign(&mut g_e1, &g_e1_skip);
    debug_assert_eq!(g_e1.channels(), w1);
    let g_e1a = conv_relu_backward(&l[ENC1_B], &cache.e1a, &cache.e1, g_e1, &mut g[ENC1_B], true)?.ok_or_else(missing)?;
    let g_x = conv_relu_backward(&l[ENC1_A], &cache.input, &cache.e1a, g_e1a, &mut g[ENC1_A], true)?.ok_or_else(missing)?;
    Ok(g_x)
}
