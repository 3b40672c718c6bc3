//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use crowd_density::network::{BackboneStage, NetworkConfig};
use crowd_density::sit::SitConfig;
use crowd_density::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Desk-scale network: stride 4, three SiT blocks, G = 6 groups of 8 channels.
pub fn toy_net() -> NetworkConfig {
    NetworkConfig::toy()
}

/// Smaller still, for finite-difference checks over every parameter.
pub fn tiny_net(groups: usize) -> NetworkConfig {
    NetworkConfig {
        backbone: vec![
            BackboneStage { channels: 3, pool: true },
            BackboneStage { channels: 4, pool: false },
        ],
        sit_count: 2,
        sit: SitConfig {
            groups,
            group_width: 2,
            out_channels: 4,
            ..SitConfig::default()
        },
        head_width: 3,
        init_std: 0.3,
        ..NetworkConfig::default()
    }
}

/// Direct seven-loop grouped dilated convolution with zero padding.
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    out_ch: usize,
    k: usize,
    rate: usize,
    groups: usize,
) -> Tensor<f64> {
    let s = x.shape();
    let (cin_g, cout_g) = (s.c / groups, out_ch / groups);
    let pad = (rate * (k - 1) / 2) as isize;
    let mut out = Tensor::zeros([s.n, out_ch, s.h, s.w]);
    for n in 0..s.n {
        for o in 0..out_ch {
            let g = o / cout_g;
            for i in 0..s.h {
                for j in 0..s.w {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for a in 0..k {
                            for b in 0..k {
                                let y = i as isize + (a * rate) as isize - pad;
                                let xx = j as isize + (b * rate) as isize - pad;
                                if y >= 0 && xx >= 0 && (y as usize) < s.h && (xx as usize) < s.w {
                                    acc += w.at(o, ci, a, b) * x.at(n, c, y as usize, xx as usize);
                                }
                            }
                        }
                    }
                    let idx = out.index(n, o, i, j);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Nonzero bounding box `(rows, cols)` of one channel plane.
pub fn support(t: &Tensor<f64>, n: usize, c: usize) -> (usize, usize) {
    let s = t.shape();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..s.h {
        for j in 0..s.w {
            if t.at(n, c, i, j) != 0.0 {
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    if r0 == usize::MAX {
        (0, 0)
    } else {
        (r1 - r0 + 1, c1 - c0 + 1)
    }
}
