//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's solver, conv or loss code.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use udfc::model::{Activation, BatchNormParams, ConvBlock, Layer, Linear, Network};
use udfc::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gaussian elimination with partial pivoting. `None` if (numerically) singular.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Raw BN pieces straight from the stored fields.
pub fn sigma(bn: &BatchNormParams, c: usize) -> f64 {
    (bn.var[c] as f64 + bn.eps as f64).sqrt()
}

/// `(G columns, V, P, K_j)` built with scalar loops from the textbook formulas:
/// `G_i = (gamma_i sigma_j)/(sigma_i gamma_j) W_i`, `K = beta - gamma mu / sigma`.
pub fn naive_system(conv: &ConvBlock, j: usize, kept: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, f64) {
    let bn = conv.bn.as_ref().expect("bn");
    let d = conv.weight.shape()[1..].iter().product::<usize>();
    let w = |o: usize, t: usize| conv.weight.data()[o * d + t] as f64;
    let k = |c: usize| bn.beta[c] as f64 - bn.gamma[c] as f64 * bn.mean[c] as f64 / sigma(bn, c);
    let mut cols = Vec::new();
    for &i in kept {
        let f = (bn.gamma[i] as f64 * sigma(bn, j)) / (sigma(bn, i) * bn.gamma[j] as f64);
        cols.push((0..d).map(|t| f * w(i, t)).collect());
    }
    let v = (0..d).map(|t| w(j, t)).collect();
    let p = kept.iter().map(|&i| k(i)).collect();
    (cols, v, p, k(j))
}

pub fn naive_pruning_loss(cols: &[Vec<f64>], v: &[f64], p: &[f64], kj: f64, s: &[f64], alpha1: f64) -> f64 {
    let mut total = 0.0;
    for t in 0..v.len() {
        let mut r = v[t];
        for (c, col) in cols.iter().enumerate() {
            r -= s[c] * col[t];
        }
        total += r * r;
    }
    let mut shift = kj;
    for (c, pc) in p.iter().enumerate() {
        shift -= pc * s[c];
    }
    total + alpha1 * shift * shift
}

/// Normal equations assembled from scratch.
pub fn naive_normal_equations(
    cols: &[Vec<f64>],
    v: &[f64],
    p: &[f64],
    kj: f64,
    alpha1: f64,
    ridge: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = cols.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for r in 0..n {
        for c in 0..n {
            a[r][c] = dot(&cols[r], &cols[c]) + alpha1 * p[r] * p[c] + if r == c { ridge } else { 0.0 };
        }
        b[r] = dot(&cols[r], v) + alpha1 * p[r] * kj;
    }
    (a, b)
}

/// Golden-section refinement around the best point of a uniform grid.
pub fn grid_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = 4000;
    let step = (hi - lo) / n as f64;
    let best = (0..=n)
        .map(|i| lo + i as f64 * step)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let (mut a, mut b) = (best - step, best + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Central finite-difference gradient.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[i] += h;
            lo[i] -= h;
            (f(&hi) - f(&lo)) / (2.0 * h)
        })
        .collect()
}

/// Sliding-window convolution of one CHW sample, in f64.
pub fn naive_conv(
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
    x: &[f32],
    h: usize,
    w: usize,
) -> (Vec<f64>, usize, usize) {
    let s = weight.shape();
    let (o_n, i_n, k) = (s[0], s[1], s[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o_n * oh * ow];
    for o in 0..o_n {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o] as f64);
                for i in 0..i_n {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = weight.data()[((o * i_n + i) * k + ky) * k + kx] as f64;
                            acc += wv * x[(i * h + iy as usize) * w + ix as usize] as f64;
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Conv + BN collapsed into one conv with bias.
pub fn fold_bn(conv: &ConvBlock) -> (Tensor, Vec<f32>) {
    let bn = conv.bn.as_ref().expect("bn");
    let mut w = conv.weight.clone();
    let mut bias = Vec::new();
    for o in 0..conv.out_channels() {
        let a = bn.gamma[o] as f64 / sigma(bn, o);
        for v in w.row_mut(o) {
            *v = (*v as f64 * a) as f32;
        }
        let b0 = conv.bias.as_ref().map_or(0.0, |b| b[o] as f64);
        bias.push((a * (b0 - bn.mean[o] as f64) + bn.beta[o] as f64) as f32);
    }
    (w, bias)
}

pub fn random_bn(rng: &mut ChaCha8Rng, n: usize) -> BatchNormParams {
    let mut u = |lo: f32, hi: f32| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
    BatchNormParams {
        gamma: u(0.5, 1.5),
        beta: u(-0.5, 0.5),
        mean: u(-1.0, 1.0),
        var: u(0.25, 4.0),
        eps: 1e-5,
    }
}

pub fn conv_block(weight: Tensor, bn: Option<BatchNormParams>, activation: Activation) -> ConvBlock {
    let pad = weight.shape()[2] / 2;
    ConvBlock {
        weight,
        bias: None,
        stride: 1,
        pad,
        bn,
        activation,
        wbits: 32,
    }
}

/// Random conv block with BN and He-scaled weights.
pub fn random_block(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> ConvBlock {
    let std = (2.0 / (inp * k * k) as f32).sqrt();
    let w = normals(rng, out * inp * k * k).iter().map(|v| v * std).collect();
    let bn = random_bn(rng, out);
    conv_block(Tensor::new(vec![out, inp, k, k], w).unwrap(), Some(bn), Activation::Relu)
}

/// Two conv blocks where channels `pruned` of block 0 are exact combinations
/// of the other channels, with BN terms consistent with those combinations.
/// Pruned channels get small coefficients so the l2 criterion selects them.
pub fn exact_combination_net(seed: u64, activation: Activation) -> (Network, Vec<usize>) {
    let mut r = rng(seed);
    let (cin, n, k, n_next) = (3, 8, 3, 6);
    let d = cin * k * k;
    let pruned = vec![2, 5];
    let kept: Vec<usize> = (0..n).filter(|c| !pruned.contains(c)).collect();
    let mut w = vec![0f32; n * d];
    let mut bn = random_bn(&mut r, n);
    for &i in &kept {
        for t in 0..d {
            w[i * d + t] = StandardNormal.sample(&mut r);
        }
    }
    for &j in &pruned {
        // a_j W_j = sum c_i a_i W_i and K_j = sum c_i K_i
        let c: Vec<f64> = kept
            .iter()
            .map(|_| {
                let v: f64 = r.random_range(0.02..0.08);
                if r.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let a = |bn: &BatchNormParams, i: usize| bn.gamma[i] as f64 / sigma(bn, i);
        let aj = a(&bn, j);
        for t in 0..d {
            let s: f64 = kept.iter().zip(&c).map(|(&i, ci)| ci * a(&bn, i) * w[i * d + t] as f64).sum();
            w[j * d + t] = (s / aj) as f32;
        }
        let kf = |bn: &BatchNormParams, i: usize| bn.beta[i] as f64 - a(bn, i) * bn.mean[i] as f64;
        let kj: f64 = kept.iter().zip(&c).map(|(&i, ci)| ci * kf(&bn, i)).sum();
        // Choose beta_j so that K_j matches.
        bn.beta[j] = (kj + aj * bn.mean[j] as f64) as f32;
    }
    let b0 = conv_block(Tensor::new(vec![n, cin, k, k], w).unwrap(), Some(bn), activation);
    let b1 = random_block(&mut r, n_next, n, k);
    let net = Network {
        input_shape: [cin, 6, 6],
        layers: vec![Layer::Conv(b0), Layer::Conv(b1)],
    };
    net.validate().unwrap();
    (net, pruned)
}

/// Block 0 channel 7 is a positively scaled copy of channel 0 (weights and
/// BN output), so it survives ReLU exactly. Block 1 has a linear head.
pub fn duplicate_net(seed: u64) -> Network {
    let mut r = rng(seed);
    let mut b0 = random_block(&mut r, 8, 3, 3);
    let c = 0.1f64;
    let bn = b0.bn.as_mut().unwrap();
    let a = |bn: &BatchNormParams, i: usize| bn.gamma[i] as f64 / sigma(bn, i);
    let (a0, a7) = (a(bn, 0), a(bn, 7));
    let k0 = bn.beta[0] as f64 - a0 * bn.mean[0] as f64;
    bn.beta[7] = (c * k0 + a7 * bn.mean[7] as f64) as f32;
    let row0: Vec<f32> = b0.weight.row(0).to_vec();
    for (v, w0) in b0.weight.row_mut(7).iter_mut().zip(row0) {
        *v = (c * a0 / a7 * w0 as f64) as f32;
    }
    let b1 = random_block(&mut r, 5, 8, 3);
    let head = Linear {
        weight: Tensor::new(vec![3, 5], normals(&mut r, 15)).unwrap(),
        bias: None,
        wbits: 32,
    };
    Network {
        input_shape: [3, 6, 6],
        layers: vec![
            Layer::Conv(b0),
            Layer::Conv(b1),
            Layer::GlobalAvgPool,
            Layer::Linear(head),
        ],
    }
}

/// Conv blocks feeding a linear head.
pub fn small_net(seed: u64) -> Network {
    let mut r = rng(seed);
    let b0 = random_block(&mut r, 6, 2, 3);
    let b1 = random_block(&mut r, 5, 6, 3);
    let head = Linear {
        weight: Tensor::new(vec![4, 5], normals(&mut r, 20)).unwrap(),
        bias: Some(normals(&mut r, 4)),
        wbits: 32,
    };
    Network {
        input_shape: [2, 6, 6],
        layers: vec![
            Layer::Conv(b0),
            Layer::MaxPool,
            Layer::Conv(b1),
            Layer::GlobalAvgPool,
            Layer::Linear(head),
        ],
    }
}
