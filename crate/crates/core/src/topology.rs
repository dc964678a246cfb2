//! Random networks from a compact topology string.
//!
//! Tokens are separated by `-`:
//!
//! * `cN[kK][sS]`: conv block with N outputs, kernel K (default 3), stride S
//!   (default 1), padding K/2, BN and ReLU
//! * `mp`: 2x2 max pool
//! * `gap`: global average pool
//! * `fcN`: linear head with N outputs (must follow `gap`)
//!
//! e.g. `c16-c32-mp-c64-gap-fc10`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Activation, BatchNormParams, ConvBlock, Layer, Linear, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Conv { out: usize, kernel: usize, stride: usize },
    MaxPool,
    Gap,
    Fc(usize),
}

fn number(s: &str, tok: &str) -> Result<usize> {
    s.parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("bad number in token {tok:?}")))
}

fn parse_conv(tok: &str) -> Result<Token> {
    let body = &tok[1..];
    let end_out = body.find(['k', 's']).unwrap_or(body.len());
    let out = number(&body[..end_out], tok)?;
    let (mut kernel, mut stride) = (3, 1);
    let mut rest = &body[end_out..];
    while !rest.is_empty() {
        let key = rest.as_bytes()[0];
        let end = rest[1..].find(['k', 's']).map_or(rest.len(), |p| p + 1);
        let v = number(&rest[1..end], tok)?;
        match key {
            b'k' => kernel = v,
            _ => stride = v,
        }
        rest = &rest[end..];
    }
    Ok(Token::Conv { out, kernel, stride })
}

pub fn parse_topology(spec: &str) -> Result<Vec<Token>> {
    spec.split('-')
        .map(|tok| match tok {
            "mp" => Ok(Token::MaxPool),
            "gap" => Ok(Token::Gap),
            t if t.starts_with("fc") => Ok(Token::Fc(number(&t[2..], t)?)),
            t if t.starts_with('c') => parse_conv(t),
            t => Err(Error::InvalidArgument(format!("unknown topology token {t:?}"))),
        })
        .collect()
}

/// Builds a random BN network. Weights are He-normal; BN parameters are
/// uniform with `gamma` in [0.5, 1.5], `beta` in [-0.5, 0.5], `mean` in
/// [-1, 1] and `var` in [0.25, 4]. Same seed, same network.
pub fn random_network(spec: &str, input_shape: [usize; 3], seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = input_shape[0];
    let mut layers = Vec::new();
    for tok in parse_topology(spec)? {
        match tok {
            Token::Conv { out, kernel, stride } => {
                let fan_in = channels * kernel * kernel;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                let data = (0..out * fan_in)
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect();
                let uni = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| {
                    (0..out).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>()
                };
                let bn = BatchNormParams {
                    gamma: uni(&mut rng, 0.5, 1.5),
                    beta: uni(&mut rng, -0.5, 0.5),
                    mean: uni(&mut rng, -1.0, 1.0),
                    var: uni(&mut rng, 0.25, 4.0),
                    eps: 1e-5,
                };
                layers.push(Layer::Conv(ConvBlock {
                    weight: Tensor::new(vec![out, channels, kernel, kernel], data)?,
                    bias: None,
                    stride,
                    pad: kernel / 2,
                    bn: Some(bn),
                    activation: Activation::Relu,
                    wbits: 32,
                }));
                channels = out;
            }
            Token::MaxPool => layers.push(Layer::MaxPool),
            Token::Gap => layers.push(Layer::GlobalAvgPool),
            Token::Fc(out) => {
                let normal = Normal::new(0.0, (1.0 / channels as f64).sqrt()).expect("finite std");
                let data = (0..out * channels)
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect();
                let bias = (0..out).map(|_| rng.random_range(-0.1f32..0.1)).collect();
                layers.push(Layer::Linear(Linear {
                    weight: Tensor::new(vec![out, channels], data)?,
                    bias: Some(bias),
                    wbits: 32,
                }));
                channels = out;
            }
        }
    }
    let net = Network { input_shape, layers };
    net.validate()?;
    Ok(net)
}

/// Parses `CxHxW`.
pub fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| number(d, s))
        .collect::<Result<_>>()?;
    dims.try_into()
        .map_err(|_| Error::InvalidArgument(format!("shape {s:?} is not CxHxW")))
}
