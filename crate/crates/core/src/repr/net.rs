//! Parameter layouts and computation graphs of the four methods.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{EncoderSpec, Method};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::toyenv::Image;

const KERNEL: usize = 3;
const STRIDE: usize = 2;

/// Names and shapes of every parameter tensor, in storage order.
pub fn param_layout(spec: &EncoderSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut dense = |name: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{name}.w"), vec![fan_in, fan_out]));
        out.push((format!("{name}.b"), vec![fan_out]));
    };
    match spec.method {
        Method::Sae => {
            let (c1, c2) = (spec.sae_conv_channels, spec.sae_channels);
            let side = spec.sae_target_size();
            let mut v = vec![
                ("conv1.w".to_string(), vec![c1, 1, KERNEL, KERNEL]),
                ("conv1.b".to_string(), vec![c1]),
                ("conv2.w".to_string(), vec![c2, c1, KERNEL, KERNEL]),
                ("conv2.b".to_string(), vec![c2]),
            ];
            v.push(("dec0.w".into(), vec![2 * c2, spec.sae_decoder_hidden]));
            v.push(("dec0.b".into(), vec![spec.sae_decoder_hidden]));
            v.push(("dec1.w".into(), vec![spec.sae_decoder_hidden, side * side]));
            v.push(("dec1.b".into(), vec![side * side]));
            return v;
        }
        method => {
            let mut width = spec.input_dim();
            for (i, &h) in spec.hidden.iter().enumerate() {
                dense(&format!("enc{i}"), width, h);
                width = h;
            }
            let latent = spec.latent_dim;
            if method.is_variational() {
                dense("mu", width, latent);
                dense("logsigma", width, latent);
            } else {
                dense("z", width, latent);
            }
            let mut width = latent;
            let widths: Vec<usize> = spec.hidden.iter().rev().copied().chain([spec.input_dim()]).collect();
            for (i, &h) in widths.iter().enumerate() {
                dense(&format!("dec{i}"), width, h);
                width = h;
            }
        }
    }
    out
}

/// Gaussian initialization scaled by fan-in; biases start at zero.
pub(crate) fn init_params<R: Rng>(spec: &EncoderSpec, rng: &mut R) -> Vec<Tensor<f32>> {
    param_layout(spec)
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with(".b") {
                return Tensor::zeros(&shape);
            }
            let fan_in: usize = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
            // the log-sigma head starts near zero so sigma starts near one
            let gain = if name.starts_with("logsigma") || name.starts_with("mu.") { 0.1 } else { 2.0f64.sqrt() };
            let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
            let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(rng) as f32).collect();
            Tensor::new(shape, data).expect("layout shapes are positive")
        })
        .collect()
}

/// Flattens frames into a `[B, H·W]` batch.
pub(crate) fn stack_images<E: Scalar>(images: &[&Image]) -> Result<Tensor<E>> {
    let first = images.first().ok_or_else(|| Error::param("batch", "must not be empty"))?;
    let hw = first.width * first.height;
    let mut data = Vec::with_capacity(images.len() * hw);
    for img in images {
        if img.width * img.height != hw {
            return Err(Error::shape("batch", "frames of different sizes in one batch"));
        }
        data.extend(img.data.iter().map(|&v| E::from_f64(v as f64)));
    }
    Tensor::new(vec![images.len(), hw], data)
}

fn stack_targets<E: Scalar>(spec: &EncoderSpec, images: &[&Image]) -> Result<Tensor<E>> {
    if spec.method == Method::Sae {
        let small: Vec<Image> = images.iter().map(|i| i.downsample2()).collect();
        stack_images(&small.iter().collect::<Vec<_>>())
    } else {
        stack_images(images)
    }
}

/// Standard-normal reparameterization noise for a `[batch, latent]` draw.
pub fn sample_noise<E: Scalar, R: Rng>(rng: &mut R, batch: usize, latent: usize) -> Tensor<E> {
    let data = (0..batch * latent).map(|_| E::from_f64(StandardNormal.sample(rng))).collect();
    Tensor::new(vec![batch, latent], data).expect("positive noise shape")
}

pub(crate) struct Encoded {
    pub mean: Var,
    pub sigma: Option<Var>,
}

pub struct ForwardOutputs {
    /// AE code, posterior mean, or spatial-softmax coordinates.
    pub mean: Var,
    pub sigma: Option<Var>,
    /// Code fed to the decoder (a reparameterized sample when noise is given).
    pub latent: Var,
    pub recon: Var,
}

fn check_params(spec: &EncoderSpec, params: &[Var]) -> Result<()> {
    let n = param_layout(spec).len();
    if params.len() != n {
        return Err(Error::shape("model", format!("{} parameter vars for a {n}-tensor layout", params.len())));
    }
    Ok(())
}

pub(crate) fn encode_graph<E: Scalar>(
    tape: &mut Tape<E>,
    spec: &EncoderSpec,
    params: &[Var],
    input: Var,
) -> Result<Encoded> {
    check_params(spec, params)?;
    let batch = tape.value(input).shape()[0];
    if spec.method == Method::Sae {
        let n = spec.image_size;
        let x = tape.reshape(input, vec![batch, 1, n, n])?;
        let h = tape.conv2d(x, params[0], params[1], STRIDE, 1)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, params[2], params[3], STRIDE, 0)?;
        let h = tape.relu(h);
        let coords = tape.spatial_softmax(h, spec.temperature)?;
        return Ok(Encoded { mean: coords, sigma: None });
    }
    let mut h = input;
    let mut p = 0;
    for _ in &spec.hidden {
        h = tape.linear(h, params[p], params[p + 1])?;
        h = tape.relu(h);
        p += 2;
    }
    let mean = tape.linear(h, params[p], params[p + 1])?;
    let sigma = if spec.method.is_variational() {
        let log_sigma = tape.linear(h, params[p + 2], params[p + 3])?;
        Some(tape.exp(log_sigma))
    } else {
        None
    };
    Ok(Encoded { mean, sigma })
}

fn decode_graph<E: Scalar>(tape: &mut Tape<E>, spec: &EncoderSpec, params: &[Var], z: Var) -> Result<Var> {
    let layers = if spec.method == Method::Sae { 2 } else { spec.hidden.len() + 1 };
    let first = params.len() - 2 * layers;
    let mut h = z;
    for l in 0..layers {
        h = tape.linear(h, params[first + 2 * l], params[first + 2 * l + 1])?;
        h = if l + 1 == layers { tape.sigmoid(h) } else { tape.relu(h) };
    }
    Ok(h)
}

/// Full encode/decode pass. With `noise`, variational models decode
/// `μ + σ·ε`; otherwise they decode the mean.
pub(crate) fn forward<E: Scalar>(
    tape: &mut Tape<E>,
    spec: &EncoderSpec,
    params: &[Var],
    input: Var,
    noise: Option<Var>,
) -> Result<ForwardOutputs> {
    let enc = encode_graph(tape, spec, params, input)?;
    let latent = match (enc.sigma, noise) {
        (Some(sigma), Some(eps)) => {
            let spread = tape.mul(sigma, eps)?;
            tape.add(enc.mean, spread)?
        }
        _ => enc.mean,
    };
    let recon = decode_graph(tape, spec, params, latent)?;
    Ok(ForwardOutputs { mean: enc.mean, sigma: enc.sigma, latent, recon })
}

/// Training objective on one batch.
///
/// AE and SAE use the per-element mean squared error. VAE and β-VAE use the
/// per-image summed squared error plus `β·KL`, both averaged over the batch
/// (β = 1 for the VAE).
pub fn batch_loss<E: Scalar>(
    tape: &mut Tape<E>,
    spec: &EncoderSpec,
    params: &[Var],
    images: &[&Image],
    noise: Option<&Tensor<E>>,
    beta: Option<f64>,
) -> Result<Var> {
    batch_loss_weighted(tape, spec, params, images, noise, beta, 1.0)
}

/// [`batch_loss`] with the KL term additionally scaled by `kl_scale`.
pub(crate) fn batch_loss_weighted<E: Scalar>(
    tape: &mut Tape<E>,
    spec: &EncoderSpec,
    params: &[Var],
    images: &[&Image],
    noise: Option<&Tensor<E>>,
    beta: Option<f64>,
    kl_scale: f64,
) -> Result<Var> {
    let input = tape.constant(stack_images(images)?);
    let target = tape.constant(stack_targets(spec, images)?);
    let noise = noise.map(|n| tape.constant(n.clone()));
    let out = forward(tape, spec, params, input, noise)?;
    match spec.method {
        Method::Ae | Method::Sae => tape.mse(out.recon, target),
        Method::Vae | Method::Bvae => {
            let beta = match spec.method {
                Method::Vae => 1.0,
                _ => beta.ok_or_else(|| Error::Config("bvae loss requires beta".into()))?,
            };
            let batch = images.len() as f64;
            let sigma = out.sigma.expect("variational encoders expose sigma");
            let recon = tape.squared_error_sum(out.recon, target)?;
            let kl = tape.gaussian_kl(out.mean, sigma)?;
            let kl = tape.scale(kl, beta * kl_scale);
            let total = tape.add(recon, kl)?;
            Ok(tape.scale(total, 1.0 / batch))
        }
    }
}
