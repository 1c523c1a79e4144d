//! Image state representations: AE, VAE, β-VAE and the spatial autoencoder.

mod net;
mod train;
mod weights;

pub use net::{batch_loss, param_layout, sample_noise, ForwardOutputs};
pub use train::{reconstruction_mse, train, TrainConfig, TrainReport};
pub use weights::{load, save, WEIGHT_FORMAT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::toyenv::{Image, Position};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ae,
    Vae,
    Bvae,
    Sae,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ae, Method::Vae, Method::Bvae, Method::Sae];

    pub fn label(self) -> &'static str {
        match self {
            Method::Ae => "ae",
            Method::Vae => "vae",
            Method::Bvae => "bvae",
            Method::Sae => "sae",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Method::Ae => 1,
            Method::Vae => 2,
            Method::Bvae => 3,
            Method::Sae => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Method::Vae | Method::Bvae)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected ae, vae, bvae or sae)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub method: Method,
    /// Ignored for SAE, whose latent size is `2 * sae_channels`.
    pub latent_dim: usize,
    pub sae_channels: usize,
    /// β-VAE only.
    pub alpha: Option<f64>,
    /// Square input side in pixels.
    pub image_size: usize,
    /// Fully-connected encoder widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    /// Channels of the first SAE convolution.
    pub sae_conv_channels: usize,
    pub sae_decoder_hidden: usize,
    pub temperature: f64,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl EncoderSpec {
    pub fn new(method: Method) -> Self {
        EncoderSpec {
            method,
            latent_dim: 50,
            sae_channels: 8,
            alpha: (method == Method::Bvae).then_some(1.0),
            image_size: 32,
            hidden: vec![256, 64],
            sae_conv_channels: 8,
            sae_decoder_hidden: 128,
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn latent_size(&self) -> usize {
        match self.method {
            Method::Sae => 2 * self.sae_channels,
            _ => self.latent_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Side of the SAE reconstruction target.
    pub fn sae_target_size(&self) -> usize {
        self.image_size / 2
    }

    pub fn beta(&self) -> Result<Option<f64>> {
        match self.method {
            Method::Bvae => {
                let alpha = self.alpha.ok_or_else(|| Error::Config("bvae requires alpha".into()))?;
                compute_beta(alpha, self.input_dim(), self.latent_size()).map(Some)
            }
            _ => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(4) {
            return Err(Error::param(
                "image_size",
                format!("must be a multiple of 4 and at least 16, got {}", self.image_size),
            ));
        }
        match self.method {
            Method::Sae => {
                if self.sae_channels == 0 || self.sae_conv_channels == 0 || self.sae_decoder_hidden == 0 {
                    return Err(Error::param("sae_channels", "channel counts must be positive"));
                }
                if !(self.temperature > 0.0) {
                    return Err(Error::param("temperature", "must be positive"));
                }
            }
            _ => {
                if self.hidden.is_empty() || self.hidden.contains(&0) {
                    return Err(Error::param("hidden", "widths must be positive and non-empty"));
                }
                if self.latent_dim == 0 {
                    return Err(Error::param("latent_dim", "must be positive"));
                }
            }
        }
        if self.latent_size() >= self.input_dim() {
            return Err(Error::param(
                "latent_dim",
                format!("{} is not below the input dimension {}", self.latent_size(), self.input_dim()),
            ));
        }
        if self.method == Method::Bvae {
            match self.alpha {
                Some(a) if a > 0.0 => {}
                Some(a) => return Err(Error::param("alpha", format!("must be positive, got {a}"))),
                None => return Err(Error::Config("bvae requires alpha".into())),
            }
        }
        Ok(())
    }
}

/// `β = α · dim_input / dim_z`.
pub fn compute_beta(alpha: f64, dim_input: usize, dim_z: usize) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::param("alpha", format!("must be positive, got {alpha}")));
    }
    if dim_input == 0 {
        return Err(Error::param("dim_input", "must be positive"));
    }
    if dim_z == 0 {
        return Err(Error::param("dim_z", "must be positive"));
    }
    Ok(alpha * dim_input as f64 / dim_z as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f64>,
    /// Predicted posterior std, variational methods only.
    pub sigma: Option<Vec<f64>>,
}

/// Anything that maps an observation to a latent vector.
///
/// The workspace position is passed alongside the frame so that the oracle
/// can bypass the image; learned models ignore it.
pub trait Representation: Sync {
    fn latent_size(&self) -> usize;
    fn encode_frame(&self, image: &Image, position: Position) -> Result<LatentVector>;

    fn encode_frames(&self, frames: &[(&Image, Position)]) -> Result<Vec<LatentVector>> {
        frames.iter().map(|(img, p)| self.encode_frame(img, *p)).collect()
    }
}

/// Ground-truth effector coordinates, optionally scaled.
#[derive(Clone, Copy, Debug)]
pub struct OracleRepresentation {
    pub scale: f64,
}

impl Default for OracleRepresentation {
    fn default() -> Self {
        OracleRepresentation { scale: 1.0 }
    }
}

impl Representation for OracleRepresentation {
    fn latent_size(&self) -> usize {
        2
    }

    fn encode_frame(&self, _image: &Image, position: Position) -> Result<LatentVector> {
        Ok(LatentVector { values: position.iter().map(|v| v * self.scale).collect(), sigma: None })
    }
}

/// A trained (or freshly initialized) representation model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: EncoderSpec,
    params: Vec<Tensor<f32>>,
    /// Digest of the training configuration that produced the weights.
    pub train_digest: String,
}

/// Frames are encoded in chunks of this many images.
const ENCODE_CHUNK: usize = 256;

impl Model {
    pub fn init(spec: &EncoderSpec) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = net::init_params(spec, &mut rng);
        Ok(Model { spec: spec.clone(), params, train_digest: String::new() })
    }

    pub fn from_parts(spec: EncoderSpec, params: Vec<Tensor<f32>>, train_digest: String) -> Result<Model> {
        spec.validate()?;
        let layout = param_layout(&spec);
        if layout.len() != params.len() {
            return Err(Error::shape(
                "model",
                format!("{} tensors for a {}-tensor layout", params.len(), layout.len()),
            ));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape("model", format!("{name}: expected {shape:?}, got {:?}", p.shape())));
            }
        }
        Ok(Model { spec, params, train_digest })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn method(&self) -> Method {
        self.spec.method
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<Tensor<f32>> {
        &mut self.params
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let n = self.spec.image_size;
        if image.width != n || image.height != n {
            return Err(Error::shape(
                "encode",
                format!("model expects {n}x{n} frames, got {}x{}", image.width, image.height),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, image: &Image) -> Result<LatentVector> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    /// Deterministic encoding: posterior means for variational models.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<LatentVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(ENCODE_CHUNK) {
            for img in chunk {
                self.check_image(img)?;
            }
            let mut tape = Tape::<f32>::new();
            let vars: Vec<_> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
            let input = tape.constant(net::stack_images(chunk)?);
            let enc = net::encode_graph(&mut tape, &self.spec, &vars, input)?;
            let k = self.spec.latent_size();
            let values = tape.value(enc.mean).to_f64_vec();
            let sigma = enc.sigma.map(|s| tape.value(s).to_f64_vec());
            for i in 0..chunk.len() {
                out.push(LatentVector {
                    values: values[i * k..(i + 1) * k].to_vec(),
                    sigma: sigma.as_ref().map(|s| s[i * k..(i + 1) * k].to_vec()),
                });
            }
        }
        Ok(out)
    }

    /// Decoder output for each image (SAE reconstructs the half-size frame).
    pub fn reconstruct(&self, images: &[&Image]) -> Result<Vec<Image>> {
        for img in images {
            self.check_image(img)?;
        }
        let mut tape = Tape::<f32>::new();
        let vars: Vec<_> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let input = tape.constant(net::stack_images(images)?);
        let out = net::forward(&mut tape, &self.spec, &vars, input, None)?;
        let side = if self.spec.method == Method::Sae { self.spec.sae_target_size() } else { self.spec.image_size };
        let data = tape.value(out.recon).data();
        Ok(data.chunks(side * side).map(|c| Image { width: side, height: side, data: c.to_vec() }).collect())
    }

    /// Loss on `images` with the given reparameterization noise.
    pub fn loss(&self, images: &[&Image], noise: Option<&Tensor<f32>>) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let vars: Vec<_> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let l = batch_loss(&mut tape, &self.spec, &vars, images, noise, self.spec.beta()?)?;
        Ok(tape.value(l).item()?.into())
    }
}

impl Representation for Model {
    fn latent_size(&self) -> usize {
        self.spec.latent_size()
    }

    fn encode_frame(&self, image: &Image, _position: Position) -> Result<LatentVector> {
        self.encode(image)
    }

    fn encode_frames(&self, frames: &[(&Image, Position)]) -> Result<Vec<LatentVector>> {
        let imgs: Vec<&Image> = frames.iter().map(|(i, _)| *i).collect();
        self.encode_batch(&imgs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyenv::{render_position, TaskSpec};

    #[test]
    fn beta_examples() {
        assert!((compute_beta(1.0, 1024, 50).unwrap() - 20.48).abs() < 1e-12);
        assert!((compute_beta(0.5, 1024, 100).unwrap() - 5.12).abs() < 1e-12);
        assert_eq!(compute_beta(0.3, 64, 64).unwrap(), 0.3);
        assert!(compute_beta(0.0, 1024, 50).is_err());
        assert!(compute_beta(1.0, 0, 50).is_err());
        assert!(compute_beta(1.0, 1024, 0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(EncoderSpec::new(Method::Ae).validate().is_ok());
        assert!(EncoderSpec { latent_dim: 1024, ..EncoderSpec::new(Method::Ae) }.validate().is_err());
        assert!(EncoderSpec { alpha: None, ..EncoderSpec::new(Method::Bvae) }.validate().is_err());
        assert!(EncoderSpec { alpha: Some(-1.0), ..EncoderSpec::new(Method::Bvae) }.validate().is_err());
        assert_eq!(EncoderSpec::new(Method::Sae).latent_size(), 16);
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::from_tag(m.tag()), Some(m));
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert_eq!(Method::from_tag(0), None);
    }

    #[test]
    fn untrained_sae_coordinates_in_range() {
        let model = Model::init(&EncoderSpec::new(Method::Sae)).unwrap();
        let spec = TaskSpec::default();
        for p in [[0.0, 0.0], [0.5, 0.5], [1.0, 0.3]] {
            let z = model.encode(&render_position(p, &spec)).unwrap();
            assert_eq!(z.values.len(), 16);
            assert!(z.values.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(z.sigma.is_none());
        }
    }

    #[test]
    fn encode_is_deterministic_and_batch_consistent() {
        let spec = TaskSpec::default();
        let a = render_position([0.2, 0.3], &spec);
        let b = render_position([0.7, 0.9], &spec);
        for m in Method::ALL {
            let model = Model::init(&EncoderSpec { latent_dim: 10, ..EncoderSpec::new(m) }).unwrap();
            let z1 = model.encode(&a).unwrap();
            assert_eq!(z1, model.encode(&a).unwrap());
            let batch = model.encode_batch(&[&b, &a]).unwrap();
            assert_eq!(batch[1], z1, "{m}");
            assert_eq!(z1.sigma.is_some(), m.is_variational());
            if let Some(s) = &z1.sigma {
                assert!(s.iter().all(|v| *v > 0.0));
            }
        }
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let model = Model::init(&EncoderSpec::new(Method::Ae)).unwrap();
        let img = Image { width: 16, height: 16, data: vec![0.0; 256] };
        assert!(model.encode(&img).is_err());
    }

    #[test]
    fn oracle_is_scaled_position() {
        let img = Image { width: 1, height: 1, data: vec![0.0] };
        let z = OracleRepresentation { scale: 2.0 }.encode_frame(&img, [0.25, 0.5]).unwrap();
        assert_eq!(z.values, vec![0.5, 1.0]);
    }
}
