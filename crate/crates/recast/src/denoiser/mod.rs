//! Trainable noise-prediction networks eps(x_t, t) with sinusoidal time
//! conditioning, shared across all timesteps. Two desk-scale variants: an
//! MLP for vector data and a small two-level convolutional encoder-decoder
//! for images.

mod mlp;
pub mod stubs;
mod unet;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{adam_step, AdamState, Gradients, Graph, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Mlp,
    Unet,
}

/// Architecture description. `hidden` is MLP widths or U-Net channels per
/// resolution level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub data_shape: Vec<usize>,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    #[serde(default)]
    pub use_attention: bool,
    #[serde(default = "default_groups")]
    pub groups: usize,
}

fn default_groups() -> usize {
    4
}

impl DenoiserConfig {
    pub fn mlp(data_dim: usize, hidden: Vec<usize>, time_embed_dim: usize) -> Self {
        DenoiserConfig {
            kind: DenoiserKind::Mlp,
            data_shape: vec![data_dim],
            hidden,
            time_embed_dim,
            use_attention: false,
            groups: 4,
        }
    }

    pub fn unet(data_shape: Vec<usize>, channels: Vec<usize>, time_embed_dim: usize) -> Self {
        DenoiserConfig {
            kind: DenoiserKind::Unet,
            data_shape,
            hidden: channels,
            time_embed_dim,
            use_attention: false,
            groups: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "time_embed_dim must be a positive even number, got {}",
                self.time_embed_dim
            )));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if self.use_attention {
            return Err(Error::InvalidConfig(
                "attention blocks are not available in this build".into(),
            ));
        }
        match self.kind {
            DenoiserKind::Mlp => {
                if self.data_shape.len() != 1 || self.data_shape[0] == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "mlp denoiser wants a rank-1 data shape, got {:?}",
                        self.data_shape
                    )));
                }
            }
            DenoiserKind::Unet => {
                if self.data_shape.len() != 3 {
                    return Err(Error::InvalidConfig(format!(
                        "unet denoiser wants [C,H,W], got {:?}",
                        self.data_shape
                    )));
                }
                let levels = self.hidden.len();
                let div = 1usize << levels;
                if self.data_shape[1] % div != 0 || self.data_shape[2] % div != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "spatial dims {:?} must be divisible by 2^{}",
                        &self.data_shape[1..],
                        levels
                    )));
                }
                for &c in &self.hidden {
                    if c % self.groups != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "channel count {} not divisible by {} norm groups",
                            c, self.groups
                        )));
                    }
                }
                unet::validate_extra(self)?;
            }
        }
        Ok(())
    }
}

/// Sinusoidal position embedding of a timestep: interleaved
/// (sin(t w_k), cos(t w_k)) pairs with w_k = 10000^(-2k/dim).
pub fn time_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "time embedding dim must be even, got {}",
            dim
        )));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let arg = t as f64 * omega;
        data.push(arg.sin());
        data.push(arg.cos());
    }
    Tensor::new(vec![dim], data)
}

/// Named parameter tensors plus optimizer state.
#[derive(Clone)]
pub struct ParamStore {
    config: DenoiserConfig,
    seed: u64,
    tensors: BTreeMap<String, Tensor>,
    adam: AdamState,
}

/// (name, shape, init) triples in deterministic construction order.
pub(crate) enum Init {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    FanIn(usize),
    Zero,
    One,
}

impl ParamStore {
    /// Deterministic initialization from a seed. Values are drawn at f32
    /// precision so a fresh store survives the 32-bit checkpoint format
    /// bit-exactly.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = match config.kind {
            DenoiserKind::Mlp => mlp::param_spec(&config),
            DenoiserKind::Unet => unet::param_spec(&config),
        };
        let mut rng = Rng::seed_from(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in spec {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| {
                            let v = (rng.uniform() * 2.0 - 1.0) * bound;
                            (v as f32) as f64
                        })
                        .collect()
                }
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ParamStore {
            config,
            seed,
            tensors,
            adam: AdamState::new(),
        })
    }

    pub(crate) fn from_parts(
        config: DenoiserConfig,
        seed: u64,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(ParamStore {
            config,
            seed,
            tensors,
            adam: AdamState::new(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Replace one tensor, keeping its shape contract.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.tensors.get(name) {
            None => Err(Error::UnknownName(name.into())),
            Some(old) if old.shape() != value.shape() => Err(Error::ShapeMismatch {
                op: "set_tensor",
                detail: format!("{}: {:?} vs {:?}", name, old.shape(), value.shape()),
            }),
            Some(_) => {
                self.tensors.insert(name.into(), value.detached());
                Ok(())
            }
        }
    }

    /// Read view for inference.
    pub fn view(&self) -> ModelView {
        ModelView {
            config: self.config.clone(),
            tensors: self.tensors.clone(),
        }
    }

    /// View with every parameter attached as a leaf of `g`, so forward
    /// passes record and gradients can be collected per name.
    pub fn watch(&self, g: &Graph) -> ModelView {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v)))
            .collect();
        ModelView {
            config: self.config.clone(),
            tensors,
        }
    }

    /// Bias-corrected Adam update in place.
    pub fn apply_adam(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        adam_step(&mut self.tensors, &mut self.adam, grads, lr)
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam.step_count()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
    }

    /// Content hash over config and full-precision parameter payloads.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// A callable snapshot of denoiser parameters, possibly graph-attached.
pub struct ModelView {
    config: DenoiserConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelView {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub(crate) fn p(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownName(name.into()))
    }

    /// Gradients by parameter name after a backward pass; parameters the
    /// loss never touched come back as zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), grads.get(v)))
            .collect()
    }
}

/// Anything that predicts noise for a state at a timestep. Samplers are
/// generic over this so tests can swap in fixed-output models.
pub trait NoiseModel {
    fn data_shape(&self) -> &[usize];

    fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor>;

    /// Clean-signal prediction: (x_t - sqrt(1 - a_bar_t) eps) / sqrt(a_bar_t).
    fn predict_x0(&self, x: &Tensor, t: usize, schedule: &Schedule) -> Result<Tensor> {
        let eps = self.predict_noise(x, t)?;
        predict_x0_from(x, &eps, t, schedule)
    }
}

/// The clean-signal formula shared by every model and the samplers.
pub fn predict_x0_from(x: &Tensor, eps: &Tensor, t: usize, schedule: &Schedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    x.sub(&eps.mul_scalar((1.0 - ab).sqrt())?)?
        .mul_scalar(1.0 / ab.sqrt())
}

impl NoiseModel for ModelView {
    fn data_shape(&self) -> &[usize] {
        &self.config.data_shape
    }

    fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        if x.shape() != self.config.data_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "predict_noise",
                detail: format!(
                    "input {:?} vs data shape {:?}",
                    x.shape(),
                    self.config.data_shape
                ),
            });
        }
        if t == 0 {
            return Err(Error::IndexOutOfRange {
                what: "predict_noise timestep",
                index: 0,
                max: usize::MAX,
            });
        }
        match self.config.kind {
            DenoiserKind::Mlp => mlp::forward(self, x, t),
            DenoiserKind::Unet => unet::forward(self, x, t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::stubs::ConstantModel;

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(0, 6).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn time_embedding_pairs_unit_norm() {
        for &t in &[1usize, 17, 500, 999] {
            let e = time_embedding(t, 8).unwrap();
            for pair in e.data().chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_embedding_t1_dim4() {
        let e = time_embedding(1, 4).unwrap();
        let w1 = 10000f64.powf(-0.5);
        assert_eq!(e.data()[0], 1f64.sin());
        assert_eq!(e.data()[1], 1f64.cos());
        assert!((e.data()[2] - w1.sin()).abs() < 1e-15);
        assert!((e.data()[3] - w1.cos()).abs() < 1e-15);
    }

    #[test]
    fn time_embedding_odd_dim_rejected() {
        assert!(time_embedding(3, 5).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = DenoiserConfig::mlp(2, vec![8, 8], 8);
        let a = ParamStore::init(cfg.clone(), 42).unwrap();
        let b = ParamStore::init(cfg, 42).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn mlp_param_count_matches_hand_count() {
        let embed = 8;
        let cfg = DenoiserConfig::mlp(2, vec![8, 8], embed);
        let store = ParamStore::init(cfg, 0).unwrap();
        // layers: 2*8+8, 8*8+8, out 8*2+2, plus a time projection per block
        let base = (2 * 8 + 8) + (8 * 8 + 8) + (8 * 2 + 2);
        let time = 2 * (embed * 8 + 8);
        assert_eq!(store.param_count(), base + time);
    }

    #[test]
    fn unet_shapes_match_formula() {
        let cfg = DenoiserConfig::unet(vec![1, 32, 32], vec![8, 16], 16);
        let store = ParamStore::init(cfg, 1).unwrap();
        let t = store.tensors();
        assert_eq!(t["conv_in.weight"].shape(), &[8, 1, 3, 3]);
        assert_eq!(t["enc0.conv1.weight"].shape(), &[8, 8, 3, 3]);
        assert_eq!(t["enc1.conv1.weight"].shape(), &[16, 8, 3, 3]);
        assert_eq!(t["mid.conv1.weight"].shape(), &[16, 16, 3, 3]);
        // decoder consumes upsampled c1 concatenated with the c0 skip
        assert_eq!(t["dec1.conv1.weight"].shape(), &[8, 24, 3, 3]);
        assert_eq!(t["dec1.skip.weight"].shape(), &[8, 24, 1, 1]);
        assert_eq!(t["conv_out.weight"].shape(), &[1, 8, 3, 3]);
    }

    #[test]
    fn predict_noise_shape_and_determinism() {
        let cfg = DenoiserConfig::mlp(3, vec![16], 8);
        let store = ParamStore::init(cfg, 7).unwrap();
        let view = store.view();
        let x = Tensor::from_vec(vec![0.5, -0.2, 1.0]);
        let a = view.predict_noise(&x, 10).unwrap();
        let b = view.predict_noise(&x, 10).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn zeroed_final_layer_outputs_zero() {
        let cfg = DenoiserConfig::mlp(2, vec![8], 8);
        let mut store = ParamStore::init(cfg, 3).unwrap();
        store
            .set_tensor("out.weight", Tensor::zeros(&[8, 2]))
            .unwrap();
        store.set_tensor("out.bias", Tensor::zeros(&[2])).unwrap();
        let out = store
            .view()
            .predict_noise(&Tensor::from_vec(vec![1.0, -2.0]), 5)
            .unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn predict_x0_with_zero_noise_rescales() {
        let sched = Schedule::linear(10, 0.1, 0.1).unwrap();
        let model = ConstantModel::zeros(vec![2]);
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let f = model.predict_x0(&x, 4, &sched).unwrap();
        let scale = 1.0 / sched.alpha_bar(4).unwrap().sqrt();
        assert_eq!(f.data(), &[scale, 2.0 * scale]);
    }

    #[test]
    fn eq6_recovers_x0_when_model_echoes_noise() {
        let sched = Schedule::linear(100, 1e-3, 0.05).unwrap();
        let mut rng = Rng::seed_from(11);
        for &t in &[1usize, 13, 57, 100] {
            let x0 = rng.normal_tensor(&[4]);
            let w = rng.normal_tensor(&[4]);
            let ab = sched.alpha_bar(t).unwrap();
            let xt = x0
                .mul_scalar(ab.sqrt())
                .unwrap()
                .add(&w.mul_scalar((1.0 - ab).sqrt()).unwrap())
                .unwrap();
            let model = ConstantModel::new(w.clone());
            let f = model.predict_x0(&xt, t, &sched).unwrap();
            for (a, b) in f.data().iter().zip(x0.data()) {
                assert!((a - b).abs() / b.abs().max(1.0) < 1e-10);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(DenoiserConfig::mlp(2, vec![8], 7).validate().is_err());
        assert!(DenoiserConfig::mlp(0, vec![8], 8).validate().is_err());
        assert!(DenoiserConfig::unet(vec![1, 30, 32], vec![8, 16], 8)
            .validate()
            .is_err());
        let mut attn = DenoiserConfig::unet(vec![1, 32, 32], vec![8, 16], 8);
        attn.use_attention = true;
        assert!(attn.validate().is_err());
    }

    #[test]
    fn unet_forward_shape() {
        let cfg = DenoiserConfig::unet(vec![1, 8, 8], vec![4, 8], 8);
        let store = ParamStore::init(cfg, 5).unwrap();
        let mut rng = Rng::seed_from(2);
        let x = rng.normal_tensor(&[1, 8, 8]);
        let out = store.view().predict_noise(&x, 3).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8]);
    }
}
