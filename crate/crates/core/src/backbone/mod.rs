//! The image-to-image denoiser shared by Stage I (Φ) and Stage III (F):
//! specification, trained handle, evaluation, training steps and
//! checkpoint persistence.

mod checkpoint;
pub mod net;
pub mod ops;

use ndarray::{Array3, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use checkpoint::{CHECKPOINT_MAGIC, load, load_expecting, save};
pub use net::{Params, Unet};
pub use ops::{Act, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    /// ᾱ_t supplied as a continuous scalar, embedded sinusoidally and added
    /// at every resolution level.
    NoiseLevelScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of resolution levels.
    pub depth: usize,
    /// Channels at the first level; doubled at each level below.
    pub base_width: usize,
    pub conditioning: Conditioning,
}

impl DenoiserSpec {
    pub fn new(in_channels: usize, conditioning: Conditioning) -> Self {
        Self {
            in_channels,
            out_channels: 1,
            depth: 3,
            base_width: 32,
            conditioning,
        }
    }

    pub fn with_size(mut self, depth: usize, base_width: usize) -> Self {
        self.depth = depth;
        self.base_width = base_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels != 1 || self.depth == 0 || self.base_width == 0 {
            return Err(Error::InvalidParams(format!("invalid denoiser spec {self:?}")));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Network size at which the end-to-end tests run on a single CPU core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSize {
    pub depth: usize,
    pub base_width: usize,
}

impl Default for NetworkSize {
    fn default() -> Self {
        Self {
            depth: 3,
            base_width: 32,
        }
    }
}

/// A denoiser with its weights. Evaluation is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserHandle {
    pub spec: DenoiserSpec,
    pub params: Params<f32>,
    pub train_steps: usize,
    pub seed: u64,
    pub fingerprint: String,
    net: std::sync::Arc<UnetHolder>,
}

#[derive(Debug)]
struct UnetHolder(Unet);

impl PartialEq for UnetHolder {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl DenoiserHandle {
    /// Freshly initialised weights.
    pub fn new(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = Unet::init_params(&spec, seed);
        Ok(Self::from_parts(spec, params, 0, seed))
    }

    pub(crate) fn from_parts(spec: DenoiserSpec, params: Params<f32>, train_steps: usize, seed: u64) -> Self {
        let fingerprint = params_fingerprint(&spec, &params);
        Self {
            net: std::sync::Arc::new(UnetHolder(Unet::new(&spec).0)),
            spec,
            params,
            train_steps,
            seed,
            fingerprint,
        }
    }

    pub fn net(&self) -> &Unet {
        &self.net.0
    }

    pub fn refresh_fingerprint(&mut self) {
        self.fingerprint = params_fingerprint(&self.spec, &self.params);
    }

    fn check_levels(&self, levels: Option<&[f64]>, batch: usize) -> Result<()> {
        match (self.spec.conditioning, levels) {
            (Conditioning::None, Some(_)) => Err(Error::UnexpectedCondition),
            (Conditioning::NoiseLevelScalar, None) => Err(Error::MissingCondition),
            (Conditioning::NoiseLevelScalar, Some(lv)) => {
                if lv.len() != batch {
                    return Err(Error::shape(format!("{batch} noise levels"), lv.len()));
                }
                match lv.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                    Some(bad) => Err(Error::InvalidParams(format!(
                        "noise level must lie in (0, 1], got {bad}"
                    ))),
                    None => Ok(()),
                }
            }
            (Conditioning::None, None) => Ok(()),
        }
    }

    pub(crate) fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.spec.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.spec.in_channels),
                format!("{c} channels"),
            ));
        }
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                format!("spatial size divisible by {m}"),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    /// Denoises one stack of `(c, h, w)` input slices.
    pub fn apply(&self, inputs: ArrayView3<f32>, noise_level: Option<f64>) -> Result<ndarray::Array2<f32>> {
        let batch = inputs.insert_axis(Axis(0));
        let levels = noise_level.map(|v| vec![v]);
        let out = self.apply_batch(batch, levels.as_deref())?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Batched evaluation of `(b, c, h, w)` inputs into `(b, h, w)` outputs.
    pub fn apply_batch(&self, inputs: ArrayView4<f32>, noise_levels: Option<&[f64]>) -> Result<Array3<f32>> {
        let (b, c, h, w) = inputs.dim();
        self.check_input(c, h, w)?;
        self.check_levels(noise_levels, b)?;
        let x = to_act(inputs);
        let lv: Option<Vec<f32>> = noise_levels.map(|l| l.iter().map(|&v| v as f32).collect());
        let (y, _) = self.net().forward(&self.params, x, lv.as_deref(), false);
        let out = Array3::from_shape_vec((b, h, w), y.data).expect("single output channel");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: 0 });
        }
        Ok(out)
    }
}

/// `(b, c, h, w)` array to channel-major activation.
pub fn to_act<R: Real>(inputs: ArrayView4<f32>) -> Act<R> {
    let (b, c, h, w) = inputs.dim();
    let data = inputs
        .permuted_axes([1, 0, 2, 3])
        .iter()
        .map(|&v| R::from_f64_lossy(v as f64))
        .collect();
    Act { c, b, h, w, data }
}

pub fn params_fingerprint(spec: &DenoiserSpec, params: &Params<f32>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    for p in &params.entries {
        h.update(p.name.as_bytes());
        for v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &Params<f32>, lr: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.entries.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let eps_hat = eps * (bc2.sqrt() as f32);
        for (i, (p, g)) in params.entries.iter_mut().zip(&grads.entries).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p.data[j] -= step_size * m[j] / (v[j].sqrt() + eps_hat);
            }
        }
    }
}

/// Mutable training state around a handle.
pub struct Trainer {
    pub handle: DenoiserHandle,
    opt: Adam,
}

impl Trainer {
    pub fn new(handle: DenoiserHandle, lr: f64) -> Self {
        let opt = Adam::new(&handle.params, lr);
        Self { handle, opt }
    }

    /// One optimisation step on `(b, c, h, w)` inputs and `(b, h, w)`
    /// targets. Returns the pre-update loss.
    pub fn step(
        &mut self,
        inputs: ArrayView4<f32>,
        noise_levels: Option<&[f64]>,
        targets: ndarray::ArrayView3<f32>,
    ) -> Result<f64> {
        let (b, c, h, w) = inputs.dim();
        self.handle.check_input(c, h, w)?;
        self.handle.check_levels(noise_levels, b)?;
        if targets.dim() != (b, h, w) {
            return Err(Error::shape(format!("({b}, {h}, {w})"), format!("{:?}", targets.dim())));
        }
        let x = to_act::<f32>(inputs);
        let lv: Option<Vec<f32>> = noise_levels.map(|l| l.iter().map(|&v| v as f32).collect());
        let target: Vec<f32> = targets.iter().copied().collect();
        let (loss, grads) = net::loss_and_grad(self.handle.net(), &self.handle.params, x, lv.as_deref(), &target);
        if !loss.is_finite() {
            return Err(Error::DivergedLoss {
                step: self.handle.train_steps,
            });
        }
        self.opt.update(&mut self.handle.params, &grads);
        self.handle.train_steps += 1;
        Ok(loss)
    }

    pub fn finish(mut self) -> DenoiserHandle {
        self.handle.refresh_fingerprint();
        self.handle
    }
}
