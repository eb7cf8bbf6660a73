//! Dual-encoder fusion model.
//!
//! Each modality has its own encoder `f` and two-layer projection head `g`
//! (`d -> d -> k`, ReLU, then L2 normalization). Features are fused by
//! concatenation `[h_s1, h_s2]` and fed to a single linear multi-label head.
//! All parameters live in one [`ParamSet`] so optimizers and checkpoints see
//! the model as a flat list of named tensors.

mod checkpoint;
mod encoder;
pub mod layers;
mod params;

pub use checkpoint::{config_hash, restore, restore_from_bytes, snapshot, snapshot_to_bytes, CHECKPOINT_MAGIC};
pub use encoder::{Backbone, BackboneCache, EncoderKind, Resnet34, SmallConv};
pub use params::{ParamId, ParamSet, Real};

use std::fmt;

use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use layers::{l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward, Linear};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    S1,
    S2,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::S1, Modality::S2];
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::S1 => "s1",
            Modality::S2 => "s2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub in_channels: usize,
    pub out_dim: usize,
}

impl EncoderSpec {
    pub fn new(kind: EncoderKind, in_channels: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_dim: kind.default_out_dim(),
        }
    }
}

/// Architecture of the full model. Its canonical JSON form is hashed into
/// every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub s1: EncoderSpec,
    pub s2: EncoderSpec,
    pub projection_dim_s1: usize,
    pub projection_dim_s2: usize,
    pub num_labels: usize,
}

pub const DEFAULT_PROJECTION_DIM: usize = 128;

impl ModelConfig {
    pub fn new(kind: EncoderKind, s1_channels: usize, s2_channels: usize, num_labels: usize) -> Self {
        Self {
            s1: EncoderSpec::new(kind, s1_channels),
            s2: EncoderSpec::new(kind, s2_channels),
            projection_dim_s1: DEFAULT_PROJECTION_DIM,
            projection_dim_s2: DEFAULT_PROJECTION_DIM,
            num_labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (m, spec) in [(Modality::S1, &self.s1), (Modality::S2, &self.s2)] {
            if spec.out_dim == 0 || spec.in_channels == 0 {
                return Err(ModelError::Configuration(format!(
                    "{m} encoder needs positive in_channels and out_dim"
                )));
            }
            if spec.kind == EncoderKind::SmallConv && spec.out_dim < 4 {
                return Err(ModelError::Configuration(format!(
                    "{m} small_conv out_dim must be at least 4"
                )));
            }
        }
        if self.projection_dim_s1 == 0 || self.projection_dim_s2 == 0 {
            return Err(ModelError::Configuration("projection dims must be positive".into()));
        }
        if self.num_labels == 0 {
            return Err(ModelError::Configuration("num_labels must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder(&self, m: Modality) -> &EncoderSpec {
        match m {
            Modality::S1 => &self.s1,
            Modality::S2 => &self.s2,
        }
    }

    pub fn projection_dim(&self, m: Modality) -> usize {
        match m {
            Modality::S1 => self.projection_dim_s1,
            Modality::S2 => self.projection_dim_s2,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.s1.out_dim + self.s2.out_dim
    }
}

struct ProjectionHead {
    hidden: Linear,
    out: Linear,
}

/// Forward state of a projection head call.
pub struct ProjectionCache<T> {
    input: Array2<T>,
    hidden: Array2<T>,
    z: Array2<T>,
    norms: Array1<T>,
}

impl<T> ProjectionCache<T> {
    pub fn z(&self) -> &Array2<T> {
        &self.z
    }
}

/// Forward state of an encoder call.
pub struct EncodeCache {
    modality: Modality,
    inner: BackboneCache,
}

/// Two modality encoders, two projection heads and the fused linear head.
pub struct DualEncoderModel<T: Real> {
    config: ModelConfig,
    params: ParamSet<T>,
    encoders: [Box<dyn Backbone<T>>; 2],
    heads: [ProjectionHead; 2],
    classifier: Linear,
}

fn slot(m: Modality) -> usize {
    match m {
        Modality::S1 => 0,
        Modality::S2 => 1,
    }
}

/// Name prefix of the classifier parameters.
pub const CLASSIFIER_PREFIX: &str = "classifier.";

impl<T: Real> DualEncoderModel<T> {
    /// Builds a freshly initialized model; initialization is a pure function
    /// of `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let e1 = encoder::build_backbone(config.s1.kind, &mut params, "encoder_s1", config.s1.in_channels, config.s1.out_dim, &mut rng);
        let e2 = encoder::build_backbone(config.s2.kind, &mut params, "encoder_s2", config.s2.in_channels, config.s2.out_dim, &mut rng);
        let mut head = |m: Modality, d: usize, k: usize| ProjectionHead {
            hidden: Linear::new(&mut params, &format!("proj_{m}.hidden"), d, d, &mut rng),
            out: Linear::new(&mut params, &format!("proj_{m}.out"), d, k, &mut rng),
        };
        let h1 = head(Modality::S1, config.s1.out_dim, config.projection_dim_s1);
        let h2 = head(Modality::S2, config.s2.out_dim, config.projection_dim_s2);
        let classifier = Linear::new(&mut params, "classifier", config.fused_dim(), config.num_labels, &mut rng);
        Ok(Self {
            config,
            params,
            encoders: [e1, e2],
            heads: [h1, h2],
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn zero_grads(&self) -> ParamSet<T> {
        self.params.zeros_like()
    }

    fn check_input(&self, m: Modality, x: &Array4<T>) -> Result<()> {
        let spec = self.config.encoder(m);
        let (_, c, h, w) = x.dim();
        if c != spec.in_channels {
            return Err(ModelError::Configuration(format!(
                "{m} encoder expects {} channels, got {c}",
                spec.in_channels
            )));
        }
        let min = self.encoders[slot(m)].min_input_size();
        if h < min || w < min {
            return Err(ModelError::Configuration(format!(
                "{m} patches must be at least {min}x{min}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Features `h` for a batch of patches (`N x C x H x W -> N x d`).
    pub fn encode(&self, m: Modality, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.encode_train(m, x)?.0)
    }

    pub fn encode_train(&self, m: Modality, x: &Array4<T>) -> Result<(Array2<T>, EncodeCache)> {
        self.check_input(m, x)?;
        let (h, inner) = self.encoders[slot(m)].forward(&self.params, x);
        Ok((h, EncodeCache { modality: m, inner }))
    }

    pub fn encode_backward(&self, cache: &EncodeCache, dh: ArrayView2<T>, grads: &mut ParamSet<T>) {
        self.encoders[slot(cache.modality)].backward(&self.params, &cache.inner, dh, grads);
    }

    /// Unit-norm latent vectors `z` for features `h`.
    pub fn project(&self, m: Modality, h: &Array2<T>) -> Result<Array2<T>> {
        Ok(self.project_train(m, h)?.z)
    }

    pub fn project_train(&self, m: Modality, h: &Array2<T>) -> Result<ProjectionCache<T>> {
        let head = &self.heads[slot(m)];
        if h.ncols() != head.hidden.in_dim() {
            return Err(ModelError::Configuration(format!(
                "{m} projection expects width {}, got {}",
                head.hidden.in_dim(),
                h.ncols()
            )));
        }
        let hidden = relu(head.hidden.forward(&self.params, h.view()));
        let raw = head.out.forward(&self.params, hidden.view());
        let (z, norms) = l2_normalize_rows(&raw);
        Ok(ProjectionCache {
            input: h.clone(),
            hidden,
            z,
            norms,
        })
    }

    /// Back-propagates `dL/dz` through the head; returns `dL/dh`.
    pub fn project_backward(
        &self,
        m: Modality,
        cache: &ProjectionCache<T>,
        dz: ArrayView2<T>,
        grads: &mut ParamSet<T>,
    ) -> Array2<T> {
        let head = &self.heads[slot(m)];
        let draw = l2_normalize_rows_backward(&cache.z, &cache.norms, dz);
        let dhidden = head.out.backward(&self.params, cache.hidden.view(), draw.view(), grads);
        let dhidden = relu_backward(&cache.hidden, dhidden);
        head.hidden.backward(&self.params, cache.input.view(), dhidden.view(), grads)
    }

    /// Pre-sigmoid classifier outputs for fused features.
    pub fn logits(&self, fused: &Array2<T>) -> Result<Array2<T>> {
        if fused.ncols() != self.classifier.in_dim() {
            return Err(ModelError::Configuration(format!(
                "classifier expects width {}, got {}",
                self.classifier.in_dim(),
                fused.ncols()
            )));
        }
        Ok(self.classifier.forward(&self.params, fused.view()))
    }

    /// Per-label probabilities in (0, 1).
    pub fn classify(&self, fused: &Array2<T>) -> Result<Array2<T>> {
        Ok(self.logits(fused)?.mapv(sigmoid))
    }

    pub fn classifier_backward(&self, fused: &Array2<T>, dlogits: ArrayView2<T>, grads: &mut ParamSet<T>) -> Array2<T> {
        self.classifier.backward(&self.params, fused.view(), dlogits, grads)
    }

    /// Encodes both modalities and fuses the features.
    pub fn fused_features(&self, s1: &Array4<T>, s2: &Array4<T>) -> Result<Array2<T>> {
        let h1 = self.encode(Modality::S1, s1)?;
        let h2 = self.encode(Modality::S2, s2)?;
        fuse(&h1, &h2)
    }

    pub(crate) fn replace_params(&mut self, params: ParamSet<T>) {
        self.params = params;
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Concatenates `[h_s1, h_s2]` row-wise, S1 first.
pub fn fuse<T: Real>(h_s1: &Array2<T>, h_s2: &Array2<T>) -> Result<Array2<T>> {
    if h_s1.nrows() != h_s2.nrows() {
        return Err(ModelError::Configuration(format!(
            "cannot fuse {} S1 rows with {} S2 rows",
            h_s1.nrows(),
            h_s2.nrows()
        )));
    }
    Ok(concatenate(Axis(1), &[h_s1.view(), h_s2.view()]).expect("row counts checked"))
}

/// Splits a gradient w.r.t. fused features back into the two modalities.
pub fn split_fused<T: Real>(d: &Array2<T>, d_s1: usize) -> (Array2<T>, Array2<T>) {
    (d.slice(s![.., ..d_s1]).to_owned(), d.slice(s![.., d_s1..]).to_owned())
}
