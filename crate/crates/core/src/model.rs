//! Encoder, linear classifier, projection head, and their EMA mirror.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ClafError, Result};
use crate::nn::{leaky_relu, leaky_relu_backward, Backbone, BackboneCache, BackboneKind, Linear, Param, Parameters};
use crate::rng::{self, names};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub projection_dim: usize,
    /// Hidden width of the projection MLP; 0 means "same as the feature dim".
    pub projection_hidden: usize,
    pub projection_bias: bool,
    pub projection_activation: bool,
    /// EMA momentum ρ in `θ′ ← ρθ′ + (1−ρ)θ`.
    pub ema_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::SmallCnn,
            projection_dim: 64,
            projection_hidden: 0,
            projection_bias: true,
            projection_activation: true,
            ema_momentum: 0.999,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(ClafError::Config(format!(
                "model.ema_momentum must lie in [0, 1], got {}",
                self.ema_momentum
            )));
        }
        if self.projection_dim == 0 {
            return Err(ClafError::Config("model.projection_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Labeled,
    Weak,
    Strong,
}

/// Encoder outputs for one view of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub z: Array2<f32>,
    pub view: ViewTag,
}

/// Unit-norm embeddings plus the number of rows that were zero before
/// normalisation (those rows are replaced by the first basis vector).
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub embeddings: Array2<f32>,
    pub degenerate: usize,
}

/// Two-layer MLP followed by L2 normalisation.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    activation: bool,
}

#[derive(Debug)]
pub struct ProjectionCache {
    input: Array2<f32>,
    hidden: Array2<f32>,
    norms: Vec<f32>,
    embeddings: Array2<f32>,
}

const NORM_FLOOR: f32 = 1e-12;

fn normalize_rows(u: &Array2<f32>) -> (Array2<f32>, Vec<f32>, usize) {
    let mut e = u.clone();
    let mut norms = Vec::with_capacity(u.nrows());
    let mut degenerate = 0;
    for mut row in e.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n < NORM_FLOOR || !n.is_finite() {
            row.fill(0.0);
            row[0] = 1.0;
            degenerate += 1;
            norms.push(0.0);
        } else {
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
    }
    (e, norms, degenerate)
}

impl ProjectionHead {
    pub fn new<R: rand::Rng + ?Sized>(
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        bias: bool,
        activation: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), input, hidden, bias, rng),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden, output, bias, rng),
            activation,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.output_dim()
    }

    fn hidden(&self, z: &Array2<f32>) -> Array2<f32> {
        let h = self.fc1.forward(z);
        if self.activation {
            leaky_relu(&h, 0.0)
        } else {
            h
        }
    }

    pub fn forward(&self, z: &Array2<f32>) -> Projection {
        let u = self.fc2.forward(&self.hidden(z));
        let (embeddings, _, degenerate) = normalize_rows(&u);
        Projection { embeddings, degenerate }
    }

    pub fn forward_train(&self, z: &Array2<f32>) -> (Projection, ProjectionCache) {
        let hidden = self.hidden(z);
        let u = self.fc2.forward(&hidden);
        let (embeddings, norms, degenerate) = normalize_rows(&u);
        (
            Projection {
                embeddings: embeddings.clone(),
                degenerate,
            },
            ProjectionCache {
                input: z.clone(),
                hidden,
                norms,
                embeddings,
            },
        )
    }

    pub fn backward(&mut self, cache: ProjectionCache, grad: &Array2<f32>) -> Array2<f32> {
        // d(u/|u|)/du = (I - e eᵀ) / |u|
        let mut gu = grad.clone();
        for ((mut g, e), &n) in gu.rows_mut().into_iter().zip(cache.embeddings.rows()).zip(&cache.norms) {
            if n == 0.0 {
                g.fill(0.0);
                continue;
            }
            let dot: f32 = g.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
            g.iter_mut().zip(e.iter()).for_each(|(gv, ev)| *gv = (*gv - dot * ev) / n);
        }
        let mut gh = self.fc2.backward(&cache.hidden, &gu);
        if self.activation {
            gh = leaky_relu_backward(&cache.hidden, &gh, 0.0);
        }
        self.fc1.backward(&cache.input, &gh)
    }
}

impl Parameters for ProjectionHead {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.fc1.params();
        out.extend(self.fc2.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.fc1.params_mut();
        out.extend(self.fc2.params_mut());
        out
    }
}

/// Momentum copy of encoder, classifier and projection head. The f64 shadow
/// is the authoritative θ′; the f32 networks are refreshed from it after
/// every update so that small `(1−ρ)θ` increments are not lost to rounding.
#[derive(Clone, Debug)]
pub struct EmaMirror {
    pub encoder: Backbone,
    pub classifier: Linear,
    pub projector: ProjectionHead,
    shadow: Vec<Vec<f64>>,
}

impl EmaMirror {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        out.extend(self.classifier.params());
        out.extend(self.projector.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.classifier.params_mut());
        out.extend(self.projector.params_mut());
        out
    }

    pub fn shadow(&self) -> &[Vec<f64>] {
        &self.shadow
    }

    pub fn set_shadow(&mut self, shadow: Vec<Vec<f64>>) -> Result<()> {
        let shapes_match = shadow.len() == self.shadow.len()
            && shadow.iter().zip(&self.shadow).all(|(a, b)| a.len() == b.len());
        if !shapes_match {
            return Err(ClafError::Checkpoint("EMA shadow layout mismatch".into()));
        }
        self.shadow = shadow;
        self.sync_from_shadow();
        Ok(())
    }

    fn sync_from_shadow(&mut self) {
        let shadow = std::mem::take(&mut self.shadow);
        for (p, s) in self.params_mut().into_iter().zip(&shadow) {
            p.value.iter_mut().zip(s).for_each(|(v, sv)| *v = *sv as f32);
        }
        self.shadow = shadow;
    }
}

/// Online parameters θ (encoder), φ (classifier), ψ (projection head) and
/// the EMA mirror θ′, φ′, ψ′.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub encoder: Backbone,
    pub classifier: Linear,
    pub projector: ProjectionHead,
    pub ema: EmaMirror,
}

impl ModelState {
    pub fn new(config: ModelConfig, num_classes: usize, input_shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = Backbone::new(
            config.backbone,
            "encoder",
            input_shape.2,
            &mut rng::stream(seed, names::INIT_ENCODER),
        );
        let d = encoder.feature_dim();
        let classifier = Linear::new("classifier", d, num_classes, true, &mut rng::stream(seed, names::INIT_CLASSIFIER));
        let hidden = if config.projection_hidden == 0 {
            d
        } else {
            config.projection_hidden
        };
        let projector = ProjectionHead::new(
            "projector",
            d,
            hidden,
            config.projection_dim,
            config.projection_bias,
            config.projection_activation,
            &mut rng::stream(seed, names::INIT_PROJECTOR),
        );
        Ok(Self::from_parts(config, num_classes, input_shape, encoder, classifier, projector))
    }

    /// Builds a state around explicit networks; the EMA mirror starts as an
    /// exact copy.
    pub fn from_parts(
        config: ModelConfig,
        num_classes: usize,
        input_shape: (usize, usize, usize),
        encoder: Backbone,
        classifier: Linear,
        projector: ProjectionHead,
    ) -> Self {
        let mut ema = EmaMirror {
            encoder: encoder.clone(),
            classifier: classifier.clone(),
            projector: projector.clone(),
            shadow: Vec::new(),
        };
        ema.shadow = ema
            .params()
            .iter()
            .map(|p| p.value.iter().map(|v| *v as f64).collect())
            .collect();
        Self {
            config,
            num_classes,
            input_shape,
            encoder,
            classifier,
            projector,
            ema,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.projector.output_dim()
    }

    pub fn check_images(&self, images: &Array4<f32>) -> Result<()> {
        let (_, h, w, c) = images.dim();
        if (h, w, c) != self.input_shape {
            return Err(ClafError::ShapeMismatch {
                expected: format!("[N, {}, {}, {}]", self.input_shape.0, self.input_shape.1, self.input_shape.2),
                actual: format!("{:?}", images.shape()),
            });
        }
        Ok(())
    }

    fn check_features(&self, z: &Array2<f32>) -> Result<()> {
        if z.ncols() != self.feature_dim() {
            return Err(ClafError::ShapeMismatch {
                expected: format!("[N, {}]", self.feature_dim()),
                actual: format!("{:?}", z.shape()),
            });
        }
        Ok(())
    }

    /// Inference-mode encoder features; `use_ema` selects θ′.
    pub fn encode(&self, images: &Array4<f32>, use_ema: bool, view: ViewTag) -> Result<FeatureBatch> {
        self.check_images(images)?;
        let enc = if use_ema { &self.ema.encoder } else { &self.encoder };
        Ok(FeatureBatch {
            z: enc.forward(images),
            view,
        })
    }

    pub fn classify(&self, z: &Array2<f32>) -> Result<Array2<f32>> {
        self.check_features(z)?;
        Ok(self.classifier.forward(z))
    }

    pub fn classify_ema(&self, z: &Array2<f32>) -> Result<Array2<f32>> {
        self.check_features(z)?;
        Ok(self.ema.classifier.forward(z))
    }

    pub fn project(&self, z: &Array2<f32>, use_ema: bool) -> Result<Projection> {
        self.check_features(z)?;
        let head = if use_ema { &self.ema.projector } else { &self.projector };
        Ok(head.forward(z))
    }

    /// Training-mode encoder forward keeping the cache for `encoder_backward`.
    pub fn encode_train(&mut self, images: &Array4<f32>) -> Result<(Array2<f32>, BackboneCache)> {
        self.check_images(images)?;
        Ok(self.encoder.forward_train(images))
    }

    /// `θ′ ← ρθ′ + (1−ρ)θ` for encoder, classifier and projection head;
    /// running statistics are copied.
    pub fn ema_update(&mut self) {
        let rho = self.config.ema_momentum;
        let mut online: Vec<&Param> = self.encoder.params();
        online.extend(self.classifier.params());
        online.extend(self.projector.params());
        for (shadow, p) in self.ema.shadow.iter_mut().zip(online) {
            for (s, v) in shadow.iter_mut().zip(&p.value) {
                *s = rho * *s + (1.0 - rho) * *v as f64;
            }
        }
        self.ema.sync_from_shadow();
        for (dst, src) in self.ema.encoder.buffers_mut().into_iter().zip(self.encoder.buffers()) {
            dst.value.copy_from_slice(&src.value);
        }
    }

    /// Online parameters in a fixed order (encoder, classifier, projector).
    pub fn online_params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        out.extend(self.classifier.params());
        out.extend(self.projector.params());
        out
    }

    pub fn online_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.classifier.params_mut());
        out.extend(self.projector.params_mut());
        out
    }

    pub fn ema_params(&self) -> Vec<&Param> {
        self.ema.params()
    }

    pub fn ema_shadow(&self) -> &[Vec<f64>] {
        self.ema.shadow()
    }

    pub fn zero_grad(&mut self) {
        self.online_params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// SHA-256 over online parameter values and buffers.
    pub fn online_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.online_params() {
            p.value.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        for b in self.encoder.buffers() {
            b.value.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over the EMA shadow and mirrored buffers.
    pub fn ema_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in self.ema.shadow() {
            s.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        for b in self.ema.encoder.buffers() {
            b.value.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        hex::encode(h.finalize())
    }
}
