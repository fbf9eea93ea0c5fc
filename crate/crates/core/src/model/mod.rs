//! The trainable detector.
//!
//! ```text
//! image ─ backbone ─ neck ─┬─ P_min ─ sample @ grid ─ deform head ─┐
//!                          │                                      v
//!                          └─ P_2..P_L ─ sample @ deformed ─ concat ─ reg head ─ final points
//!                                                                  └ cls head ─ logits
//! ```
//!
//! With several fields of view each view gets its own backbone and neck and
//! the outer pyramids are fused into the innermost one before decoding. In
//! iterative mode the deformation is replaced by `n` chained decoders whose
//! outputs are all handed to the matcher.

mod checkpoint;
mod config;
mod heads;
mod network;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{generate_grid_proposals, Point, ProposalSet, PyramidLevel};
use crate::metrics::Detection;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BackboneConfig, HeadConfig, ModelConfig, RefineMode, UpsampleKind};
pub use params::ParamStore;

use heads::{decode_heads, deformation_head};
use network::{build_pyramid, extract_multiscale_features, fov_prefix, mfov_aggregate};
use params::Init;

/// Concentric views of one sample, `(3, H, W)` each, innermost last.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub views: Vec<Tensor>,
}

impl ModelInput {
    pub fn single(image: Tensor) -> Self {
        ModelInput { views: vec![image] }
    }

    pub fn height(&self) -> usize {
        self.views[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.views[0].shape()[2]
    }
}

/// Graph handles for one decode stage.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub points: Var,
    pub logits: Var,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// The (possibly fused) pyramid decoded from, ascending level.
    pub pyramid: Vec<Var>,
    pub initial: Var,
    pub deform_offsets: Option<Var>,
    pub deformed: Var,
    pub stages: Vec<StageVars>,
    /// All points handed to the matcher; `stages.len() * M` rows.
    pub candidate_points: Var,
    pub candidate_logits: Var,
}

/// Points and logits of one decode stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub points: Vec<Point>,
    pub logits: Tensor,
}

/// Plain values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub proposals: ProposalSet,
    /// Deformed proposals plus regression offsets (last stage in iterative mode).
    pub final_points: Vec<Point>,
    /// `(M, C + 1)`, background last.
    pub logits: Tensor,
    pub stages: Vec<StageOutput>,
    pub candidate_points: Vec<Point>,
    pub candidate_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

pub(crate) fn points_to_tensor(points: &[Point]) -> Tensor {
    Tensor::from_vec(
        &[points.len(), 2],
        points.iter().flat_map(|p| [p.x, p.y]).collect(),
    )
}

pub(crate) fn tensor_to_points(t: &Tensor) -> Vec<Point> {
    t.data().chunks(2).map(|c| Point::new(c[0], c[1])).collect()
}

impl Model {
    /// Fresh parameters from `seed`. Deformation and all decode output
    /// layers start at zero, so an untrained model returns the proposal grid.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let bb = &config.backbone;
        let c = bb.pyramid_channels;
        for k in 1..=config.mfov_k {
            let (bp, np) = fov_prefix(k, config.mfov_k);
            let c0 = bb.stage_channels[0];
            init.conv(&format!("{bp}.stem"), c0, 3, 3, 1.0);
            for (t, &ct) in bb.stage_channels.iter().enumerate() {
                let cin = if t == 0 { c0 } else { bb.stage_channels[t - 1] };
                init.conv(&format!("{bp}.s{t}.down"), ct, cin, 3, 1.0);
                init.conv(&format!("{bp}.s{t}.res1"), ct, ct, 3, 1.0);
                init.conv(&format!("{bp}.s{t}.res2"), ct, ct, 3, 0.5);
            }
            for &j in &bb.levels {
                init.conv(&format!("{np}.lat{j}"), c, bb.stage_channels[j as usize - 2], 1, 1.0);
                init.conv(&format!("{np}.smooth{j}"), c, c, 3, 1.0);
            }
        }
        if config.mfov_k > 1 {
            for &j in &bb.levels {
                init.conv_transpose(&format!("mfov.l{j}.up"), c, c, 2);
                init.conv_identity(&format!("mfov.l{j}.fuse"), c);
            }
        }
        let hidden = config.head.hidden_dim;
        let d = bb.levels.len() * c;
        let logits = config.num_logits();
        match config.mode {
            RefineMode::Dpa => {
                init.linear("deform.fc1", hidden, c);
                init.linear_zero("deform.fc2", 2, hidden);
                init.linear("reg.fc1", hidden, d);
                init.linear_zero("reg.fc2", 2, hidden);
                init.linear("cls.fc1", hidden, d);
                init.linear_zero("cls.fc2", logits, hidden);
            }
            RefineMode::Iterative => {
                for s in 0..config.refine_stages {
                    init.linear(&format!("stage{s}.reg.fc1"), hidden, d);
                    init.linear_zero(&format!("stage{s}.reg.fc2"), 2, hidden);
                    init.linear(&format!("stage{s}.cls.fc1"), hidden, d);
                    init.linear_zero(&format!("stage{s}.cls.fc2"), logits, hidden);
                }
            }
        }
        Ok(Model {
            config,
            params: store,
        })
    }

    /// Rebuilds a model from stored parameters, checking that every
    /// expected array is present with the right shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.try_get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("parameter `{name}` missing"))),
            }
        }
        if params.len() != reference.params.len() {
            let extra: Vec<_> = params
                .names()
                .filter(|n| reference.params.try_get(n).is_none())
                .collect();
            return Err(Error::invalid(format!("unexpected parameters {extra:?}")));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Checks view count and spatial size against the configuration.
    pub fn check_input(&self, input: &ModelInput) -> Result<()> {
        if input.views.len() != self.config.mfov_k {
            return Err(Error::invalid(format!(
                "model expects {} field(s) of view, got {}",
                self.config.mfov_k,
                input.views.len()
            )));
        }
        let (h, w) = (input.height(), input.width());
        for v in &input.views {
            if v.shape() != [3, h, w] {
                return Err(Error::invalid(format!(
                    "all views must be 3x{h}x{w}, got {:?}",
                    v.shape()
                )));
            }
        }
        let div = self.config.required_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} must be divisible by {div} (pad the image)"
            )));
        }
        Ok(())
    }

    /// Builds the pyramid (fused across views when `K > 1`).
    pub fn pyramid_vars(&self, g: &mut Graph, input: &ModelInput) -> Result<Vec<Var>> {
        self.check_input(input)?;
        let k_total = self.config.mfov_k;
        let mut pyramids = Vec::with_capacity(k_total);
        for (i, view) in input.views.iter().enumerate() {
            let x = g.constant(view.clone());
            pyramids.push(build_pyramid(g, &self.params, &self.config.backbone, x, i + 1, k_total)?);
        }
        mfov_aggregate(
            g,
            &self.params,
            &self.config.backbone.levels,
            self.config.mfov_upsample,
            &pyramids,
        )
    }

    /// Pyramid values for inspection.
    pub fn pyramid(&self, input: &ModelInput) -> Result<Vec<PyramidLevel>> {
        let mut g = Graph::new();
        let vars = self.pyramid_vars(&mut g, input)?;
        Ok(self
            .config
            .backbone
            .levels
            .iter()
            .zip(vars)
            .map(|(&j, v)| PyramidLevel::new(j, g.value(v).clone()))
            .collect())
    }

    /// The innermost view's own pyramid, skipping any fusion.
    pub fn view_pyramid(&self, image: &Tensor) -> Result<Vec<PyramidLevel>> {
        let k = self.config.mfov_k;
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let vars = build_pyramid(&mut g, &self.params, &self.config.backbone, x, k, k)?;
        Ok(self
            .config
            .backbone
            .levels
            .iter()
            .zip(vars)
            .map(|(&j, v)| PyramidLevel::new(j, g.value(v).clone()))
            .collect())
    }

    /// The proposal grid for an input of this size.
    pub fn proposals(&self, height: usize, width: usize) -> Result<ProposalSet> {
        generate_grid_proposals(height, width, self.config.interval)
    }

    /// Records the full forward pass on `g`. Dropout is sampled from `rng`
    /// when given (training) and disabled otherwise.
    pub fn forward<R: Rng>(&self, g: &mut Graph, input: &ModelInput, mut rng: Option<&mut R>) -> Result<ForwardVars> {
        let pyramid = self.pyramid_vars(g, input)?;
        let proposals = self.proposals(input.height(), input.width())?;
        let initial = g.constant(points_to_tensor(&proposals.initial));
        let levels = &self.config.backbone.levels;
        let head = &self.config.head;
        let (deform_offsets, deformed, stages) = match self.config.mode {
            RefineMode::Dpa => {
                let stride = (1u64 << levels[0]) as f64;
                let finest = g.sample_points(pyramid[0], initial, stride);
                let offsets = deformation_head(
                    g,
                    &self.params,
                    finest,
                    head.dropout_rate,
                    self.config.deform_scale,
                    rng.as_deref_mut(),
                );
                let deformed = g.add(initial, offsets);
                let feats = extract_multiscale_features(g, levels, &pyramid, deformed);
                let (reg, logits) = decode_heads(
                    g,
                    &self.params,
                    "",
                    feats,
                    head.dropout_rate,
                    self.config.regress_scale,
                    rng.as_deref_mut(),
                );
                let points = g.add(deformed, reg);
                (Some(offsets), deformed, vec![StageVars { points, logits }])
            }
            RefineMode::Iterative => {
                let mut current = initial;
                let mut stages = Vec::with_capacity(self.config.refine_stages);
                for s in 0..self.config.refine_stages {
                    let feats = extract_multiscale_features(g, levels, &pyramid, current);
                    let (reg, logits) = decode_heads(
                        g,
                        &self.params,
                        &format!("stage{s}."),
                        feats,
                        head.dropout_rate,
                        self.config.regress_scale,
                        rng.as_deref_mut(),
                    );
                    current = g.add(current, reg);
                    stages.push(StageVars {
                        points: current,
                        logits,
                    });
                }
                (None, initial, stages)
            }
        };
        let (candidate_points, candidate_logits) = if stages.len() == 1 {
            (stages[0].points, stages[0].logits)
        } else {
            let pts: Vec<Var> = stages.iter().map(|s| s.points).collect();
            let lg: Vec<Var> = stages.iter().map(|s| s.logits).collect();
            (g.concat_rows(&pts), g.concat_rows(&lg))
        };
        Ok(ForwardVars {
            pyramid,
            initial,
            deform_offsets,
            deformed,
            stages,
            candidate_points,
            candidate_logits,
        })
    }

    /// Evaluation-mode forward pass returning plain values.
    pub fn infer(&self, input: &ModelInput) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let vars = self.forward::<ChaCha8Rng>(&mut g, input, None)?;
        Ok(ModelOutput::read(&g, &vars, self.config.interval))
    }
}

impl ModelOutput {
    pub fn read(g: &Graph, vars: &ForwardVars, interval: f64) -> Self {
        let initial = tensor_to_points(g.value(vars.initial));
        let deformed = tensor_to_points(g.value(vars.deformed));
        let stages: Vec<StageOutput> = vars
            .stages
            .iter()
            .map(|s| StageOutput {
                points: tensor_to_points(g.value(s.points)),
                logits: g.value(s.logits).clone(),
            })
            .collect();
        let last = stages.last().expect("at least one stage");
        ModelOutput {
            proposals: ProposalSet {
                initial,
                deformed: Some(deformed),
                interval,
            },
            final_points: last.points.clone(),
            logits: last.logits.clone(),
            candidate_points: tensor_to_points(g.value(vars.candidate_points)),
            candidate_logits: g.value(vars.candidate_logits).clone(),
            stages,
        }
    }

    pub fn len(&self) -> usize {
        self.final_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.final_points.is_empty()
    }

    /// One detection per proposal whose best cell-class probability is at
    /// least `threshold`; the class is the argmax over cell classes.
    ///
    /// Confidences are capped at `1 - 2^-52` so a threshold of 1 emits
    /// nothing even when the softmax rounds to one.
    pub fn detections(&self, threshold: f64) -> Vec<Detection> {
        let probs = crate::assignment::softmax_rows(&self.logits);
        let (_, cols) = probs.dims2();
        let classes = cols - 1;
        let cap = 1.0 - f64::EPSILON;
        self.final_points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let row = probs.row(i);
                let (class, &prob) = row[..classes]
                    .iter()
                    .enumerate()
                    .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                let conf = prob.min(cap);
                (conf >= threshold).then_some(Detection {
                    x: p.x,
                    y: p.y,
                    class,
                    conf,
                })
            })
            .collect()
    }
}
