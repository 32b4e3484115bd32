//! Classifier models with a frozen backbone, injectable adapters and a
//! trainable head.
//!
//! Three architectures share one parameter layout:
//!
//! * `Transformer`: the input row is cut into `input_dim / patch_size`
//!   patches, embedded by a frozen linear map plus positional vectors, then
//!   passed through `depth` pre-norm blocks:
//!
//!   ```text
//!   h ← h + softmax(LN1(h)Wq (LN1(h)Wk)ᵀ / √dim) LN1(h)Wv Wo
//!   h ← h + gelu(LN2(h) W1 + b1) W2 + b2
//!   ```
//!
//!   with single-head attention restricted to the patches of one sample.
//!   Patches are mean-pooled, layer-normed and fed to the head.
//! * `Mlp`: `depth` hidden layers `relu(h W + b)` followed by the head.
//! * `Linear`: `logits = x W`, no head. Used as a convex surrogate with a
//!   squared-error loss.
//!
//! Every adaptable weight is stored as a [`FrozenBase`] and used through its
//! effective weight `W0 + W_res + B·A`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{init_adapter, FrozenBase, LoraAdapter, MatrixId, MatrixKind};
use crate::numkit::{sgd_step, ParamGroup, Tape, Tensor, Var};
use crate::rng::{stream, Purpose};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const HEAD_INIT_SIGMA: f64 = 0.02;
const POS_INIT_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Transformer,
    Mlp,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Transformer blocks, or hidden layers for the MLP.
    pub depth: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub patch_size: usize,
    /// MLP hidden width.
    pub hidden: usize,
    pub input_dim: usize,
    /// Total class count over all tasks.
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("dim", self.dim),
            ("ffn_dim", self.ffn_dim),
            ("patch_size", self.patch_size),
            ("hidden", self.hidden),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.arch == Architecture::Transformer && !self.input_dim.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "model.patch_size {} must divide input_dim {}",
                self.patch_size, self.input_dim
            )));
        }
        Ok(())
    }

    /// Number of blocks a placement can address.
    pub fn depth(&self) -> usize {
        match self.arch {
            Architecture::Linear => 1,
            _ => self.depth,
        }
    }

    pub fn tokens(&self) -> usize {
        self.input_dim / self.patch_size
    }

    /// Width of the representation the head consumes.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Architecture::Transformer => self.dim,
            Architecture::Mlp => self.hidden,
            Architecture::Linear => self.num_classes,
        }
    }

    pub fn has_head(&self) -> bool {
        self.arch != Architecture::Linear
    }

    pub fn head_params(&self) -> usize {
        if self.has_head() {
            self.num_classes * self.feature_dim() + self.num_classes
        } else {
            0
        }
    }

    pub fn adaptable_matrices(&self) -> Vec<MatrixId> {
        match self.arch {
            Architecture::Transformer => (0..self.depth)
                .flat_map(|b| MatrixKind::ALL.into_iter().map(move |k| MatrixId::new(b, k)))
                .collect(),
            Architecture::Mlp => (0..self.depth).map(|b| MatrixId::new(b, MatrixKind::Fc1)).collect(),
            Architecture::Linear => vec![MatrixId::new(0, MatrixKind::Fc1)],
        }
    }

    /// `(d, k)` of an adaptable matrix, used as `x · W` with `x` having `d` columns.
    pub fn matrix_shape(&self, id: MatrixId) -> Option<(usize, usize)> {
        if id.block >= self.depth() {
            return None;
        }
        match (self.arch, id.kind) {
            (Architecture::Transformer, MatrixKind::Fc1) => Some((self.dim, self.ffn_dim)),
            (Architecture::Transformer, MatrixKind::Fc2) => Some((self.ffn_dim, self.dim)),
            (Architecture::Transformer, _) => Some((self.dim, self.dim)),
            (Architecture::Mlp, MatrixKind::Fc1) if id.block == 0 => Some((self.input_dim, self.hidden)),
            (Architecture::Mlp, MatrixKind::Fc1) => Some((self.hidden, self.hidden)),
            (Architecture::Linear, MatrixKind::Fc1) => Some((self.input_dim, self.num_classes)),
            _ => None,
        }
    }

    /// Dense parameter count of the whole backbone.
    pub fn backbone_params(&self) -> usize {
        let matrices: usize = self
            .adaptable_matrices()
            .into_iter()
            .map(|id| {
                let (d, k) = self.matrix_shape(id).expect("listed matrices have shapes");
                d * k
            })
            .sum();
        let others = match self.arch {
            Architecture::Transformer => {
                self.patch_size * self.dim
                    + self.tokens() * self.dim
                    + self.depth * (4 * self.dim + self.ffn_dim + self.dim)
                    + 2 * self.dim
            }
            Architecture::Mlp => self.depth * self.hidden,
            Architecture::Linear => 0,
        };
        matrices + others
    }
}

/// Loss used for local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// `½‖logits − onehot‖²`, averaged over samples.
    SquaredError,
}

/// Offset added to logits of inactive classes; `exp` of it underflows to zero.
const MASK_OFFSET: f64 = -1e9;

/// Training objective. With `active_classes`, cross-entropy only competes
/// among those classes: other logits receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: LossKind,
    pub active_classes: Option<Vec<usize>>,
}

impl Objective {
    pub fn plain(loss: LossKind) -> Self {
        Objective {
            loss,
            active_classes: None,
        }
    }
}

/// Which parameter families are trainable in a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSpec {
    pub lora_b: bool,
    pub lora_a: bool,
    pub head: bool,
    pub backbone: bool,
}

impl TrainSpec {
    pub const LORA_AND_HEAD: TrainSpec = TrainSpec {
        lora_b: true,
        lora_a: true,
        head: true,
        backbone: false,
    };
    pub const FROZEN: TrainSpec = TrainSpec {
        lora_b: false,
        lora_a: false,
        head: false,
        backbone: false,
    };
    pub const ALL: TrainSpec = TrainSpec {
        lora_b: true,
        lora_a: true,
        head: true,
        backbone: true,
    };
}

/// Frozen backbone: adaptable matrices plus every other tensor (embeddings,
/// norms, biases) by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub matrices: BTreeMap<MatrixId, FrozenBase>,
    pub others: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `C × feature_dim`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub adapters: BTreeMap<MatrixId, LoraAdapter>,
    pub head: Option<Head>,
}

/// Parameter names used by [`ModelState::get_param`] and gradient maps.
pub fn lora_b_name(id: MatrixId) -> String {
    format!("lora.{id}.B")
}

pub fn lora_a_name(id: MatrixId) -> String {
    format!("lora.{id}.A")
}

pub fn backbone_matrix_name(id: MatrixId) -> String {
    format!("backbone.{id}")
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Draws the shared "pretrained" backbone and a random head from `seed`.
pub fn init_backbone(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = stream(seed, Purpose::Backbone, &[]);
    let mut matrices = BTreeMap::new();
    let mut others = BTreeMap::new();
    let normal = |shape: &[usize], fan_in: usize, gain: f64, rng: &mut crate::rng::StreamRng| {
        Tensor::randn(shape, (gain / fan_in as f64).sqrt(), rng)
    };
    match config.arch {
        Architecture::Transformer => {
            let (p, dim) = (config.patch_size, config.dim);
            others.insert("embed.w".into(), normal(&[p, dim], p, 1.0, &mut rng));
            others.insert(
                "embed.pos".into(),
                Tensor::randn(&[config.tokens(), dim], POS_INIT_SIGMA, &mut rng),
            );
            for b in 0..config.depth {
                for kind in MatrixKind::ALL {
                    let id = MatrixId::new(b, kind);
                    let (d, k) = config.matrix_shape(id).expect("transformer matrix");
                    matrices.insert(id, FrozenBase::new(normal(&[d, k], d, 1.0, &mut rng)));
                }
                others.insert(format!("b{b}.ln1.g"), Tensor::filled(&[dim], 1.0));
                others.insert(format!("b{b}.ln1.b"), Tensor::zeros(&[dim]));
                others.insert(format!("b{b}.ln2.g"), Tensor::filled(&[dim], 1.0));
                others.insert(format!("b{b}.ln2.b"), Tensor::zeros(&[dim]));
                others.insert(format!("b{b}.fc1.bias"), Tensor::zeros(&[config.ffn_dim]));
                others.insert(format!("b{b}.fc2.bias"), Tensor::zeros(&[dim]));
            }
            others.insert("final_ln.g".into(), Tensor::filled(&[dim], 1.0));
            others.insert("final_ln.b".into(), Tensor::zeros(&[dim]));
        }
        Architecture::Mlp => {
            for b in 0..config.depth {
                let id = MatrixId::new(b, MatrixKind::Fc1);
                let (d, k) = config.matrix_shape(id).expect("mlp matrix");
                matrices.insert(id, FrozenBase::new(normal(&[d, k], d, 2.0, &mut rng)));
                others.insert(format!("b{b}.bias"), Tensor::zeros(&[config.hidden]));
            }
        }
        Architecture::Linear => {
            let id = MatrixId::new(0, MatrixKind::Fc1);
            let (d, k) = config.matrix_shape(id).expect("linear matrix");
            matrices.insert(id, FrozenBase::new(normal(&[d, k], d, 1.0, &mut rng)));
        }
    }
    let head = config.has_head().then(|| {
        let mut hr = stream(seed, Purpose::Head, &[]);
        Head {
            weight: Tensor::randn(&[config.num_classes, config.feature_dim()], HEAD_INIT_SIGMA, &mut hr),
            bias: Tensor::zeros(&[config.num_classes]),
        }
    });
    Ok(ModelState {
        config: config.clone(),
        backbone: Backbone { matrices, others },
        adapters: BTreeMap::new(),
        head,
    })
}

/// Outcome of [`local_train`].
#[derive(Debug, Clone, PartialEq)]
pub enum LocalOutcome {
    /// Mean training loss of each epoch.
    Trained { epoch_losses: Vec<f64> },
    /// Empty shard; the caller gives this client zero aggregation weight.
    Skipped,
}

/// Learning rates and batching for local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    /// Rate for adapters (and the backbone in full fine-tuning).
    pub lr_representation: f64,
    pub lr_head: f64,
    pub objective: Objective,
    pub spec: TrainSpec,
}

struct Binding {
    trainable: Vec<(String, Var)>,
    frozen: Vec<(String, Var)>,
    weights: BTreeMap<MatrixId, Var>,
    others: BTreeMap<String, Var>,
    head: Option<(Var, Var)>,
}

impl ModelState {
    /// Attaches fresh adapters (`B = 0`) to each listed matrix.
    pub fn attach_adapters(&mut self, ids: &[MatrixId], rank: usize, sigma: f64, seed: u64) -> Result<()> {
        for &id in ids {
            let (d, k) = self
                .config
                .matrix_shape(id)
                .ok_or_else(|| Error::Config(format!("model has no matrix {id}")))?;
            let mut rng = stream(seed, Purpose::Adapter, &[id.block as u64, id.kind as u64]);
            self.adapters.insert(id, init_adapter(d, k, rank, sigma, &mut rng)?);
        }
        Ok(())
    }

    /// Dense weight actually used for `id`.
    pub fn effective_weight(&self, id: MatrixId) -> Result<Tensor> {
        let base = self
            .backbone
            .matrices
            .get(&id)
            .ok_or_else(|| Error::Usage(format!("no matrix {id}")))?;
        match self.adapters.get(&id) {
            Some(ad) => crate::lora::effective_weight(base, ad),
            None => Ok(base.corrected()),
        }
    }

    /// Names of the parameters `spec` trains, in a fixed order.
    pub fn trainable_names(&self, spec: &TrainSpec) -> Vec<String> {
        let mut names = Vec::new();
        if spec.backbone {
            names.extend(self.backbone.matrices.keys().map(|&id| backbone_matrix_name(id)));
            names.extend(self.backbone.others.keys().map(|n| format!("backbone.{n}")));
        }
        for &id in self.adapters.keys() {
            if spec.lora_b {
                names.push(lora_b_name(id));
            }
            if spec.lora_a {
                names.push(lora_a_name(id));
            }
        }
        if spec.head && self.head.is_some() {
            names.push(HEAD_WEIGHT.into());
            names.push(HEAD_BIAS.into());
        }
        names
    }

    fn parse_matrix(&self, name: &str) -> Option<MatrixId> {
        self.backbone
            .matrices
            .keys()
            .copied()
            .find(|id| name == id.to_string())
    }

    pub fn get_param(&self, name: &str) -> Option<Tensor> {
        if let Some(rest) = name.strip_prefix("lora.") {
            let (id, factor) = rest.rsplit_once('.')?;
            let ad = self.adapters.get(&self.parse_matrix(id)?)?;
            return match factor {
                "B" => Some(ad.b.clone()),
                "A" => Some(ad.a.clone()),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix("backbone.") {
            if let Some(id) = self.parse_matrix(rest) {
                return Some(self.backbone.matrices[&id].corrected());
            }
            return self.backbone.others.get(rest).cloned();
        }
        let head = self.head.as_ref()?;
        match name {
            HEAD_WEIGHT => Some(head.weight.clone()),
            HEAD_BIAS => Some(head.bias.clone()),
            _ => None,
        }
    }

    /// Overwrites a parameter. Backbone matrices are moved to the new value
    /// through their residual accumulator so `W0` stays untouched.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let unknown = || Error::Usage(format!("unknown parameter `{name}`"));
        let check = |old: &Tensor, new: &Tensor| {
            if old.shape() != new.shape() {
                Err(Error::shape("set_param", old.shape(), new.shape()))
            } else {
                Ok(())
            }
        };
        if let Some(rest) = name.strip_prefix("lora.") {
            let (id, factor) = rest.rsplit_once('.').ok_or_else(unknown)?;
            let id = self.parse_matrix(id).ok_or_else(unknown)?;
            let ad = self.adapters.get_mut(&id).ok_or_else(unknown)?;
            let slot = match factor {
                "B" => &mut ad.b,
                "A" => &mut ad.a,
                _ => return Err(unknown()),
            };
            check(slot, &value)?;
            *slot = value;
            return Ok(());
        }
        if let Some(rest) = name.strip_prefix("backbone.") {
            if let Some(id) = self.parse_matrix(rest) {
                let base = self.backbone.matrices.get_mut(&id).expect("parsed id exists");
                let delta = value.sub(&base.corrected())?;
                return base.apply_reswu(&delta);
            }
            let slot = self.backbone.others.get_mut(rest).ok_or_else(unknown)?;
            check(slot, &value)?;
            *slot = value;
            return Ok(());
        }
        let head = self.head.as_mut().ok_or_else(unknown)?;
        let slot = match name {
            HEAD_WEIGHT => &mut head.weight,
            HEAD_BIAS => &mut head.bias,
            _ => return Err(unknown()),
        };
        check(slot, &value)?;
        *slot = value;
        Ok(())
    }

    fn bind(&self, tape: &mut Tape, spec: &TrainSpec) -> Result<Binding> {
        let mut binding = Binding {
            trainable: Vec::new(),
            frozen: Vec::new(),
            weights: BTreeMap::new(),
            others: BTreeMap::new(),
            head: None,
        };
        let leaf = |tape: &mut Tape, name: String, value: Tensor, train: bool, b: &mut Binding| {
            let v = if train { tape.param(value) } else { tape.constant(value) };
            if train {
                b.trainable.push((name, v));
            } else {
                b.frozen.push((name, v));
            }
            v
        };
        for (&id, base) in &self.backbone.matrices {
            let w = leaf(tape, backbone_matrix_name(id), base.corrected(), spec.backbone, &mut binding);
            let w = match self.adapters.get(&id) {
                Some(ad) => {
                    let b = leaf(tape, lora_b_name(id), ad.b.clone(), spec.lora_b, &mut binding);
                    let a = leaf(tape, lora_a_name(id), ad.a.clone(), spec.lora_a, &mut binding);
                    let ba = tape.matmul(b, a)?;
                    tape.add(w, ba)?
                }
                None => w,
            };
            binding.weights.insert(id, w);
        }
        for (name, t) in &self.backbone.others {
            let v = leaf(tape, format!("backbone.{name}"), t.clone(), spec.backbone, &mut binding);
            binding.others.insert(name.clone(), v);
        }
        if let Some(head) = &self.head {
            let w = leaf(tape, HEAD_WEIGHT.into(), head.weight.clone(), spec.head, &mut binding);
            let b = leaf(tape, HEAD_BIAS.into(), head.bias.clone(), spec.head, &mut binding);
            binding.head = Some((w, b));
        }
        Ok(binding)
    }

    fn forward_bound(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let w = |kind: MatrixKind, block: usize| bind.weights[&MatrixId::new(block, kind)];
        let o = |name: &str| bind.others[name];
        let n = tape.value(x)?.rows();
        let features = match cfg.arch {
            Architecture::Linear => return tape.matmul(x, w(MatrixKind::Fc1, 0)),
            Architecture::Mlp => {
                let mut h = x;
                for b in 0..cfg.depth {
                    let z = tape.matmul(h, w(MatrixKind::Fc1, b))?;
                    let z = tape.add_row(z, o(&format!("b{b}.bias")))?;
                    h = tape.relu(z)?;
                }
                h
            }
            Architecture::Transformer => {
                let p = cfg.tokens();
                let tokens = tape.reshape(x, &[n * p, cfg.patch_size])?;
                let h = tape.matmul(tokens, o("embed.w"))?;
                let mut h = tape.tile_add(h, o("embed.pos"))?;
                let inv_sqrt = 1.0 / (cfg.dim as f64).sqrt();
                for b in 0..cfg.depth {
                    let a = tape.layer_norm(h, o(&format!("b{b}.ln1.g")), o(&format!("b{b}.ln1.b")), LAYER_NORM_EPS)?;
                    let q = tape.matmul(a, w(MatrixKind::Q, b))?;
                    let k = tape.matmul(a, w(MatrixKind::K, b))?;
                    let v = tape.matmul(a, w(MatrixKind::V, b))?;
                    let mut outs = Vec::with_capacity(n);
                    for i in 0..n {
                        let qi = tape.slice_rows(q, i * p, p)?;
                        let ki = tape.slice_rows(k, i * p, p)?;
                        let vi = tape.slice_rows(v, i * p, p)?;
                        let kt = tape.transpose(ki)?;
                        let s = tape.matmul(qi, kt)?;
                        let s = tape.scale(s, inv_sqrt)?;
                        let att = tape.row_softmax(s)?;
                        outs.push(tape.matmul(att, vi)?);
                    }
                    let att = tape.concat_rows(&outs)?;
                    let proj = tape.matmul(att, w(MatrixKind::O, b))?;
                    h = tape.add(h, proj)?;
                    let m = tape.layer_norm(h, o(&format!("b{b}.ln2.g")), o(&format!("b{b}.ln2.b")), LAYER_NORM_EPS)?;
                    let f = tape.matmul(m, w(MatrixKind::Fc1, b))?;
                    let f = tape.add_row(f, o(&format!("b{b}.fc1.bias")))?;
                    let f = tape.gelu(f)?;
                    let f = tape.matmul(f, w(MatrixKind::Fc2, b))?;
                    let f = tape.add_row(f, o(&format!("b{b}.fc2.bias")))?;
                    h = tape.add(h, f)?;
                }
                let pooled = tape.group_mean(h, p)?;
                tape.layer_norm(pooled, o("final_ln.g"), o("final_ln.b"), LAYER_NORM_EPS)?
            }
        };
        let (hw, hb) = bind.head.expect("architectures with features have a head");
        let hwt = tape.transpose(hw)?;
        let logits = tape.matmul(features, hwt)?;
        tape.add_row(logits, hb)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if !batch.is_matrix() || batch.cols() != self.config.input_dim {
            return Err(Error::shape("forward", batch.shape(), &[self.config.input_dim]));
        }
        Ok(())
    }

    /// Logits over all classes for an `n × input_dim` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, &TrainSpec::FROZEN)?;
        let x = tape.constant(batch.clone());
        let logits = self.forward_bound(&mut tape, &bind, x)?;
        Ok(tape.value(logits)?.clone())
    }

    fn loss_var(&self, tape: &mut Tape, logits: Var, labels: &[usize], objective: &Objective) -> Result<Var> {
        let c = self.config.num_classes;
        match objective.loss {
            LossKind::CrossEntropy => {
                let logits = match &objective.active_classes {
                    Some(active) => {
                        let mut mask = vec![MASK_OFFSET; c];
                        for &k in active {
                            *mask
                                .get_mut(k)
                                .ok_or_else(|| Error::Validation(format!("class {k} out of range")))? = 0.0;
                        }
                        if let Some(&y) = labels.iter().find(|&&y| y < c && mask[y] != 0.0) {
                            return Err(Error::Validation(format!("label {y} is not an active class")));
                        }
                        let m = tape.constant(Tensor::new(vec![c], mask)?);
                        tape.add_row(logits, m)?
                    }
                    None => logits,
                };
                tape.softmax_cross_entropy(logits, labels)
            }
            LossKind::SquaredError => {
                let mut target = vec![0.0; labels.len() * c];
                for (i, &y) in labels.iter().enumerate() {
                    if y >= c {
                        return Err(Error::Validation(format!("label {y} out of range for {c} classes")));
                    }
                    target[i * c + y] = 1.0;
                }
                tape.squared_error(logits, Tensor::new(vec![labels.len(), c], target)?)
            }
        }
    }

    /// Loss value only, without recording gradients.
    pub fn loss(&self, batch: &Tensor, labels: &[usize], objective: &Objective) -> Result<f64> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, &TrainSpec::FROZEN)?;
        let x = tape.constant(batch.clone());
        let logits = self.forward_bound(&mut tape, &bind, x)?;
        let l = self.loss_var(&mut tape, logits, labels, objective)?;
        Ok(tape.value(l)?.item())
    }

    /// Loss and gradients of every parameter `spec` trains.
    pub fn gradient(
        &self,
        batch: &Tensor,
        labels: &[usize],
        spec: &TrainSpec,
        objective: &Objective,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let (value, grads, _) = self.gradient_inner(batch, labels, spec, objective, false)?;
        Ok((value, grads))
    }

    /// Like [`gradient`](Self::gradient) but also reports every frozen
    /// parameter, whose gradient is the exact zero tensor.
    pub fn full_gradient(
        &self,
        batch: &Tensor,
        labels: &[usize],
        spec: &TrainSpec,
        objective: &Objective,
    ) -> Result<(f64, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
        self.gradient_inner(batch, labels, spec, objective, true)
    }

    #[allow(clippy::type_complexity)]
    fn gradient_inner(
        &self,
        batch: &Tensor,
        labels: &[usize],
        spec: &TrainSpec,
        objective: &Objective,
        with_frozen: bool,
    ) -> Result<(f64, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, spec)?;
        let x = tape.constant(batch.clone());
        let logits = self.forward_bound(&mut tape, &bind, x)?;
        let l = self.loss_var(&mut tape, logits, labels, objective)?;
        let value = tape.value(l)?.item();
        let mut grads = tape.backward(l)?;
        let mut trainable = BTreeMap::new();
        for (name, v) in bind.trainable {
            let g = grads.take(v)?.expect("trainable leaf has a gradient");
            trainable.insert(name, g);
        }
        let mut frozen = BTreeMap::new();
        if with_frozen {
            for (name, v) in bind.frozen {
                frozen.insert(name, grads.get(v)?.into_owned());
            }
        }
        Ok((value, trainable, frozen))
    }
}

/// Runs `epochs` passes of mini-batch SGD over the shard.
///
/// Adapters (and the backbone when `spec.backbone`) step with
/// `lr_representation`, the head with `lr_head`. Only parameters selected by
/// `spec` change.
pub fn local_train<R: Rng + ?Sized>(
    state: &mut ModelState,
    features: &Tensor,
    labels: &[usize],
    params: &LocalTrainParams,
    rng: &mut R,
) -> Result<LocalOutcome> {
    if labels.is_empty() {
        return Ok(LocalOutcome::Skipped);
    }
    if features.rows() != labels.len() {
        return Err(Error::shape("local_train", features.shape(), &[labels.len()]));
    }
    if params.epochs == 0 || params.batch_size == 0 {
        return Err(Error::Config("local epochs and batch size must be >= 1".into()));
    }
    let names = state.trainable_names(&params.spec);
    let (head_names, repr_names): (Vec<_>, Vec<_>) =
        names.iter().cloned().partition(|n| n.starts_with("head."));
    let groups = [
        ParamGroup::new("representation", params.lr_representation, repr_names)?,
        ParamGroup::new("classifier", params.lr_head, head_names)?,
    ];

    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_losses = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(params.batch_size) {
            let x = features.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = state.gradient(&x, &y, &params.spec, &params.objective)?;
            if !loss.is_finite() {
                return Err(Error::Validation("local training produced a non-finite loss".into()));
            }
            total += loss * chunk.len() as f64;
            let mut current: BTreeMap<String, Tensor> = grads
                .keys()
                .map(|n| (n.clone(), state.get_param(n).expect("trainable names resolve")))
                .collect();
            sgd_step(&mut current, &grads, &groups)?;
            for (name, value) in current {
                state.set_param(&name, value)?;
            }
        }
        epoch_losses.push(total / labels.len() as f64);
    }
    Ok(LocalOutcome::Trained { epoch_losses })
}
