//! Model composition: a feature extractor (beta), a head MLP (theta) and a
//! logits layer (nu), each held in its own freezable [`ParamGroup`].
//!
//! Weights are stored `[fan_in × fan_out]` so a dense layer is `x·W + b`.
//! Initialization is Glorot-uniform for weights and zero for biases, drawn
//! from a ChaCha stream derived from the model seed.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

/// Input-to-feature trunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    /// Dense layers with ReLU after each; features are the last hidden layer.
    Dense { input_dim: usize, hidden: Vec<usize> },
    /// conv(c→6, 5×5) → ReLU → pool → conv(6→16, 5×5) → ReLU → pool → flatten.
    SmallCnn { channels: usize, hw: usize },
}

pub const CNN_KERNEL: usize = 5;
pub const CNN_CHANNELS: [usize; 2] = [6, 16];

impl ExtractorSpec {
    pub fn feature_dim(&self) -> Result<usize> {
        match self {
            ExtractorSpec::Dense { input_dim, hidden } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return Err(Error::Config("dense extractor widths must be positive".into()));
                }
                Ok(hidden.last().copied().unwrap_or(*input_dim))
            }
            ExtractorSpec::SmallCnn { channels, hw } => {
                if *channels == 0 {
                    return Err(Error::Config("cnn needs at least one input channel".into()));
                }
                let mut side = *hw;
                for _ in CNN_CHANNELS {
                    if side < CNN_KERNEL || (side - CNN_KERNEL + 1) % 2 != 0 {
                        return Err(Error::Config(format!(
                            "cnn input side {hw} does not survive two conv({CNN_KERNEL})+pool(2) stages"
                        )));
                    }
                    side = (side - CNN_KERNEL + 1) / 2;
                }
                Ok(CNN_CHANNELS[1] * side * side)
            }
        }
    }

    /// Shape of one input example.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ExtractorSpec::Dense { input_dim, .. } => vec![*input_dim],
            ExtractorSpec::SmallCnn { channels, hw } => vec![*channels, *hw, *hw],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// The Stage-1 classifier: `stage1_hidden` ReLU layers then a linear map to K.
    Stage1,
    /// `[F → 3Z]` ReLU `[3Z → Z]`, then nu `[Z → K]`.
    Deterministic,
    /// Twin `[F → 3Z → Z]` MLPs for mu and the raw variance, then nu `[Z → K]`.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage1,
    Tst,
    Vtst,
    E2e,
    VarE2e,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Stage1 => "stage1",
            StageTag::Tst => "tst",
            StageTag::Vtst => "vtst",
            StageTag::E2e => "e2e",
            StageTag::VarE2e => "var_e2e",
        }
    }

    pub fn head_kind(self) -> HeadKind {
        match self {
            StageTag::Stage1 => HeadKind::Stage1,
            StageTag::Tst | StageTag::E2e => HeadKind::Deterministic,
            StageTag::Vtst | StageTag::VarE2e => HeadKind::Gaussian,
        }
    }

    /// Two-stage models keep the feature extractor frozen.
    pub fn freezes_beta(self) -> bool {
        matches!(self, StageTag::Tst | StageTag::Vtst)
    }
}

impl std::str::FromStr for StageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "stage1" => StageTag::Stage1,
            "tst" => StageTag::Tst,
            "vtst" => StageTag::Vtst,
            "e2e" => StageTag::E2e,
            "var_e2e" => StageTag::VarE2e,
            other => return Err(Error::Config(format!("unknown stage tag {other:?}"))),
        })
    }
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub extractor: ExtractorSpec,
    pub z_dim: usize,
    pub num_classes: usize,
    pub head_kind: HeadKind,
    /// Hidden widths of the Stage-1 classifier head.
    #[serde(default)]
    pub stage1_hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<usize> {
        if self.z_dim < 1 {
            return Err(Error::Config("z_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.stage1_hidden.contains(&0) {
            return Err(Error::Config("stage1_hidden widths must be positive".into()));
        }
        self.extractor.feature_dim()
    }

    pub fn feature_dim(&self) -> Result<usize> {
        self.extractor.feature_dim()
    }

    pub fn with_head(&self, head_kind: HeadKind, z_dim: usize) -> Self {
        ModelSpec {
            head_kind,
            z_dim,
            ..self.clone()
        }
    }

    /// Every parameter this spec defines, in canonical order.
    pub fn layout(&self) -> Result<Vec<ParamSlot>> {
        let feature_dim = self.validate()?;
        let mut slots = Vec::new();
        match &self.extractor {
            ExtractorSpec::Dense { input_dim, hidden } => {
                let mut width = *input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    push_dense(&mut slots, Group::Beta, &i.to_string(), width, h);
                    width = h;
                }
            }
            ExtractorSpec::SmallCnn { channels, .. } => {
                let (mut cin, k) = (*channels, CNN_KERNEL);
                for (i, &cout) in CNN_CHANNELS.iter().enumerate() {
                    let layer = i.to_string();
                    slots.push(ParamSlot::weight(
                        Group::Beta,
                        &layer,
                        vec![cout, cin, k, k],
                        cin * k * k,
                        cout * k * k,
                    ));
                    slots.push(ParamSlot::bias(Group::Beta, &layer, cout));
                    cin = cout;
                }
            }
        }
        let mut dense = |group: Group, layer: &str, fan_in: usize, fan_out: usize| {
            push_dense(&mut slots, group, layer, fan_in, fan_out)
        };
        let (z, k) = (self.z_dim, self.num_classes);
        match self.head_kind {
            HeadKind::Stage1 => {
                let mut width = feature_dim;
                for (i, &h) in self.stage1_hidden.iter().enumerate() {
                    dense(Group::Theta, &i.to_string(), width, h);
                    width = h;
                }
                dense(Group::Nu, "0", width, k);
            }
            HeadKind::Deterministic => {
                dense(Group::Theta, "0", feature_dim, 3 * z);
                dense(Group::Theta, "1", 3 * z, z);
                dense(Group::Nu, "0", z, k);
            }
            HeadKind::Gaussian => {
                for branch in ["mu", "sigma"] {
                    dense(Group::Theta, &format!("{branch}0"), feature_dim, 3 * z);
                    dense(Group::Theta, &format!("{branch}1"), 3 * z, z);
                }
                dense(Group::Nu, "0", z, k);
            }
        }
        Ok(slots)
    }
}

fn push_dense(slots: &mut Vec<ParamSlot>, group: Group, layer: &str, fan_in: usize, fan_out: usize) {
    slots.push(ParamSlot::weight(group, layer, vec![fan_in, fan_out], fan_in, fan_out));
    slots.push(ParamSlot::bias(group, layer, fan_out));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Beta,
    Theta,
    Nu,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Beta, Group::Theta, Group::Nu];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Beta => "beta",
            Group::Theta => "theta",
            Group::Nu => "nu",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub group: Group,
    /// `<layer>.<param>` within the group.
    pub name: String,
    pub shape: Vec<usize>,
    /// Glorot bound inputs; `None` for zero-initialized biases.
    pub fans: Option<(usize, usize)>,
}

impl ParamSlot {
    fn weight(group: Group, layer: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Self {
        ParamSlot {
            group,
            name: format!("{layer}.weight"),
            shape,
            fans: Some((fan_in, fan_out)),
        }
    }

    fn bias(group: Group, layer: &str, n: usize) -> Self {
        ParamSlot {
            group,
            name: format!("{layer}.bias"),
            shape: vec![n],
            fans: None,
        }
    }

    pub fn key(&self) -> String {
        format!("{}.{}", self.group.as_str(), self.name)
    }

    fn init<S: Scalar>(&self, rng: &mut rng::Rng) -> Tensor<S> {
        match self.fans {
            None => Tensor::zeros(self.shape.clone()),
            Some((fan_in, fan_out)) => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = self.shape.iter().product();
                let data = (0..n).map(|_| S::of(rng.random_range(-a..a))).collect();
                Tensor::new(self.shape.clone(), data).expect("layout shape is consistent")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S: Scalar = f64> {
    pub name: String,
    pub value: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<S: Scalar = f64> {
    pub name: Group,
    pub params: Vec<Param<S>>,
    pub trainable: bool,
}

impl<S: Scalar> ParamGroup<S> {
    /// FNV-1a over the bit patterns of every value, in parameter order.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for x in p.value.data() {
                for byte in x.to_f64_lossless().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar = f64> {
    spec: ModelSpec,
    groups: [ParamGroup<S>; 3],
    pub stage: StageTag,
    pub seed: u64,
}

/// Parameters of a model registered as leaves on a tape, grouped like the model.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: [Vec<Var>; 3],
}

impl Bound {
    pub fn group(&self, g: Group) -> &[Var] {
        &self.vars[g.index()]
    }
}

/// Output of the head for a batch of features.
#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    Logits(Var),
    Gaussian { mu: Var, log_var: Var, sigma: Var },
}

fn empty_groups<S: Scalar>() -> [ParamGroup<S>; 3] {
    Group::ALL.map(|name| ParamGroup {
        name,
        params: Vec::new(),
        trainable: true,
    })
}

impl<S: Scalar> Model<S> {
    /// Fresh model with all groups trainable. Deterministic in `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let layout = spec.layout()?;
        let mut beta_rng = rng::rng_from(seed, &[stream::INIT_BETA]);
        let mut head_rng = rng::rng_from(seed, &[stream::INIT_HEAD]);
        let mut groups = empty_groups();
        for slot in &layout {
            let r = if slot.group == Group::Beta {
                &mut beta_rng
            } else {
                &mut head_rng
            };
            groups[slot.group.index()].params.push(Param {
                name: slot.name.clone(),
                value: slot.init(r),
            });
        }
        let stage = match spec.head_kind {
            HeadKind::Stage1 => StageTag::Stage1,
            HeadKind::Deterministic => StageTag::E2e,
            HeadKind::Gaussian => StageTag::VarE2e,
        };
        Ok(Model {
            spec,
            groups,
            stage,
            seed,
        })
    }

    /// Assembles a model from explicit parameter values, checking them against the layout.
    pub fn from_params(
        spec: ModelSpec,
        mut lookup: impl FnMut(&ParamSlot) -> Result<Tensor<S>>,
        stage: StageTag,
        seed: u64,
    ) -> Result<Self> {
        let mut groups = empty_groups();
        for slot in spec.layout()? {
            let value = lookup(&slot)?;
            if value.shape() != slot.shape.as_slice() {
                return Err(Error::Parse {
                    location: slot.key(),
                    detail: format!("shape {:?}, spec expects {:?}", value.shape(), slot.shape),
                });
            }
            groups[slot.group.index()].params.push(Param {
                name: slot.name,
                value,
            });
        }
        groups[Group::Beta.index()].trainable = !stage.freezes_beta();
        Ok(Model {
            spec,
            groups,
            stage,
            seed,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn group(&self, g: Group) -> &ParamGroup<S> {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup<S> {
        &mut self.groups[g.index()]
    }

    pub fn groups(&self) -> &[ParamGroup<S>; 3] {
        &self.groups
    }

    pub fn set_trainable(&mut self, g: Group, trainable: bool) {
        self.groups[g.index()].trainable = trainable;
    }

    pub fn num_params(&self) -> usize {
        self.groups
            .iter()
            .flat_map(|g| &g.params)
            .map(|p| p.value.numel())
            .sum()
    }

    /// `(key, value)` for every parameter, keys `<group>.<layer>.<param>`.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<S>)> {
        self.groups.iter().flat_map(|g| {
            g.params
                .iter()
                .map(move |p| (format!("{}.{}", g.name.as_str(), p.name), &p.value))
        })
    }

    /// Replaces theta and nu with a freshly initialized head of `head_kind`
    /// and width `z_dim`, and freezes beta. Beta is copied bit-for-bit.
    pub fn reinit_head(&self, head_kind: HeadKind, z_dim: usize, seed: u64) -> Result<Self> {
        if head_kind == HeadKind::Stage1 {
            return Err(Error::Config("reinit_head needs a deterministic or gaussian head".into()));
        }
        let spec = self.spec.with_head(head_kind, z_dim);
        let mut fresh = Model::<S>::build(spec, seed)?;
        fresh.groups[Group::Beta.index()] = ParamGroup {
            trainable: false,
            ..self.groups[Group::Beta.index()].clone()
        };
        fresh.stage = match head_kind {
            HeadKind::Gaussian => StageTag::Vtst,
            _ => StageTag::Tst,
        };
        Ok(fresh)
    }

    pub fn bind(&self, tape: &Tape<S>) -> Bound {
        Bound {
            vars: Group::ALL.map(|g| {
                self.groups[g.index()]
                    .params
                    .iter()
                    .map(|p| tape.leaf(p.value.clone()))
                    .collect()
            }),
        }
    }

    /// Binds only the listed groups; the others get no tape nodes.
    pub fn bind_groups(&self, tape: &Tape<S>, groups: &[Group]) -> Bound {
        Bound {
            vars: Group::ALL.map(|g| {
                if !groups.contains(&g) {
                    return Vec::new();
                }
                self.groups[g.index()]
                    .params
                    .iter()
                    .map(|p| tape.leaf(p.value.clone()))
                    .collect()
            }),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expected = self.spec.extractor.input_shape();
        if shape.len() != expected.len() + 1 || shape[1..] != expected[..] {
            return Err(Error::dim(
                "model input",
                format!("got {shape:?}, expected [batch, {expected:?}]"),
            ));
        }
        Ok(())
    }

    /// Features `[batch × feature_dim]` from inputs `[batch, ..input_shape]`.
    pub fn forward_features(&self, tape: &Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        self.check_input(&shape)?;
        let beta = bound.group(Group::Beta);
        match &self.spec.extractor {
            ExtractorSpec::Dense { .. } => {
                let mut h = x;
                for layer in beta.chunks(2) {
                    h = tape.relu(dense(tape, h, layer)?)?;
                }
                Ok(h)
            }
            ExtractorSpec::SmallCnn { .. } => {
                let mut h = x;
                for layer in beta.chunks(2) {
                    h = tape.conv2d(h, layer[0], layer[1])?;
                    h = tape.maxpool2d(tape.relu(h)?)?;
                }
                let fd = self.spec.feature_dim()?;
                tape.reshape(h, vec![shape[0], fd])
            }
        }
    }

    /// Head output for a batch of features.
    pub fn forward_head(&self, tape: &Tape<S>, bound: &Bound, features: Var) -> Result<HeadOutput> {
        let theta = bound.group(Group::Theta);
        match self.spec.head_kind {
            HeadKind::Stage1 => {
                let mut h = features;
                for layer in theta.chunks(2) {
                    h = tape.relu(dense(tape, h, layer)?)?;
                }
                Ok(HeadOutput::Logits(self.forward_logits(tape, bound, h)?))
            }
            HeadKind::Deterministic => {
                let z = mlp2(tape, features, &theta[..4])?;
                Ok(HeadOutput::Logits(self.forward_logits(tape, bound, z)?))
            }
            HeadKind::Gaussian => {
                let mu = mlp2(tape, features, &theta[..4])?;
                let raw = mlp2(tape, features, &theta[4..8])?;
                let log_var = tape.log_sigmoid(raw)?;
                let sigma = tape.exp(tape.scale(log_var, S::of(0.5))?)?;
                Ok(HeadOutput::Gaussian { mu, log_var, sigma })
            }
        }
    }

    /// The nu layer: `z·W + b`.
    pub fn forward_logits(&self, tape: &Tape<S>, bound: &Bound, z: Var) -> Result<Var> {
        dense(tape, z, bound.group(Group::Nu))
    }

    /// Features for a batch of inputs, without keeping the tape.
    pub fn features(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let xv = tape.leaf(x.clone());
        let f = self.forward_features(&tape, &bound, xv)?;
        let out = tape.value(f).clone();
        Ok(out)
    }

    /// Logits of a deterministic-head model for precomputed features.
    pub fn logits_from_features(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let fv = tape.leaf(features.clone());
        match self.forward_head(&tape, &bound, fv)? {
            HeadOutput::Logits(l) => Ok(tape.value(l).clone()),
            HeadOutput::Gaussian { .. } => Err(Error::Contract(
                "gaussian heads have no deterministic logits; use predictive_mc".into(),
            )),
        }
    }

    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.logits_from_features(&self.features(x)?)
    }
}

/// `x·W + b` for a `[weight, bias]` pair.
fn dense<S: Scalar>(tape: &Tape<S>, x: Var, layer: &[Var]) -> Result<Var> {
    tape.add_row(tape.matmul(x, layer[0])?, layer[1])
}

/// Two dense layers with ReLU between them only.
fn mlp2<S: Scalar>(tape: &Tape<S>, x: Var, params: &[Var]) -> Result<Var> {
    let h = tape.relu(dense(tape, x, &params[..2])?)?;
    dense(tape, h, &params[2..4])
}
