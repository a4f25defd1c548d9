//! Classification heads on frozen embeddings.
//!
//! Three variants share the same first branch layout:
//!
//! - **ERM**: `f → linear(d₁) → affine classifier`.
//! - **HypERM**: `f → linear(d₁) → clip(r) → exp₀ → hyperbolic MLR`.
//! - **HypCBC**: HypERM plus a second, low-dimensional (`d₂`) hyperbolic
//!   branch. Both branches are trained with cross-entropy and tied by a
//!   temperature-scaled KL term from branch 2 (teacher) to branch 1. Only
//!   branch 1 is used for prediction.
//!
//! Parameters live in a name → tensor map so the optimizer and the
//! checkpoint container can treat them uniformly:
//!
//! | name             | shape      | present for        |
//! |------------------|------------|--------------------|
//! | `b1.proj.weight` | `[d₁, n]`  | all                |
//! | `b1.proj.bias`   | `[d₁]`     | all                |
//! | `b1.fc.weight`   | `[K, d₁]`  | ERM                |
//! | `b1.fc.bias`     | `[K]`      | ERM                |
//! | `b1.mlr.p`       | `[K, d₁]`  | HypERM, HypCBC     |
//! | `b1.mlr.a`       | `[K, d₁]`  | HypERM, HypCBC     |
//! | `b2.*`           | as above   | HypCBC (`d₂`)      |

mod checkpoint;
pub mod loss;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{ce_loss, kl_consistency, softmax_with_temperature, total_loss, LossWeights};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::geometry::{kernels, ClipRadius, Curvature};
use crate::rng::SplitMix64;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Hyperm,
    Hypcbc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Hyperm => "hyperm",
            Method::Hypcbc => "hypcbc",
        }
    }

    pub fn is_hyperbolic(self) -> bool {
        !matches!(self, Method::Erm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Method::Erm),
            "hyperm" => Ok(Method::Hyperm),
            "hypcbc" => Ok(Method::Hypcbc),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Architecture of a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub method: Method,
    pub input_dim: usize,
    pub d1: usize,
    pub d2: usize,
    pub num_classes: usize,
    pub curvature: f64,
    pub clip_radius: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d1 == 0 {
            return Err(Error::Config("input width and d1 must be positive".into()));
        }
        if self.method == Method::Hypcbc && self.d2 == 0 {
            return Err(Error::Config("hypcbc requires d2 ≥ 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Curvature::new(self.curvature)?;
        ClipRadius::new(self.clip_radius)?;
        Ok(())
    }

    /// Branch widths; branch 2 only exists for HypCBC.
    pub fn branch_dims(&self) -> Vec<usize> {
        match self.method {
            Method::Hypcbc => vec![self.d1, self.d2],
            _ => vec![self.d1],
        }
    }
}

/// Borrowed view of a projection head `h(f) = W f + b`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
}

/// Borrowed view of hyperbolic MLR parameters: per-class offsets `p_k`
/// (rows inside the ball) and normals `a_k`.
#[derive(Debug, Clone, Copy)]
pub struct HyperbolicMlr<'a> {
    pub offsets: &'a Tensor,
    pub normals: &'a Tensor,
}

/// Eager output of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    /// Clipped Euclidean projection `h` before the exponential map.
    pub h: Tensor,
    /// Ball embeddings `exp₀(clip(h))`; `None` for the Euclidean head.
    pub z: Option<Tensor>,
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Tape handles of one recorded branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub h: Var,
    pub z: Option<Var>,
    pub logits: Var,
}

/// A recorded forward pass over a batch.
#[derive(Debug)]
pub struct Recorded {
    pub tape: Tape,
    pub params: BTreeMap<String, Var>,
    pub branches: Vec<BranchVars>,
}

/// Per-term values of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce1: f64,
    pub ce2: f64,
    pub kl: f64,
}

fn stream_id(name: &str) -> u64 {
    // FNV-1a, so every parameter draws from its own stream and variants
    // that share a parameter name share its initial value.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn uniform_tensor(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor {
    let mut rng = SplitMix64::stream(seed, stream_id(name));
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Deterministic initialisation. Projection weights and biases are
/// `U(−1/√n, 1/√n)`; MLR normals and affine classifiers are
/// `U(−1/√d, 1/√d)` for branch width `d`; MLR offsets start at the origin.
pub fn init_params(seed: u64, spec: ModelSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut tensors = BTreeMap::new();
    let n = spec.input_dim;
    let k = spec.num_classes;
    let proj_bound = 1.0 / (n as f64).sqrt();
    for (bi, &d) in spec.branch_dims().iter().enumerate() {
        let b = bi + 1;
        for (suffix, shape) in [("proj.weight", vec![d, n]), ("proj.bias", vec![d])] {
            let name = format!("b{b}.{suffix}");
            tensors.insert(name.clone(), uniform_tensor(seed, &name, &shape, proj_bound));
        }
        let cls_bound = 1.0 / (d as f64).sqrt();
        if spec.method.is_hyperbolic() {
            tensors.insert(format!("b{b}.mlr.p"), Tensor::zeros(&[k, d]));
            let name = format!("b{b}.mlr.a");
            tensors.insert(name.clone(), uniform_tensor(seed, &name, &[k, d], cls_bound));
        } else {
            for (suffix, shape) in [("fc.weight", vec![k, d]), ("fc.bias", vec![k])] {
                let name = format!("b{b}.{suffix}");
                tensors.insert(name.clone(), uniform_tensor(seed, &name, &shape, cls_bound));
            }
        }
    }
    Ok(ModelParams { spec, tensors })
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Records `logits = MLR(exp₀(clip(head(f))))` on `tape`.
fn record_hyperbolic_branch(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    p: Var,
    a: Var,
    c: f64,
    r: f64,
) -> Result<BranchVars> {
    let h = tape.linear(x, w, Some(b))?;
    let hc = tape.clip_rows(h, r)?;
    let z = tape.expmap0_rows(hc, c)?;
    let logits = tape.hyp_mlr(z, p, a, c)?;
    Ok(BranchVars {
        h: hc,
        z: Some(z),
        logits,
    })
}

/// Eager single-branch forward: `h = head(f)`, clipped to `r`, mapped with
/// `exp₀`, scored by the hyperbolic MLR.
pub fn forward_branch(
    f: &Tensor,
    head: ProjectionHead<'_>,
    mlr: HyperbolicMlr<'_>,
    c: Curvature,
    r: ClipRadius,
) -> Result<BranchOutput> {
    if f.rank() != 2 || head.weight.rank() != 2 || f.cols() != head.weight.cols() {
        return Err(Error::Shape(format!(
            "embedding batch {:?} does not match projection weight {:?}",
            f.shape(),
            head.weight.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let w = tape.constant(head.weight.clone());
    let b = tape.constant(head.bias.clone());
    let p = tape.constant(mlr.offsets.clone());
    let a = tape.constant(mlr.normals.clone());
    let vars = record_hyperbolic_branch(&mut tape, x, w, b, p, a, c.value(), r.value())?;
    Ok(BranchOutput {
        h: tape.value(vars.h).clone(),
        z: vars.z.map(|z| tape.value(z).clone()),
        logits: tape.value(vars.logits).clone(),
    })
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn num_branches(&self) -> usize {
        self.spec.branch_dims().len()
    }

    pub fn head(&self, branch: usize) -> Result<ProjectionHead<'_>> {
        Ok(ProjectionHead {
            weight: self.get(&format!("b{branch}.proj.weight"))?,
            bias: self.get(&format!("b{branch}.proj.bias"))?,
        })
    }

    pub fn mlr(&self, branch: usize) -> Result<HyperbolicMlr<'_>> {
        Ok(HyperbolicMlr {
            offsets: self.get(&format!("b{branch}.mlr.p"))?,
            normals: self.get(&format!("b{branch}.mlr.a"))?,
        })
    }

    /// Checks that every expected tensor is present with the right shape.
    pub fn validate(&self) -> Result<()> {
        let reference = init_params(0, self.spec)?;
        for (name, t) in &reference.tensors {
            let have = self.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        if self.tensors.len() != reference.tensors.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(())
    }

    /// Records the forward pass of every branch for the batch `x`.
    /// Parameters are trainable leaves when `trainable` is set.
    pub fn record(&self, x: &Tensor, trainable: bool) -> Result<Recorded> {
        if x.rank() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "batch of shape {:?} for a model with input width {}",
                x.shape(),
                self.spec.input_dim
            )));
        }
        let mut tape = Tape::new();
        let mut params = BTreeMap::new();
        for (name, t) in &self.tensors {
            params.insert(name.clone(), tape.leaf(t.clone(), trainable));
        }
        let xv = tape.constant(x.clone());
        let (c, r) = (self.spec.curvature, self.spec.clip_radius);
        let mut branches = Vec::new();
        for b in 1..=self.num_branches() {
            let v = |n: &str| params[&format!("b{b}.{n}")];
            let vars = if self.spec.method.is_hyperbolic() {
                record_hyperbolic_branch(&mut tape, xv, v("proj.weight"), v("proj.bias"), v("mlr.p"), v("mlr.a"), c, r)?
            } else {
                let h = tape.linear(xv, v("proj.weight"), Some(v("proj.bias")))?;
                let logits = tape.linear(h, v("fc.weight"), Some(v("fc.bias")))?;
                BranchVars { h, z: None, logits }
            };
            branches.push(vars);
        }
        Ok(Recorded {
            tape,
            params,
            branches,
        })
    }

    /// Eager outputs of every branch.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<BranchOutput>> {
        let rec = self.record(x, false)?;
        Ok(rec
            .branches
            .iter()
            .map(|b| BranchOutput {
                h: rec.tape.value(b.h).clone(),
                z: b.z.map(|z| rec.tape.value(z).clone()),
                logits: rec.tape.value(b.logits).clone(),
            })
            .collect())
    }

    /// Branch-1 logits, the only scores used at inference.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let rec = self.record(x, false)?;
        Ok(rec.tape.value(rec.branches[0].logits).clone())
    }

    /// The training objective on one batch and its gradient for every
    /// parameter: `CE(ŷ₁) [+ CE(ŷ₂) + λ·T²·KL(σ(ŷ₂;T) ‖ σ(ŷ₁;T))]`.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        labels: &[usize],
        weights: LossWeights,
    ) -> Result<(LossParts, BTreeMap<String, Tensor>)> {
        let mut rec = self.record(x, true)?;
        let (loss, parts) = loss::record_objective(&mut rec.tape, &rec.branches, labels, weights)?;
        let grads = rec.tape.backward(loss, &Tensor::scalar(1.0))?;
        let out = rec
            .params
            .iter()
            .map(|(name, v)| (name.clone(), grads.wrt(*v)))
            .collect();
        Ok((parts, out))
    }

    /// Pulls every MLR offset row back inside the ball margin.
    pub fn project_offsets(&mut self) {
        let c = self.spec.curvature;
        for (name, t) in self.tensors.iter_mut() {
            if name.ends_with(".mlr.p") {
                let cols = t.cols();
                for row in t.data_mut().chunks_mut(cols) {
                    kernels::project(row, c);
                }
            }
        }
    }

    /// Copy with every value rounded to `f32`, the checkpoint precision.
    pub fn rounded_to_f32(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let data = t.data().iter().map(|&v| v as f32 as f64).collect();
                (n.clone(), Tensor::from_parts(t.shape().to_vec(), data))
            })
            .collect();
        Self {
            spec: self.spec,
            tensors,
        }
    }

    pub fn norms(&self) -> BTreeMap<String, f64> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.norm())).collect()
    }
}
