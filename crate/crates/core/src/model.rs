//! Feed-forward classifiers and their checkpoint format.
//!
//! Layers compute `x · W + b` with `W` stored `[in×out]`; hidden layers use
//! ReLU. The flat parameter ordering is layer by layer, weight (row-major)
//! then bias, and is shared by [`Mlp::flatten_params`] and
//! [`BoundMlp::flatten_grads`].

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};
use crate::util::write_atomic;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Which parameters a flattened gradient covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradScope {
    #[default]
    AllParams,
    LastLayer,
}

impl Mlp {
    /// He-initialized network (`N(0, 2/fan_in)` weights, zero biases).
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out).map(|_| rng.normal() * std).collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, weight).expect("sized above"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Parameter("an MLP needs at least one layer".into()))?;
        let mut dims = vec![first.weight.rows()];
        for (i, l) in layers.iter().enumerate() {
            let (fan_in, fan_out) = match l.weight.shape() {
                &[a, b] => (a, b),
                s => return Err(Error::Dimension(format!("layer {i} weight has shape {s:?}"))),
            };
            if fan_in != *dims.last().unwrap() || l.bias.shape() != [fan_out] {
                return Err(Error::Dimension(format!(
                    "layer {i}: weight {:?} and bias {:?} do not chain",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            dims.push(fan_out);
        }
        Ok(Self { dims, layers })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Parameter(format!(
                "layer dims must list ≥2 positive widths, got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            &[_, d] if d == self.input_dim() => Ok(()),
            s => Err(Error::Dimension(format!(
                "input has shape {s:?}, model expects {} columns",
                self.input_dim()
            ))),
        }
    }

    /// Raw logits `[batch×c]`, computed without a tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?.add_row(&l.bias)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Post-ReLU activations feeding the final linear layer.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        if self.layers.len() < 2 {
            return Err(Error::Parameter("model has no hidden layer to read features from".into()));
        }
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers[..self.layers.len() - 1] {
            h = h.matmul(&l.weight)?.add_row(&l.bias)?.relu();
        }
        Ok(h)
    }

    /// Applies only the final linear layer to precomputed features.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let l = self.layers.last().unwrap();
        features.matmul(&l.weight)?.add_row(&l.bias)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        BoundMlp { params }
    }

    /// Same as [`Mlp::bind`] but without gradient tracking (frozen models).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
            .collect();
        BoundMlp { params }
    }

    pub fn flatten_params(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        Tensor::vector(out)
    }

    /// Inverse of [`Mlp::flatten_params`].
    pub fn unflatten_params(&mut self, flat: &Tensor) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, model has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }
}

/// Parameter leaves of an [`Mlp`] on a specific tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    params: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.params.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.params.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> &[(Var, Var)] {
        &self.params
    }

    pub fn flatten_grads(&self, tape: &Tape) -> Result<Tensor> {
        self.flatten_grads_scoped(tape, GradScope::AllParams)
    }

    pub fn flatten_grads_scoped(&self, tape: &Tape, scope: GradScope) -> Result<Tensor> {
        let layers = match scope {
            GradScope::AllParams => &self.params[..],
            GradScope::LastLayer => &self.params[self.params.len() - 1..],
        };
        let mut out = Vec::new();
        for (i, &(w, b)) in layers.iter().enumerate() {
            for v in [w, b] {
                let g = tape
                    .grad(v)
                    .ok_or_else(|| Error::State(format!("layer {i} has no gradient; run backward first")))?;
                out.extend_from_slice(g.data());
            }
        }
        Ok(Tensor::vector(out))
    }

    /// Per-layer (weight grad, bias grad), in layer order.
    pub fn grads(&self, tape: &Tape) -> Result<Vec<(Tensor, Tensor)>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, &(w, b))| {
                let get = |v| {
                    tape.grad(v)
                        .cloned()
                        .ok_or_else(|| Error::State(format!("layer {i} has no gradient; run backward first")))
                };
                Ok((get(w)?, get(b)?))
            })
            .collect()
    }
}

/// Row-wise softmax of `logits / tau`, max-stabilized.
pub fn softened(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(logits.scale(1.0 / tau).log_softmax_rows()?.map(f64::exp))
}

/// Argmax per row; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    Biased,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Biased => "biased",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            "biased" => Ok(Role::Biased),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub role: Role,
    pub debiased: bool,
}

pub const CHECKPOINT_HEADER: &str = "AGREKD-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Text checkpoint: header, `key value` metadata, one line per tensor
/// (`name dims values...`), then `end`. Floats use Rust's shortest
/// round-trip formatting, so loading reproduces every bit.
pub fn save(model: &Mlp, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_HEADER} v{CHECKPOINT_VERSION}");
    let _ = writeln!(s, "seed {}", meta.seed);
    let _ = writeln!(s, "epochs {}", meta.epochs);
    let _ = writeln!(s, "role {}", meta.role);
    let _ = writeln!(s, "debiased {}", meta.debiased);
    let dims: Vec<String> = model.dims().iter().map(usize::to_string).collect();
    let _ = writeln!(s, "layer_dims {}", dims.join(" "));
    for (i, l) in model.layers().iter().enumerate() {
        for (name, t) in [("weight", &l.weight), ("bias", &l.bias)] {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = write!(s, "layer{i}.{name} {}", shape.join("x"));
            for v in t.data() {
                let _ = write!(s, " {v:e}");
            }
            s.push('\n');
        }
    }
    s.push_str("end\n");
    write_atomic(path, s.as_bytes())
}

pub fn load(path: &Path) -> Result<(Mlp, CheckpointMeta)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    let mut lines = text.lines();

    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let version = header
        .strip_prefix(CHECKPOINT_HEADER)
        .map(str::trim)
        .ok_or_else(|| bad(format!("missing `{CHECKPOINT_HEADER}` header")))?;
    let expected = format!("v{CHECKPOINT_VERSION}");
    if version != expected {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected,
            found: version.to_string(),
        });
    }

    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
    };
    let seed = field("seed")?.parse().map_err(|e| bad(format!("seed: {e}")))?;
    let epochs = field("epochs")?.parse().map_err(|e| bad(format!("epochs: {e}")))?;
    let role = field("role")?.parse().map_err(bad)?;
    let debiased = field("debiased")?.parse().map_err(|e| bad(format!("debiased: {e}")))?;
    let dims: Vec<usize> = field("layer_dims")?
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("layer_dims: {e}")))?;
    if dims.len() < 2 {
        return Err(bad(format!("layer_dims lists {} widths", dims.len())));
    }

    let mut read_tensor = |name: String, shape: Vec<usize>| -> Result<Tensor> {
        let line = lines.next().ok_or_else(|| bad(format!("truncated before `{name}`")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(name.as_str()) {
            return Err(bad(format!("expected `{name}`, found `{line:.40}`")));
        }
        let want: Vec<String> = shape.iter().map(usize::to_string).collect();
        let got = parts.next().unwrap_or("");
        if got != want.join("x") {
            return Err(bad(format!("`{name}` has shape `{got}`, layer_dims imply `{}`", want.join("x"))));
        }
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("`{name}`: {e}")))?;
        Tensor::new(shape, values).map_err(|e| bad(format!("`{name}`: {e}")))
    };
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, w) in dims.windows(2).enumerate() {
        let weight = read_tensor(format!("layer{i}.weight"), vec![w[0], w[1]])?;
        let bias = read_tensor(format!("layer{i}.bias"), vec![w[1]])?;
        layers.push(Layer { weight, bias });
    }
    if lines.next() != Some("end") {
        return Err(bad("missing `end` marker (truncated?)".into()));
    }
    let model = Mlp::from_layers(layers)?;
    Ok((
        model,
        CheckpointMeta {
            seed,
            epochs,
            role,
            debiased,
        },
    ))
}
