//! Small classifiers `h_θ`: a fully connected network and a compact CNN
//! (conv–relu–pool blocks and a linear head, no normalization layers), plus
//! the cross-entropy criterion, the error-rate metric and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Smallcnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input shape `(C, H, W)`.
    pub input: [usize; 3],
    pub num_classes: usize,
    /// Hidden widths of the MLP; empty means a single linear layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Output channels of each 3×3 conv block of the CNN.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Width of the CNN's hidden linear layer.
    #[serde(default = "default_fc_hidden")]
    pub fc_hidden: usize,
}

fn default_channels() -> Vec<usize> {
    vec![8, 16]
}

fn default_fc_hidden() -> usize {
    32
}

impl ModelSpec {
    /// Two conv blocks (8 → 16 channels) and a 32-unit hidden layer.
    pub fn smallcnn(input: [usize; 3], num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Smallcnn,
            input,
            num_classes,
            hidden: Vec::new(),
            channels: default_channels(),
            fc_hidden: default_fc_hidden(),
        }
    }

    pub fn mlp(input: [usize; 3], hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input,
            num_classes,
            hidden,
            channels: Vec::new(),
            fc_hidden: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::config("model.input", "dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least two classes"));
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.hidden.contains(&0) {
                    return Err(Error::config("model.hidden", "widths must be positive"));
                }
            }
            ModelKind::Smallcnn => {
                if self.channels.is_empty() || self.channels.contains(&0) {
                    return Err(Error::config("model.channels", "need at least one positive channel count"));
                }
                if self.fc_hidden == 0 {
                    return Err(Error::config("model.fc_hidden", "must be positive"));
                }
                let (h, w) = self.pooled_hw();
                if h == 0 || w == 0 {
                    return Err(Error::config(
                        "model.channels",
                        format!("{} pooling stages shrink a {}×{} input to nothing", self.channels.len(), self.input[1], self.input[2]),
                    ));
                }
            }
        }
        Ok(())
    }

    fn pooled_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for _ in &self.channels {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    /// Names and shapes of every parameter tensor, in forward order.
    /// Linear weights are stored `(in, out)`.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let linear = |out: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize| {
            out.push((format!("{name}.weight"), vec![i, o]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        match self.kind {
            ModelKind::Mlp => {
                let mut width = self.input_dim();
                for (l, &h) in self.hidden.iter().enumerate() {
                    linear(&mut out, &format!("fc{}", l + 1), width, h);
                    width = h;
                }
                linear(&mut out, &format!("fc{}", self.hidden.len() + 1), width, self.num_classes);
            }
            ModelKind::Smallcnn => {
                let mut c_in = self.input[0];
                for (l, &c) in self.channels.iter().enumerate() {
                    out.push((format!("conv{}.weight", l + 1), vec![c, c_in, 3, 3]));
                    out.push((format!("conv{}.bias", l + 1), vec![c]));
                    c_in = c;
                }
                let (h, w) = self.pooled_hw();
                linear(&mut out, "fc1", c_in * h * w, self.fc_hidden);
                linear(&mut out, "fc2", self.fc_hidden, self.num_classes);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// He-uniform weights (`±√(6 / fan_in)`) and zero biases.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = match shape.len() {
                    4 => shape[1] * shape[2] * shape[3],
                    _ => shape[0],
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            set.push(name, &shape, data)?;
        }
        Ok(set)
    }

    /// Logits `(batch, C)` for a `(batch, C_in, H, W)` input.
    pub fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, (_, s))| p.shape() != s.as_slice()) {
            let got: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
            return Err(Error::Shape {
                op: "forward",
                shapes: got,
            });
        }
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input {
            return Err(Error::shape("forward", &[s, &self.input]));
        }
        let batch = s[0];
        match self.kind {
            ModelKind::Mlp => {
                let mut h = x.reshape(&[batch, self.input_dim()])?;
                let layers = params.len() / 2;
                for l in 0..layers {
                    h = h.matmul(&params[2 * l])?.add(&params[2 * l + 1])?;
                    if l + 1 < layers {
                        h = h.relu();
                    }
                }
                Ok(h)
            }
            ModelKind::Smallcnn => {
                let mut h = x.clone();
                let blocks = self.channels.len();
                for l in 0..blocks {
                    let (w, b) = (&params[2 * l], &params[2 * l + 1]);
                    let bias = b.reshape(&[1, b.numel(), 1, 1])?;
                    h = h.conv2d(w, 1)?.add(&bias)?.relu().max_pool2d(2)?;
                }
                let flat = h.numel() / batch;
                let h = h.reshape(&[batch, flat])?;
                let p = &params[2 * blocks..];
                let h = h.matmul(&p[0])?.add(&p[1])?.relu();
                h.matmul(&p[2])?.add(&p[3])
            }
        }
    }
}

/// Free function form of [`ModelSpec::forward`].
pub fn forward(spec: &ModelSpec, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
    spec.forward(params, x)
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    logits.cross_entropy(labels)
}

/// Predicted class per row; ties go to the lowest index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of rows whose arg-max differs from the label.
pub fn error_rate(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = predictions(logits).iter().zip(labels).filter(|(p, l)| p != l).count();
    wrong as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the binary, in f32 elements.
    pub offset: usize,
    pub len: usize,
}

/// JSON sidecar describing a checkpoint binary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dtype: String,
    pub byte_order: String,
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    pub total_len: usize,
}

const CHECKPOINT_FORMAT: &str = "hyperaug-checkpoint-v1";

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `params` as little-endian f32 to `bin` and a sidecar next to it
/// (same stem, `.json` extension). Returns the sidecar path.
pub fn save_checkpoint(bin: &Path, spec: &ModelSpec, params: &ParamSet) -> Result<PathBuf> {
    let mut tensors = Vec::new();
    let mut bytes = Vec::with_capacity(params.total_dim() * 4);
    let mut offset = 0;
    for t in params.tensors() {
        for &v in &t.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.data.len(),
        });
        offset += t.data.len();
    }
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        spec: spec.clone(),
        tensors,
        total_len: offset,
    };
    fs::write(bin, &bytes).map_err(|e| Error::io(bin, e))?;
    let side = sidecar_path(bin);
    fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(side)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(bin: &Path) -> Result<(ModelSpec, ParamSet)> {
    let side = sidecar_path(bin);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != CHECKPOINT_FORMAT || meta.dtype != "f32" || meta.byte_order != "little" {
        return Err(Error::Format {
            what: "checkpoint sidecar",
            offset: 0,
            message: format!("unsupported format {} / {} / {}", meta.format, meta.dtype, meta.byte_order),
        });
    }
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() != meta.total_len * 4 {
        return Err(Error::Format {
            what: "checkpoint",
            offset: bytes.len().min(meta.total_len * 4) as u64,
            message: format!("expected {} bytes, found {}", meta.total_len * 4, bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let mut params = ParamSet::new();
    for e in &meta.tensors {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len()).ok_or(Error::Format {
            what: "checkpoint sidecar",
            offset: 0,
            message: format!("tensor {} exceeds the binary", e.name),
        })?;
        params.push(e.name.clone(), &e.shape, values[e.offset..end].to_vec())?;
    }
    let expected: Vec<(String, Vec<usize>)> = meta.spec.param_shapes();
    let got: Vec<(String, Vec<usize>)> = params.tensors().iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != got {
        return Err(Error::Format {
            what: "checkpoint sidecar",
            offset: 0,
            message: "tensor list does not match the model spec".into(),
        });
    }
    Ok((meta.spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallcnn_parameter_count() {
        let spec = ModelSpec::smallcnn([1, 28, 28], 10);
        // conv 8·9+8, conv 16·8·9+16, fc 784·32+32, fc 32·10+10
        assert_eq!(spec.num_params(), 80 + 1168 + 25120 + 330);
        let small = ModelSpec::smallcnn([1, 16, 16], 10);
        assert_eq!(small.param_shapes()[4].1, vec![256, 32]);
    }

    #[test]
    fn validation_rejects_tiny_inputs() {
        let mut spec = ModelSpec::smallcnn([1, 3, 3], 10);
        assert!(spec.validate().is_err());
        spec.input = [1, 4, 4];
        assert!(spec.validate().is_ok());
        assert!(ModelSpec::mlp([1, 2, 2], vec![0], 3).validate().is_err());
    }

    #[test]
    fn predictions_break_ties_low() {
        let t = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(predictions(&t), vec![0, 1]);
    }
}
