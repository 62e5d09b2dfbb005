//! Classifier architectures and deterministic parameter initialisation.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    LenetMadry,
    MlpToy,
}

impl Architecture {
    pub fn tag(self) -> u32 {
        match self {
            Architecture::LenetMadry => 0,
            Architecture::MlpToy => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Architecture::LenetMadry),
            1 => Ok(Architecture::MlpToy),
            other => Err(Error::InvalidArgument(format!("unknown architecture tag {other}"))),
        }
    }

    pub fn default_init(self) -> InitScheme {
        InitScheme::HeUniform
    }
}

/// Layer sizes of the conv net: two SAME-padded 5x5 conv/relu/2x2-pool
/// stages followed by a 1024-unit hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LenetLayers {
    pub kernel: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub hidden: usize,
}

pub const LENET_MADRY: LenetLayers = LenetLayers {
    kernel: 5,
    conv1_filters: 32,
    conv2_filters: 64,
    hidden: 1024,
};

pub const MLP_TOY_HIDDEN: usize = 256;

/// Standard deviation of the truncated-normal initialiser.
pub const TRUNCATED_NORMAL_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// N(0, 0.1^2) resampled outside two standard deviations.
    TruncatedNormal,
    /// U(-sqrt(6 / fan_in), sqrt(6 / fan_in)) for weights and
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for biases.
    HeUniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub init_seed: u64,
    pub init_scheme: InitScheme,
    /// `[height, width, channels]`.
    pub input_shape: [usize; 3],
    pub class_count: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, init_seed: u64, input_shape: [usize; 3], class_count: usize) -> Self {
        Self {
            architecture,
            init_seed,
            init_scheme: architecture.default_init(),
            input_shape,
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "input_shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.architecture == Architecture::LenetMadry
            && (!self.input_shape[0].is_multiple_of(4) || !self.input_shape[1].is_multiple_of(4))
        {
            return Err(Error::InvalidArgument(format!(
                "lenet_madry needs height and width divisible by 4, got {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }
}

/// Names and shapes of every parameter tensor, in canonical order.
pub fn parameter_layout(arch: Architecture, input_shape: [usize; 3], classes: usize) -> Vec<(String, Vec<usize>)> {
    let [h, w, c] = input_shape;
    match arch {
        Architecture::LenetMadry => {
            let l = LENET_MADRY;
            let flat = (h / 4) * (w / 4) * l.conv2_filters;
            vec![
                ("conv1/kernel".into(), vec![l.kernel, l.kernel, c, l.conv1_filters]),
                ("conv1/bias".into(), vec![l.conv1_filters]),
                ("conv2/kernel".into(), vec![l.kernel, l.kernel, l.conv1_filters, l.conv2_filters]),
                ("conv2/bias".into(), vec![l.conv2_filters]),
                ("fc1/weight".into(), vec![flat, l.hidden]),
                ("fc1/bias".into(), vec![l.hidden]),
                ("fc2/weight".into(), vec![l.hidden, classes]),
                ("fc2/bias".into(), vec![classes]),
            ]
        }
        Architecture::MlpToy => vec![
            ("fc1/weight".into(), vec![h * w * c, MLP_TOY_HIDDEN]),
            ("fc1/bias".into(), vec![MLP_TOY_HIDDEN]),
            ("fc2/weight".into(), vec![MLP_TOY_HIDDEN, classes]),
            ("fc2/bias".into(), vec![classes]),
        ],
    }
}

/// Immutable parameter snapshot of a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    architecture: Architecture,
    class_count: usize,
    input_shape: [usize; 3],
    entries: Vec<(String, Arc<Tensor<S>>)>,
}

pub fn init_model<S: Scalar>(spec: &ModelSpec) -> Result<ModelParams<S>> {
    spec.validate()?;
    let layout = parameter_layout(spec.architecture, spec.input_shape, spec.class_count);
    let entries = layout
        .into_iter()
        .enumerate()
        .map(|(idx, (name, shape))| {
            let mut rng = rng::stream(spec.init_seed, &[rng::DOMAIN_INIT, idx as u64]);
            let n: usize = shape.iter().product();
            let is_bias = shape.len() == 1;
            let fan_in = if is_bias {
                // fan-in of the layer the bias belongs to
                n_fan_in_for_bias(spec, &name)
            } else {
                shape[..shape.len() - 1].iter().product()
            };
            let values: Vec<f32> = match spec.init_scheme {
                InitScheme::TruncatedNormal => {
                    let normal = Normal::new(0.0, TRUNCATED_NORMAL_STD).unwrap();
                    (0..n)
                        .map(|_| loop {
                            let v: f64 = normal.sample(&mut rng);
                            if v.abs() <= 2.0 * TRUNCATED_NORMAL_STD {
                                break v as f32;
                            }
                        })
                        .collect()
                }
                InitScheme::HeUniform => {
                    let limit = if is_bias {
                        1.0 / (fan_in as f64).sqrt()
                    } else {
                        (6.0 / fan_in as f64).sqrt()
                    };
                    let dist = Uniform::new(-limit, limit).unwrap();
                    (0..n).map(|_| rng.sample(dist) as f32).collect()
                }
            };
            let t = Tensor::new(shape, values.into_iter().map(|v| S::from_f64(v as f64)).collect())?;
            Ok((name, Arc::new(t)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams {
        architecture: spec.architecture,
        class_count: spec.class_count,
        input_shape: spec.input_shape,
        entries,
    })
}

fn n_fan_in_for_bias(spec: &ModelSpec, bias_name: &str) -> usize {
    let layer = bias_name.split('/').next().unwrap_or_default();
    parameter_layout(spec.architecture, spec.input_shape, spec.class_count)
        .into_iter()
        .find(|(n, s)| n.starts_with(layer) && s.len() > 1)
        .map(|(_, s)| s[..s.len() - 1].iter().product())
        .unwrap_or(1)
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Parameter leaves, in [`ModelParams::entries`] order.
    pub params: Vec<Var>,
}

impl<S: Scalar> ModelParams<S> {
    /// Assembles a parameter set, checking every name and shape against the
    /// architecture's layout.
    pub fn from_entries(
        architecture: Architecture,
        input_shape: [usize; 3],
        class_count: usize,
        entries: Vec<(String, Tensor<S>)>,
    ) -> Result<Self> {
        let layout = parameter_layout(architecture, input_shape, class_count);
        if layout.len() != entries.len() {
            return Err(Error::DimensionMismatch(format!(
                "{architecture:?} has {} tensors, got {}",
                layout.len(),
                entries.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            architecture,
            class_count,
            input_shape,
            entries: entries.into_iter().map(|(n, t)| (n, Arc::new(t))).collect(),
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn entries(&self) -> &[(String, Arc<Tensor<S>>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_ref())
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// New snapshot with the same layout and replaced tensors.
    pub fn with_tensors(&self, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|((n, _), t)| (n.clone(), t))
            .collect();
        Self::from_entries(self.architecture, self.input_shape, self.class_count, entries)
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            architecture: self.architecture,
            class_count: self.class_count,
            input_shape: self.input_shape,
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Arc::new(t.cast())))
                .collect(),
        }
    }

    /// Records the forward pass on `g`. Parameters become graph leaves so
    /// backward can reach both them and `x`.
    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<Forward> {
        let params = self.register(g);
        let logits = self.forward_with(g, &params, x)?;
        Ok(Forward { logits, params })
    }

    /// Adds every parameter to `g` as a leaf, in entry order.
    pub fn register(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.leaf(Arc::clone(t))).collect()
    }

    /// Forward pass reusing parameter leaves from [`ModelParams::register`],
    /// so several passes on one graph accumulate into the same gradients.
    pub fn forward_with(&self, g: &mut Graph<S>, params: &[Var], x: Var) -> Result<Var> {
        self.check_batch(g.value(x))?;
        if params.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter handles, got {}",
                self.entries.len(),
                params.len()
            )));
        }
        let logits = match self.architecture {
            Architecture::LenetMadry => {
                let h = g.conv2d(x, params[0], Padding::Same)?;
                let h = g.add_bias(h, params[1])?;
                let h = g.relu(h)?;
                let h = g.max_pool2x2(h)?;
                let h = g.conv2d(h, params[2], Padding::Same)?;
                let h = g.add_bias(h, params[3])?;
                let h = g.relu(h)?;
                let h = g.max_pool2x2(h)?;
                let h = g.flatten(h)?;
                let h = g.matmul(h, params[4])?;
                let h = g.add_bias(h, params[5])?;
                let h = g.relu(h)?;
                let h = g.matmul(h, params[6])?;
                g.add_bias(h, params[7])?
            }
            Architecture::MlpToy => {
                let h = g.flatten(x)?;
                let h = g.matmul(h, params[0])?;
                let h = g.add_bias(h, params[1])?;
                let h = g.relu(h)?;
                let h = g.matmul(h, params[2])?;
                g.add_bias(h, params[3])?
            }
        };
        Ok(logits)
    }

    /// Logits for a batch without keeping a graph around.
    pub fn logits(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let x = g.leaf(batch.clone());
        let f = self.forward(&mut g, x)?;
        Ok(g.value(f.logits).clone())
    }

    pub fn predict(&self, batch: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::shape(
                "forward_logits",
                format!("batch {s:?} does not match input shape {:?}", self.input_shape),
            ));
        }
        let tol = S::from_f64(1e-5);
        if let Some(i) = batch
            .data()
            .iter()
            .position(|&v| !(v >= -tol && v <= S::one() + tol))
        {
            return Err(Error::InvalidArgument(format!(
                "forward_logits: pixel {} at flat index {i} outside [0, 1]",
                batch.data()[i]
            )));
        }
        Ok(())
    }
}
