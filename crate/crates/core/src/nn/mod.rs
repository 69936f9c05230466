//! Small plain conv+relu networks whose penultimate feature map is projected
//! by the classifier weights at every spatial position.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

pub use checkpoint::Checkpoint;

/// Architecture of a [`ConvNet`].
///
/// Every stage is a 3x3 convolution (padding 1) followed by relu. The last
/// stage's output is the penultimate feature map `f(x)` of shape
/// `[feature_channels, spatial_size, spatial_size]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvNetSpec {
    /// `(out_channels, stride)` per stage.
    pub stages: Vec<(usize, usize)>,
    pub feature_channels: usize,
    pub spatial_size: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl ConvNetSpec {
    /// Four-stage, 128-channel teacher.
    pub fn teacher(num_classes: usize, input_size: usize, spatial_size: usize) -> Result<Self> {
        let strides = stage_strides(input_size, spatial_size, 4)?;
        let channels = [8, 16, 32, 128];
        Self::new(channels.into_iter().zip(strides).collect(), num_classes, input_size, spatial_size)
    }

    /// Three-stage, 64-channel student.
    pub fn student(num_classes: usize, input_size: usize, spatial_size: usize) -> Result<Self> {
        let strides = stage_strides(input_size, spatial_size, 3)?;
        let channels = [8, 16, 64];
        Self::new(channels.into_iter().zip(strides).collect(), num_classes, input_size, spatial_size)
    }

    pub fn new(stages: Vec<(usize, usize)>, num_classes: usize, input_size: usize, spatial_size: usize) -> Result<Self> {
        let spec = ConvNetSpec {
            feature_channels: stages.last().map(|s| s.0).unwrap_or(0),
            stages,
            spatial_size,
            num_classes,
            input_channels: 3,
            input_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|&(c, s)| c == 0 || s == 0) {
            return Err(Error::config(format!("invalid stages {:?}", self.stages)));
        }
        if self.stages.last().map(|s| s.0) != Some(self.feature_channels) {
            return Err(Error::config("feature_channels must equal the last stage's channels"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !self.spatial_size.is_power_of_two() {
            return Err(Error::config(format!("spatial size {} is not a power of two", self.spatial_size)));
        }
        if self.output_size(self.input_size)? != self.spatial_size {
            return Err(Error::config(format!(
                "input size {} with strides {:?} does not produce a {}x{} feature map",
                self.input_size,
                self.stages.iter().map(|s| s.1).collect::<Vec<_>>(),
                self.spatial_size,
                self.spatial_size
            )));
        }
        Ok(())
    }

    /// Spatial extent after all stages, requiring every stride to divide evenly.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        self.stages.iter().try_fold(input, |h, &(_, s)| {
            if h % s != 0 {
                Err(Error::dim("forward_features", format!("size {h} not divisible by stride {s}")))
            } else {
                Ok(h / s)
            }
        })
    }

    /// Canonical parameter names, in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(2 * self.stages.len() + 1);
        for i in 0..self.stages.len() {
            names.push(format!("stage{i}.weight"));
            names.push(format!("stage{i}.bias"));
        }
        names.push("classifier.weight".into());
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut cin = self.input_channels;
        for &(c, _) in &self.stages {
            shapes.push(vec![c, cin, 3, 3]);
            shapes.push(vec![c]);
            cin = c;
        }
        shapes.push(vec![self.feature_channels, self.num_classes]);
        shapes
    }
}

fn stage_strides(input_size: usize, spatial_size: usize, stages: usize) -> Result<Vec<usize>> {
    if spatial_size == 0 || !input_size.is_multiple_of(spatial_size) || !(input_size / spatial_size).is_power_of_two() {
        return Err(Error::config(format!(
            "cannot reduce {input_size} to {spatial_size} with stride-2 stages"
        )));
    }
    let halvings = (input_size / spatial_size).trailing_zeros() as usize;
    if halvings > stages {
        return Err(Error::config(format!(
            "{stages} stages cannot downsample {input_size} to {spatial_size}"
        )));
    }
    Ok((0..stages).map(|i| if i < halvings { 2 } else { 1 }).collect())
}

/// Per-position class scores `[batch, K, w, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    values: Tensor,
}

impl LogitMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::dim("logit_map", format!("expected [B,K,w,w], got {s:?}")));
        }
        if !values.is_finite() {
            return Err(Error::dim("logit_map", "non-finite logits"));
        }
        Ok(LogitMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Parameters plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub spec: ConvNetSpec,
    pub params: Vec<Tensor>,
}

impl ConvNet {
    /// Kaiming-uniform fan-in weights and zero biases.
    pub fn init<R: Rng + ?Sized>(spec: ConvNetSpec, rng: &mut R) -> Self {
        let shapes = spec.param_shapes();
        let last = shapes.len() - 1;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = if i == last { shape[0] } else { shape[1..].iter().product() };
                // relu gain for conv stages, unit gain for the linear classifier
                let gain = if i == last { 1.0 } else { 2.0f64.sqrt() };
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, rng)
            })
            .collect();
        ConvNet { spec, params }
    }

    pub fn from_params(spec: ConvNetSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::config(format!("expected {} tensors, got {}", shapes.len(), params.len())));
        }
        for (name, (want, got)) in spec.param_names().iter().zip(shapes.iter().zip(&params)) {
            if want.as_slice() != got.shape() {
                return Err(Error::shape("load parameter", want, got.shape()));
            }
            if !got.is_finite() {
                return Err(Error::config(format!("parameter {name} has non-finite values")));
            }
        }
        Ok(ConvNet { spec, params })
    }

    /// Adds every parameter to `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    pub fn classifier(&self, params: &[Var]) -> Var {
        params[params.len() - 1]
    }

    /// Penultimate feature map `[B, c, w, w]`.
    pub fn forward_features(&self, g: &mut Graph, params: &[Var], images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.spec.input_channels || s[2] != s[3] {
            return Err(Error::dim(
                "forward_features",
                format!("expected [B,{},H,H] images, got {s:?}", self.spec.input_channels),
            ));
        }
        self.spec.output_size(s[2])?;
        let mut h = images;
        for (i, &(_, stride)) in self.spec.stages.iter().enumerate() {
            let z = g.conv2d(h, params[2 * i], params[2 * i + 1], stride, 1)?;
            h = g.relu(z);
        }
        Ok(h)
    }

    /// Spatial logit map `[B, K, w, w]`.
    pub fn forward_logit_map(&self, g: &mut Graph, params: &[Var], images: Var) -> Result<Var> {
        let f = self.forward_features(g, params, images)?;
        project_logit_map(g, f, self.classifier(params))
    }

    /// Gradient-free logit map for evaluation.
    pub fn logit_map(&self, images: &Tensor) -> Result<LogitMap> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let m = self.forward_logit_map(&mut g, &params, x)?;
        LogitMap::new(g.value(m).clone())
    }
}

/// Applies the classifier `w[c, K]` at every position of `features[B, c, h, w]`.
pub fn project_logit_map(g: &mut Graph, features: Var, w: Var) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let ws = g.shape(w).to_vec();
    if fs.len() != 4 || ws.len() != 2 || fs[1] != ws[0] {
        return Err(Error::shape("project_logit_map", &fs, &ws));
    }
    let (b, c, h, wd, k) = (fs[0], fs[1], fs[2], fs[3], ws[1]);
    let t = g.permute(features, &[0, 2, 3, 1])?;
    let flat = g.reshape(t, &[b * h * wd, c])?;
    let z = g.matmul(flat, w)?;
    let z = g.reshape(z, &[b, h, wd, k])?;
    g.permute(z, &[0, 3, 1, 2])
}

/// Spatial average of a logit map: `[B, K, w, w] -> [B, K]`.
pub fn global_logits(g: &mut Graph, map: Var) -> Result<Var> {
    if g.shape(map).len() != 4 {
        return Err(Error::dim("global_logits", format!("expected rank 4, got {:?}", g.shape(map))));
    }
    let rows = g.mean_axis(map, 3)?;
    g.mean_axis(rows, 2)
}

/// Mean cross entropy of `logits[B, K]` against labels; no label smoothing.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Predicted class per row of `logits[B, K]` (first maximum wins).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
