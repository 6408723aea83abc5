//! Victim networks, the training loss, and the averaged-gradient oracle.
//!
//! The oracle side is the only place a hidden batch touches gradient
//! machinery: `sag_capture` turns it into a detached [`TargetGradient`] and
//! nothing else about the batch is visible to attack code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Activation kinds supported by the reference architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// One layer descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Dense { units: usize },
    Conv2d { out_channels: usize, kernel: usize, stride: usize },
    Activation(Activation),
    Flatten,
}

/// Architecture: input shape, ordered layers, class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeState {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl ArchSpec {
    /// The two reference architectures, by config string.
    ///
    /// Grammar: `mlp[:h=<units>]` (flatten, dense(h), sigmoid, dense(classes))
    /// and `lenet-lite[:c=<channels>]` (two stride-2 5x5 sigmoid conv blocks,
    /// flatten, dense(classes)).
    pub fn parse(s: &str, input_shape: (usize, usize, usize), num_classes: usize) -> Result<ArchSpec> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let parse_kv = |arg: Option<&str>, key: &str, default: usize| -> Result<usize> {
            match arg {
                None => Ok(default),
                Some(a) => match a.split_once('=') {
                    Some((k, v)) if k == key => v
                        .parse::<usize>()
                        .map_err(|_| Error::Arch(format!("bad value in `{s}`: {v} is not a positive integer"))),
                    _ => Err(Error::Arch(format!("bad parameter in `{s}`; expected `{key}=<n>`"))),
                },
            }
        };
        let layers = match name {
            "mlp" => {
                let h = parse_kv(arg, "h", 64)?;
                vec![
                    Layer::Flatten,
                    Layer::Dense { units: h },
                    Layer::Activation(Activation::Sigmoid),
                    Layer::Dense { units: num_classes },
                ]
            }
            "lenet-lite" => {
                let c = parse_kv(arg, "c", 12)?;
                vec![
                    Layer::Conv2d { out_channels: c, kernel: 5, stride: 2 },
                    Layer::Activation(Activation::Sigmoid),
                    Layer::Conv2d { out_channels: c, kernel: 5, stride: 2 },
                    Layer::Activation(Activation::Sigmoid),
                    Layer::Flatten,
                    Layer::Dense { units: num_classes },
                ]
            }
            other => {
                return Err(Error::Arch(format!(
                    "unknown architecture `{other}`; expected `mlp[:h=<n>]` or `lenet-lite[:c=<n>]`"
                )))
            }
        };
        let spec = ArchSpec { input_shape, layers, num_classes };
        spec.validate()?;
        Ok(spec)
    }

    /// Walk the layer shapes; error on any composition mismatch.
    pub fn validate(&self) -> Result<()> {
        let mut state = ShapeState::Spatial(self.input_shape.0, self.input_shape.1, self.input_shape.2);
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 || self.input_shape.2 == 0 {
            return Err(Error::Arch("input shape must be positive".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            state = match (layer, state) {
                (Layer::Flatten, ShapeState::Spatial(c, h, w)) => ShapeState::Flat(c * h * w),
                (Layer::Flatten, ShapeState::Flat(n)) => ShapeState::Flat(n),
                (Layer::Dense { units }, ShapeState::Flat(_)) => {
                    if *units == 0 {
                        return Err(Error::Arch(format!("layer {i}: dense units must be positive")));
                    }
                    ShapeState::Flat(*units)
                }
                (Layer::Dense { .. }, ShapeState::Spatial(..)) => {
                    return Err(Error::Arch(format!("layer {i}: dense requires a flattened input")));
                }
                (Layer::Conv2d { out_channels, kernel, stride }, ShapeState::Spatial(_, h, w)) => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::Arch(format!("layer {i}: conv2d parameters must be positive")));
                    }
                    if *kernel > h || *kernel > w {
                        return Err(Error::Arch(format!(
                            "layer {i}: {kernel}x{kernel} kernel does not fit {h}x{w} input"
                        )));
                    }
                    ShapeState::Spatial(*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1)
                }
                (Layer::Conv2d { .. }, ShapeState::Flat(_)) => {
                    return Err(Error::Arch(format!("layer {i}: conv2d requires a spatial input")));
                }
                (Layer::Activation(_), s) => s,
            };
        }
        let final_dim = match state {
            ShapeState::Flat(n) => n,
            ShapeState::Spatial(c, h, w) => c * h * w,
        };
        if final_dim != self.num_classes {
            return Err(Error::Arch(format!(
                "final layer produces {final_dim} outputs, expected num_classes = {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Parameter tensor shapes in canonical order: layer order, weights
    /// before biases.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut state = ShapeState::Spatial(self.input_shape.0, self.input_shape.1, self.input_shape.2);
        let mut shapes = Vec::new();
        for layer in &self.layers {
            match (layer, state) {
                (Layer::Flatten, ShapeState::Spatial(c, h, w)) => state = ShapeState::Flat(c * h * w),
                (Layer::Dense { units }, ShapeState::Flat(n)) => {
                    shapes.push(vec![*units, n]);
                    shapes.push(vec![*units]);
                    state = ShapeState::Flat(*units);
                }
                (Layer::Conv2d { out_channels, kernel, stride }, ShapeState::Spatial(c, h, w)) => {
                    shapes.push(vec![*out_channels, c, *kernel, *kernel]);
                    shapes.push(vec![*out_channels]);
                    state = ShapeState::Spatial(*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1);
                }
                _ => {}
            }
        }
        shapes
    }
}

/// A batch label: hard class index or a soft probability vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Distribution(Vec<f64>),
}

/// Ground-truth images plus labels; the private quantity of the threat model.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Vec<Tensor>,
    pub labels: Vec<Label>,
}

impl LabeledBatch {
    pub fn new(images: Vec<Tensor>, labels: Vec<Label>) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "batch needs matching nonempty images/labels, got {}/{}",
                images.len(),
                labels.len()
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!("image {i} has entries outside [0,1]")));
            }
        }
        for (i, label) in labels.iter().enumerate() {
            if let Label::Distribution(p) = label {
                if p.iter().any(|&v| v < 0.0) {
                    return Err(Error::invalid(format!("label {i} has negative probabilities")));
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("label {i} probabilities sum to {total}")));
                }
            }
        }
        Ok(LabeledBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Labels as probability vectors of length `num_classes`.
    pub fn label_distributions(&self, num_classes: usize) -> Result<Vec<Vec<f64>>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, label)| match label {
                Label::Class(c) => {
                    if *c >= num_classes {
                        return Err(Error::invalid(format!("label {i}: class {c} >= num_classes {num_classes}")));
                    }
                    let mut p = vec![0.0; num_classes];
                    p[*c] = 1.0;
                    Ok(p)
                }
                Label::Distribution(p) => {
                    if p.len() != num_classes {
                        return Err(Error::invalid(format!(
                            "label {i}: distribution length {} != num_classes {num_classes}",
                            p.len()
                        )));
                    }
                    Ok(p.clone())
                }
            })
            .collect()
    }
}

/// The quantity the server observes: one batch-mean gradient, flattened in
/// canonical parameter order, fully detached from the batch that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGradient {
    g_star: Vec<f64>,
    batch_size: usize,
}

impl TargetGradient {
    pub fn new(g_star: Vec<f64>, batch_size: usize) -> Result<Self> {
        if g_star.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("target gradient has non-finite entries"));
        }
        Ok(TargetGradient { g_star, batch_size })
    }

    pub fn values(&self) -> &[f64] {
        &self.g_star
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.g_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g_star.is_empty()
    }
}

/// Victim network: an architecture plus concrete parameter values.
#[derive(Debug, Clone)]
pub struct VictimModel {
    arch: ArchSpec,
    params: Vec<Tensor>,
}

impl VictimModel {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization per layer,
    /// deterministic in `seed`.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let shapes = arch.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for pair in shapes.chunks(2) {
            let w_shape = &pair[0];
            let fan_in: usize = match w_shape.len() {
                2 => w_shape[1],
                4 => w_shape[1] * w_shape[2] * w_shape[3],
                _ => unreachable!("weights are rank 2 or 4"),
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for shape in pair {
                let data: Vec<f64> = (0..shape.iter().product::<usize>())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                params.push(Tensor::new(shape.clone(), data)?);
            }
        }
        Ok(VictimModel { arch, params })
    }

    /// Build a model around explicit parameter tensors (testing hook).
    pub fn with_params(arch: ArchSpec, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s != p.shape()) {
            return Err(Error::invalid("parameter tensors do not match the architecture"));
        }
        Ok(VictimModel { arch, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Create the parameter leaves of this model inside `graph`, in canonical
    /// order, marked differentiable.
    pub fn bind_params(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| graph.leaf(p.clone(), true)).collect()
    }

    /// Per-sample logits node, shaped (num_classes, 1).
    pub fn forward_logits(&self, graph: &mut Graph, params: &[NodeId], image: NodeId) -> Result<NodeId> {
        let mut cur = image;
        let mut state = ShapeState::Spatial(self.arch.input_shape.0, self.arch.input_shape.1, self.arch.input_shape.2);
        let mut p = 0usize;
        for layer in &self.arch.layers {
            match (layer, state) {
                (Layer::Flatten, ShapeState::Spatial(c, h, w)) => {
                    cur = graph.reshape(cur, vec![c * h * w, 1])?;
                    state = ShapeState::Flat(c * h * w);
                }
                (Layer::Flatten, ShapeState::Flat(_)) => {}
                (Layer::Dense { units }, ShapeState::Flat(_)) => {
                    let w = params[p];
                    let b = params[p + 1];
                    p += 2;
                    let prod = graph.matmul(w, cur)?;
                    let bcol = graph.reshape(b, vec![*units, 1])?;
                    cur = graph.add(prod, bcol)?;
                    state = ShapeState::Flat(*units);
                }
                (Layer::Conv2d { out_channels, kernel, stride }, ShapeState::Spatial(_, h, w)) => {
                    let k = params[p];
                    let b = params[p + 1];
                    p += 2;
                    cur = graph.conv2d(cur, k, b, *stride)?;
                    state = ShapeState::Spatial(*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1);
                }
                (Layer::Activation(Activation::Sigmoid), _) => cur = graph.sigmoid(cur)?,
                (Layer::Activation(Activation::Relu), _) => cur = graph.relu(cur)?,
                _ => return Err(Error::Arch("layer/shape mismatch; arch not validated".into())),
            }
        }
        graph.reshape(cur, vec![self.arch.num_classes, 1])
    }

    /// Cross-entropy of one sample against a probability-vector label node
    /// shaped (num_classes, 1): `-sum(p * log_softmax(logits))`.
    pub fn sample_loss(&self, graph: &mut Graph, params: &[NodeId], image: NodeId, label_dist: NodeId) -> Result<NodeId> {
        let logits = self.forward_logits(graph, params, image)?;
        let log_probs = graph.softmax_log(logits)?;
        let weighted = graph.mul(label_dist, log_probs)?;
        let total = graph.sum(weighted)?;
        graph.scale(total, -1.0)
    }

    /// Mean over the batch of per-sample cross-entropies.
    pub fn forward_loss(&self, graph: &mut Graph, params: &[NodeId], images: &[NodeId], label_dists: &[NodeId]) -> Result<NodeId> {
        if images.is_empty() || images.len() != label_dists.len() {
            return Err(Error::invalid("forward_loss needs matching nonempty images/labels"));
        }
        let losses: Vec<NodeId> = images
            .iter()
            .zip(label_dists.iter())
            .map(|(&img, &lab)| self.sample_loss(graph, params, img, lab))
            .collect::<Result<_>>()?;
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = graph.add(acc, l)?;
        }
        graph.scale(acc, 1.0 / images.len() as f64)
    }

    /// One gradient node per parameter tensor for every sample, each built
    /// with `create_graph` so the result can be differentiated again.
    pub fn per_sample_gradient_nodes(
        &self,
        graph: &mut Graph,
        params: &[NodeId],
        images: &[NodeId],
        label_dists: &[NodeId],
    ) -> Result<Vec<Vec<NodeId>>> {
        images
            .iter()
            .zip(label_dists.iter())
            .map(|(&img, &lab)| {
                let loss = self.sample_loss(graph, params, img, lab)?;
                graph.differentiate(loss, params, true)
            })
            .collect()
    }

    /// Bind a concrete batch as constant nodes: images plus labels as
    /// (num_classes, 1) probability columns.
    pub fn bind_batch(&self, graph: &mut Graph, batch: &LabeledBatch) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let (c, h, w) = self.arch.input_shape;
        let mut images = Vec::with_capacity(batch.len());
        for img in &batch.images {
            if img.shape() != [c, h, w] {
                return Err(Error::Shape {
                    op: "leaf",
                    detail: format!("batch image shape {:?}, model expects {:?}", img.shape(), [c, h, w]),
                });
            }
            images.push(graph.constant(img.clone()));
        }
        let labels = batch
            .label_distributions(self.arch.num_classes)?
            .into_iter()
            .map(|p| {
                let t = Tensor::new(vec![self.arch.num_classes, 1], p)?;
                Ok(graph.constant(t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((images, labels))
    }

    /// Numeric batch-mean gradient: the gradient of the batch-mean loss with
    /// respect to every parameter, flattened canonically.
    pub fn batch_mean_gradient(&self, batch: &LabeledBatch) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let params = self.bind_params(&mut graph);
        let (images, labels) = self.bind_batch(&mut graph, batch)?;
        let loss = self.forward_loss(&mut graph, &params, &images, &labels)?;
        let grads = graph.differentiate(loss, &params, false)?;
        let mut flat = Vec::with_capacity(self.param_count());
        for gid in grads {
            flat.extend_from_slice(graph.evaluate(gid)?.data());
        }
        Ok(flat)
    }

    /// Numeric per-sample gradients, one flattened vector per sample.
    /// Ground truth per sample exists only here and in the verifier.
    pub fn per_sample_gradients(&self, batch: &LabeledBatch) -> Result<Vec<Vec<f64>>> {
        let mut graph = Graph::new();
        let params = self.bind_params(&mut graph);
        let (images, labels) = self.bind_batch(&mut graph, batch)?;
        let mut out = Vec::with_capacity(batch.len());
        for (&img, &lab) in images.iter().zip(labels.iter()) {
            let loss = self.sample_loss(&mut graph, &params, img, lab)?;
            let grads = graph.differentiate(loss, &params, false)?;
            let mut flat = Vec::with_capacity(self.param_count());
            for gid in grads {
                flat.extend_from_slice(graph.evaluate(gid)?.data());
            }
            out.push(flat);
        }
        Ok(out)
    }

    /// The SAG oracle: reveal only the detached batch-mean gradient.
    pub fn sag_capture(&self, hidden_batch: &LabeledBatch) -> Result<TargetGradient> {
        let g = self.batch_mean_gradient(hidden_batch)?;
        TargetGradient::new(g, hidden_batch.len())
    }
}
