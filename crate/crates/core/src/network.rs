//! Feedforward classifier definition, its activation-clipped counterpart,
//! bound initialization, and the versioned checkpoint format.
//!
//! A layer's output is the result of its linear/conv transform, activation,
//! and any pooling or normalization. Clipping applies to that final output:
//! a clippable layer's activations are replaced by min(h, z) with one bound
//! per neuron (dense) or per feature map (conv/pool/norm).

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Bounds are clamped to this floor; they are never zero or negative.
pub const EPS_Z: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense { input: usize, output: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize },
    Pool { k: usize },
    Norm { channels: usize },
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub clippable: bool,
}

/// Weight tensors for one layer; pool and flatten layers carry none.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Dense { w: Tensor, b: Tensor },
    Conv { w: Tensor, b: Tensor },
    Norm { scale: Tensor, shift: Tensor },
    None,
}

impl LayerWeights {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerWeights::Dense { w, b } | LayerWeights::Conv { w, b } => vec![w, b],
            LayerWeights::Norm { scale, shift } => vec![scale, shift],
            LayerWeights::None => vec![],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerWeights::Dense { w, b } | LayerWeights::Conv { w, b } => vec![w, b],
            LayerWeights::Norm { scale, shift } => vec![scale, shift],
            LayerWeights::None => vec![],
        }
    }
}

/// One non-negative upper-bound vector per clippable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundVectors {
    /// (layer index, bounds), in layer order; bound length is the layer's
    /// channel count (conv/pool/norm) or neuron count (dense).
    entries: Vec<(usize, Vec<f64>)>,
}

impl BoundVectors {
    pub fn new(entries: Vec<(usize, Vec<f64>)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, Vec<f64>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(usize, Vec<f64>)] {
        &mut self.entries
    }

    /// Identity-level bounds: +inf everywhere, clipping nothing.
    pub fn unbounded(net: &Network) -> Self {
        let entries = net
            .clippable_layers()
            .into_iter()
            .map(|(idx, len)| (idx, vec![f64::INFINITY; len]))
            .collect();
        Self { entries }
    }

    /// Collapsed bounds: the floor value everywhere.
    pub fn collapsed(net: &Network) -> Self {
        let entries = net
            .clippable_layers()
            .into_iter()
            .map(|(idx, len)| (idx, vec![EPS_Z; len]))
            .collect();
        Self { entries }
    }

    pub fn clamp_floor(&mut self) {
        for (_, z) in &mut self.entries {
            for v in z {
                if !(*v >= EPS_Z) {
                    *v = EPS_Z;
                }
            }
        }
    }
}

/// Feedforward classifier: layer list plus learned weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    weights: Vec<LayerWeights>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Weights enter the graph as constants (inference, bound learning).
    Constant,
    /// Weights enter as differentiable leaves (training).
    Leaf,
}

/// Handles into a built forward graph.
pub struct GraphBuild {
    pub logits: NodeId,
    /// Weight nodes in declaration order, parallel to `Network::weight_tensors`.
    pub weight_nodes: Vec<NodeId>,
    /// Final output node of each clippable layer (after clipping when bounds
    /// were supplied), parallel to `Network::clippable_layers`.
    pub clip_outputs: Vec<NodeId>,
    /// Same positions, before the clip was applied.
    pub pre_clip: Vec<NodeId>,
}

impl Network {
    pub fn new(
        layers: Vec<LayerSpec>,
        weights: Vec<LayerWeights>,
        input_shape: Vec<usize>,
    ) -> Result<Self> {
        if layers.len() != weights.len() {
            return Err(Error::InvalidNetwork(format!(
                "{} layers but {} weight entries",
                layers.len(),
                weights.len()
            )));
        }
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".to_string()));
        }
        // geometry must compose front to back
        let mut shape = input_shape.clone();
        for (i, (spec, w)) in layers.iter().zip(&weights).enumerate() {
            shape = propagate_shape(&shape, spec, w)
                .map_err(|e| Error::InvalidNetwork(format!("layer {i}: {e}")))?;
        }
        let last = layers.last().unwrap();
        let num_classes = match (last.kind, last.activation, last.clippable) {
            (LayerKind::Dense { output, .. }, Activation::None, false) => output,
            _ => {
                return Err(Error::InvalidNetwork(
                    "final layer must be a dense logit layer with no activation and no clipping"
                        .to_string(),
                ))
            }
        };
        if shape != [num_classes] {
            return Err(Error::InvalidNetwork(format!(
                "output shape {shape:?} does not match {num_classes} classes"
            )));
        }
        Ok(Self { layers, weights, input_shape, num_classes })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Flattened weight tensors in declaration order.
    pub fn weight_tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().flat_map(|w| w.tensors()).collect()
    }

    pub(crate) fn weight_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().flat_map(|w| w.tensors_mut()).collect()
    }

    /// (layer index, bound vector length) for each clippable layer.
    pub fn clippable_layers(&self) -> Vec<(usize, usize)> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::new();
        for (i, (spec, w)) in self.layers.iter().zip(&self.weights).enumerate() {
            shape = propagate_shape(&shape, spec, w).expect("validated at construction");
            if spec.clippable {
                // one bound per feature map when spatial, per neuron when flat
                out.push((i, shape[0]));
            }
        }
        out
    }

    pub fn check_bounds(&self, bounds: &BoundVectors) -> Result<()> {
        let expect = self.clippable_layers();
        if bounds.entries().len() != expect.len() {
            return Err(Error::BoundsMismatch(format!(
                "{} bound vectors for {} clippable layers",
                bounds.entries().len(),
                expect.len()
            )));
        }
        for ((idx, z), (want_idx, want_len)) in bounds.entries().iter().zip(&expect) {
            if idx != want_idx || z.len() != *want_len {
                return Err(Error::BoundsMismatch(format!(
                    "bound vector for layer {idx} (len {}) does not match clippable layer {want_idx} (len {want_len})",
                    z.len()
                )));
            }
            if z.iter().any(|&v| !(v >= EPS_Z)) {
                return Err(Error::BoundsMismatch(format!(
                    "layer {idx} has a bound below {EPS_Z}"
                )));
            }
        }
        Ok(())
    }

    /// Assemble the forward computation in `g` starting from input node `x`
    /// (shape [B] + input_shape). When `bound_nodes` is given (one node per
    /// clippable layer) each clippable layer's output is min(h, z).
    pub fn build_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        weight_mode: WeightMode,
        bound_nodes: Option<&[NodeId]>,
    ) -> Result<GraphBuild> {
        let expect_clip = self.clippable_layers().len();
        if let Some(b) = bound_nodes {
            if b.len() != expect_clip {
                return Err(Error::BoundsMismatch(format!(
                    "{} bound nodes for {} clippable layers",
                    b.len(),
                    expect_clip
                )));
            }
        }
        let mut weight_nodes = Vec::new();
        let mut clip_outputs = Vec::new();
        let mut pre_clip = Vec::new();
        let mut cur = x;
        let mut clip_i = 0;
        for (spec, w) in self.layers.iter().zip(&self.weights) {
            let mut add_weight = |g: &mut Graph, t: &Tensor| {
                let id = match weight_mode {
                    WeightMode::Constant => g.constant(t.clone()),
                    WeightMode::Leaf => g.leaf(t.clone()),
                };
                weight_nodes.push(id);
                id
            };
            cur = match (&spec.kind, w) {
                (LayerKind::Dense { .. }, LayerWeights::Dense { w, b }) => {
                    let wn = add_weight(g, w);
                    let bn = add_weight(g, b);
                    let y = g.matmul(cur, wn)?;
                    g.add(y, bn)?
                }
                (LayerKind::Conv { .. }, LayerWeights::Conv { w, b }) => {
                    let wn = add_weight(g, w);
                    let bn = add_weight(g, b);
                    let y = g.conv2d(cur, wn)?;
                    g.add(y, bn)?
                }
                (LayerKind::Pool { k }, LayerWeights::None) => g.mean_pool(cur, *k)?,
                (LayerKind::Norm { .. }, LayerWeights::Norm { scale, shift }) => {
                    let sn = add_weight(g, scale);
                    let bn = add_weight(g, shift);
                    g.affine_norm(cur, sn, bn)?
                }
                (LayerKind::Flatten, LayerWeights::None) => g.flatten(cur)?,
                _ => {
                    return Err(Error::InvalidNetwork(
                        "layer kind and weight entry disagree".to_string(),
                    ))
                }
            };
            if spec.activation == Activation::Relu {
                cur = g.relu(cur)?;
            }
            if spec.clippable {
                pre_clip.push(cur);
                if let Some(bounds) = bound_nodes {
                    cur = g.clip_upper(cur, bounds[clip_i])?;
                }
                clip_outputs.push(cur);
                clip_i += 1;
            }
        }
        Ok(GraphBuild { logits: cur, weight_nodes, clip_outputs, pre_clip })
    }

    /// Create graph constants for a bound set, in clippable-layer order.
    pub fn bound_constants(&self, g: &mut Graph, bounds: &BoundVectors) -> Result<Vec<NodeId>> {
        self.check_bounds(bounds)?;
        Ok(bounds
            .entries()
            .iter()
            .map(|(_, z)| g.constant(Tensor::vector_allow_inf(z)))
            .collect())
    }

    fn batch_of(&self, x: &Tensor) -> Result<Tensor> {
        // accept [B]+input_shape as-is, or a single unbatched sample
        let s = x.shape();
        if s.len() == self.input_shape.len() + 1 && s[1..] == self.input_shape[..] {
            Ok(x.clone())
        } else if s == self.input_shape {
            let mut shape = vec![1];
            shape.extend_from_slice(s);
            Tensor::new(shape, x.data().to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("input {s:?} for network input shape {:?}", self.input_shape),
            })
        }
    }

    /// Logits of the original (unclipped) network, shape [B, num_classes].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.batch_of(x)?;
        let mut g = Graph::new();
        let xn = g.constant(batch);
        let build = self.build_graph(&mut g, xn, WeightMode::Constant, None)?;
        Ok(g.value(build.logits).clone())
    }

    /// Logits of the bounded network f̄(x; Z).
    pub fn bounded_forward(&self, bounds: &BoundVectors, x: &Tensor) -> Result<Tensor> {
        let batch = self.batch_of(x)?;
        let mut g = Graph::new();
        let xn = g.constant(batch);
        let bn = self.bound_constants(&mut g, bounds)?;
        let build = self.build_graph(&mut g, xn, WeightMode::Constant, Some(&bn))?;
        Ok(g.value(build.logits).clone())
    }

    /// Conservative bound initialization: for each clippable channel, beta
    /// times the maximum activation observed over `samples`, floored at
    /// EPS_Z. An infinite beta yields identity (infinite) bounds.
    pub fn init_bounds(&self, samples: &[Tensor], beta: f64) -> Result<BoundVectors> {
        if samples.is_empty() {
            return Err(Error::InvalidDataset("init_bounds requires a nonempty sample set".to_string()));
        }
        if !(beta >= 1.0) {
            return Err(Error::InvalidConfig(format!("init_bounds requires beta >= 1, got {beta}")));
        }
        let clippable = self.clippable_layers();
        let mut maxima: Vec<Vec<f64>> = clippable.iter().map(|(_, len)| vec![0.0; *len]).collect();
        // batch all samples in one pass
        let mut data = Vec::with_capacity(samples.len() * self.input_dim());
        for s in samples {
            if s.shape() != self.input_shape {
                return Err(Error::ShapeMismatch {
                    op: "init_bounds",
                    detail: format!("sample {:?} vs input {:?}", s.shape(), self.input_shape),
                });
            }
            data.extend_from_slice(s.data());
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&self.input_shape);
        let batch = Tensor::new(shape, data)?;
        let mut g = Graph::new();
        let xn = g.constant(batch);
        let build = self.build_graph(&mut g, xn, WeightMode::Constant, None)?;
        for (ci, node) in build.clip_outputs.iter().enumerate() {
            let t = g.value(*node);
            let s = t.shape();
            let channels = maxima[ci].len();
            let inner: usize = s[2..].iter().product();
            for b in 0..s[0] {
                for ch in 0..channels {
                    let base = b * channels * inner + ch * inner;
                    for k in 0..inner {
                        let v = t.data()[base + k];
                        if v > maxima[ci][ch] {
                            maxima[ci][ch] = v;
                        }
                    }
                }
            }
        }
        let entries = clippable
            .iter()
            .zip(maxima)
            .map(|(&(idx, _), m)| {
                let z = m
                    .into_iter()
                    .map(|v| {
                        if beta.is_infinite() {
                            f64::INFINITY
                        } else {
                            (beta * v).max(EPS_Z)
                        }
                    })
                    .collect();
                (idx, z)
            })
            .collect();
        Ok(BoundVectors::new(entries))
    }
}

fn propagate_shape(shape: &[usize], spec: &LayerSpec, w: &LayerWeights) -> std::result::Result<Vec<usize>, String> {
    match (&spec.kind, w) {
        (LayerKind::Dense { input, output }, LayerWeights::Dense { w, b }) => {
            if shape != [*input] {
                return Err(format!("dense expects [{input}], got {shape:?}"));
            }
            if w.shape() != [*input, *output] || b.shape() != [*output] {
                return Err("dense weight shapes disagree with geometry".to_string());
            }
            Ok(vec![*output])
        }
        (LayerKind::Conv { in_channels, out_channels, kernel }, LayerWeights::Conv { w, b }) => {
            if shape.len() != 3 || shape[0] != *in_channels || shape[1] < *kernel || shape[2] < *kernel {
                return Err(format!("conv expects [{in_channels}, >={kernel}, >={kernel}], got {shape:?}"));
            }
            if w.shape() != [*out_channels, *in_channels, *kernel, *kernel] || b.shape() != [*out_channels] {
                return Err("conv weight shapes disagree with geometry".to_string());
            }
            Ok(vec![*out_channels, shape[1] - kernel + 1, shape[2] - kernel + 1])
        }
        (LayerKind::Pool { k }, LayerWeights::None) => {
            if shape.len() != 3 || *k == 0 || shape[1] < *k || shape[2] < *k {
                return Err(format!("pool {k} cannot apply to {shape:?}"));
            }
            Ok(vec![shape[0], shape[1] / k, shape[2] / k])
        }
        (LayerKind::Norm { channels }, LayerWeights::Norm { scale, shift }) => {
            if shape[0] != *channels {
                return Err(format!("norm expects {channels} channels, got {shape:?}"));
            }
            if scale.shape() != [*channels] || shift.shape() != [*channels] {
                return Err("norm parameter shapes disagree with geometry".to_string());
            }
            Ok(shape.to_vec())
        }
        (LayerKind::Flatten, LayerWeights::None) => {
            if shape.len() < 2 {
                return Err(format!("flatten expects a spatial shape, got {shape:?}"));
            }
            Ok(vec![shape.iter().product()])
        }
        _ => Err("layer kind and weight entry disagree".to_string()),
    }
}

/// Desk-scale reference architectures.
pub mod presets {
    use super::*;

    fn he_dense(rng: &mut ChaCha8Rng, input: usize, output: usize) -> LayerWeights {
        let scale = (2.0 / input as f64).sqrt();
        let w: Vec<f64> = (0..input * output)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        LayerWeights::Dense {
            w: Tensor::new(vec![input, output], w).unwrap(),
            b: Tensor::zeros(vec![output]),
        }
    }

    fn he_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> LayerWeights {
        let fan_in = cin * k * k;
        let scale = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..cout * fan_in)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        LayerWeights::Conv {
            w: Tensor::new(vec![cout, cin, k, k], w).unwrap(),
            b: Tensor::zeros(vec![cout]),
        }
    }

    /// MLP-3: dense 128 and 64 hidden layers (both clippable), dense logits.
    pub fn mlp3(input_dim: usize, num_classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            LayerSpec {
                kind: LayerKind::Dense { input: input_dim, output: 128 },
                activation: Activation::Relu,
                clippable: true,
            },
            LayerSpec {
                kind: LayerKind::Dense { input: 128, output: 64 },
                activation: Activation::Relu,
                clippable: true,
            },
            LayerSpec {
                kind: LayerKind::Dense { input: 64, output: num_classes },
                activation: Activation::None,
                clippable: false,
            },
        ];
        let weights = vec![
            he_dense(&mut rng, input_dim, 128),
            he_dense(&mut rng, 128, 64),
            he_dense(&mut rng, 64, num_classes),
        ];
        Network::new(layers, weights, vec![input_dim]).unwrap()
    }

    /// CNN-S: two conv+pool blocks (pools clippable per feature map), one
    /// dense logit layer. Input is a single-channel side x side image.
    pub fn cnn_s(side: usize, num_classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let after1 = (side - 2) / 2; // conv3 then pool2
        let after2 = (after1 - 2) / 2;
        let flat = 16 * after2 * after2;
        let layers = vec![
            LayerSpec {
                kind: LayerKind::Conv { in_channels: 1, out_channels: 8, kernel: 3 },
                activation: Activation::Relu,
                clippable: false,
            },
            LayerSpec { kind: LayerKind::Pool { k: 2 }, activation: Activation::None, clippable: true },
            LayerSpec {
                kind: LayerKind::Conv { in_channels: 8, out_channels: 16, kernel: 3 },
                activation: Activation::Relu,
                clippable: false,
            },
            LayerSpec { kind: LayerKind::Pool { k: 2 }, activation: Activation::None, clippable: true },
            LayerSpec { kind: LayerKind::Flatten, activation: Activation::None, clippable: false },
            LayerSpec {
                kind: LayerKind::Dense { input: flat, output: num_classes },
                activation: Activation::None,
                clippable: false,
            },
        ];
        let weights = vec![
            he_conv(&mut rng, 1, 8, 3),
            LayerWeights::None,
            he_conv(&mut rng, 8, 16, 3),
            LayerWeights::None,
            LayerWeights::None,
            he_dense(&mut rng, flat, num_classes),
        ];
        Network::new(layers, weights, vec![1, side, side]).unwrap()
    }
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 6] = b"MMCLIP";
const VERSION: u8 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".to_string())
    } else {
        Error::Io(e)
    }
}

/// Write a network (and optionally its bounds) to `path`. Weights and bounds
/// round-trip bit-exactly.
pub fn save_checkpoint(net: &Network, bounds: Option<&BoundVectors>, path: &Path) -> Result<()> {
    if let Some(b) = bounds {
        net.check_bounds(b)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&[net.input_shape.len() as u8])?;
    for &d in &net.input_shape {
        write_u32(&mut w, d as u32)?;
    }
    write_u32(&mut w, net.num_classes as u32)?;
    write_u32(&mut w, net.layers.len() as u32)?;
    for spec in &net.layers {
        let (kind, g0, g1, g2) = match spec.kind {
            LayerKind::Dense { input, output } => (0u8, input, output, 0),
            LayerKind::Conv { in_channels, out_channels, kernel } => (1, in_channels, out_channels, kernel),
            LayerKind::Pool { k } => (2, k, 0, 0),
            LayerKind::Norm { channels } => (3, channels, 0, 0),
            LayerKind::Flatten => (4, 0, 0, 0),
        };
        w.write_all(&[kind, (spec.activation == Activation::Relu) as u8, spec.clippable as u8])?;
        write_u32(&mut w, g0 as u32)?;
        write_u32(&mut w, g1 as u32)?;
        write_u32(&mut w, g2 as u32)?;
    }
    w.write_all(&[bounds.is_some() as u8])?;
    for t in net.weight_tensors() {
        write_f64s(&mut w, t.data())?;
    }
    if let Some(b) = bounds {
        for (_, z) in b.entries() {
            write_f64s(&mut w, z)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Network, Option<BoundVectors>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".to_string()));
    }
    let version = read_u8(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let rank = read_u8(&mut r)? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(read_u32(&mut r)? as usize);
    }
    let num_classes = read_u32(&mut r)? as usize;
    let n_layers = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind_b = read_u8(&mut r)?;
        let act = read_u8(&mut r)?;
        let clippable = read_u8(&mut r)? != 0;
        let g0 = read_u32(&mut r)? as usize;
        let g1 = read_u32(&mut r)? as usize;
        let g2 = read_u32(&mut r)? as usize;
        let kind = match kind_b {
            0 => LayerKind::Dense { input: g0, output: g1 },
            1 => LayerKind::Conv { in_channels: g0, out_channels: g1, kernel: g2 },
            2 => LayerKind::Pool { k: g0 },
            3 => LayerKind::Norm { channels: g0 },
            4 => LayerKind::Flatten,
            other => return Err(Error::Checkpoint(format!("unknown layer kind {other}"))),
        };
        layers.push(LayerSpec {
            kind,
            activation: if act != 0 { Activation::Relu } else { Activation::None },
            clippable,
        });
    }
    let has_bounds = read_u8(&mut r)? != 0;
    let mut weights = Vec::with_capacity(n_layers);
    for spec in &layers {
        let w = match spec.kind {
            LayerKind::Dense { input, output } => LayerWeights::Dense {
                w: Tensor::new(vec![input, output], read_f64s(&mut r, input * output)?)?,
                b: Tensor::new(vec![output], read_f64s(&mut r, output)?)?,
            },
            LayerKind::Conv { in_channels, out_channels, kernel } => {
                let n = out_channels * in_channels * kernel * kernel;
                LayerWeights::Conv {
                    w: Tensor::new(vec![out_channels, in_channels, kernel, kernel], read_f64s(&mut r, n)?)?,
                    b: Tensor::new(vec![out_channels], read_f64s(&mut r, out_channels)?)?,
                }
            }
            LayerKind::Norm { channels } => LayerWeights::Norm {
                scale: Tensor::new(vec![channels], read_f64s(&mut r, channels)?)?,
                shift: Tensor::new(vec![channels], read_f64s(&mut r, channels)?)?,
            },
            LayerKind::Pool { .. } | LayerKind::Flatten => LayerWeights::None,
        };
        weights.push(w);
    }
    let net = Network::new(layers, weights, input_shape)
        .map_err(|e| Error::Checkpoint(format!("invalid network in checkpoint: {e}")))?;
    if net.num_classes != num_classes {
        return Err(Error::Checkpoint("class count disagrees with layer table".to_string()));
    }
    let bounds = if has_bounds {
        let mut entries = Vec::new();
        for (idx, len) in net.clippable_layers() {
            let raw = read_f64s(&mut r, len)?;
            entries.push((idx, raw));
        }
        let b = BoundVectors::new(entries);
        net.check_bounds(&b)
            .map_err(|e| Error::Checkpoint(format!("invalid bounds in checkpoint: {e}")))?;
        Some(b)
    } else {
        None
    };
    Ok((net, bounds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> Network {
        // dense 2 -> 3 -> 2 with pinned weights
        let layers = vec![
            LayerSpec {
                kind: LayerKind::Dense { input: 2, output: 3 },
                activation: Activation::Relu,
                clippable: true,
            },
            LayerSpec {
                kind: LayerKind::Dense { input: 3, output: 2 },
                activation: Activation::None,
                clippable: false,
            },
        ];
        let weights = vec![
            LayerWeights::Dense {
                w: Tensor::new(vec![2, 3], vec![1.0, -0.5, 0.25, 0.5, 1.5, -1.0]).unwrap(),
                b: Tensor::new(vec![3], vec![0.1, 0.0, -0.2]).unwrap(),
            },
            LayerWeights::Dense {
                w: Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5]).unwrap(),
                b: Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
            },
        ];
        Network::new(layers, weights, vec![2]).unwrap()
    }

    // Independent scalar forward for the fixture above.
    fn oracle_logits(x: &[f64], bounds: Option<&[f64]>) -> [f64; 2] {
        let w1 = [[1.0, -0.5, 0.25], [0.5, 1.5, -1.0]];
        let b1 = [0.1, 0.0, -0.2];
        let w2 = [[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]];
        let mut h = [0.0; 3];
        for j in 0..3 {
            let mut acc = b1[j];
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * w1[i][j];
            }
            h[j] = acc.max(0.0);
            if let Some(z) = bounds {
                h[j] = h[j].min(z[j]);
            }
        }
        let mut out = [0.0; 2];
        for c in 0..2 {
            for (j, &hj) in h.iter().enumerate() {
                out[c] += hj * w2[j][c];
            }
        }
        out
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let net = tiny_net();
        let x = Tensor::vector(&[0.8, 0.3]).unwrap();
        let logits = net.forward(&x).unwrap();
        let want = oracle_logits(&[0.8, 0.3], None);
        for (a, b) in logits.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bounded_forward_matches_scalar_oracle_with_clipping() {
        let net = tiny_net();
        let x = Tensor::vector(&[0.9, 0.9]).unwrap();
        let z = vec![0.3, 0.2, EPS_Z];
        let bounds = BoundVectors::new(vec![(0, z.clone())]);
        let logits = net.bounded_forward(&bounds, &x).unwrap();
        let want = oracle_logits(&[0.9, 0.9], Some(&z));
        for (a, b) in logits.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_dense_layer_logits_equal_weight_column() {
        let layers = vec![LayerSpec {
            kind: LayerKind::Dense { input: 3, output: 2 },
            activation: Activation::None,
            clippable: false,
        }];
        let weights = vec![LayerWeights::Dense {
            w: Tensor::new(vec![3, 2], vec![0.7, -0.3, 0.1, 0.4, 0.9, 0.2]).unwrap(),
            b: Tensor::zeros(vec![2]),
        }];
        let net = Network::new(layers, weights, vec![3]).unwrap();
        let e1 = Tensor::vector(&[1.0, 0.0, 0.0]).unwrap();
        let logits = net.forward(&e1).unwrap();
        assert_eq!(logits.data(), &[0.7, -0.3]);
    }

    #[test]
    fn generous_bounds_reproduce_forward_exactly() {
        let net = tiny_net();
        let bounds = BoundVectors::unbounded(&net);
        for x in [[0.1, 0.9], [1.0, 0.0], [0.5, 0.5]] {
            let t = Tensor::vector(&x).unwrap();
            assert_eq!(net.forward(&t).unwrap(), net.bounded_forward(&bounds, &t).unwrap());
        }
    }

    #[test]
    fn neuron_clip_limits_downstream_contribution() {
        // one hidden neuron with pre-clip activation 2.0, bound 0.5,
        // unit downstream weight -> contribution 0.5
        let layers = vec![
            LayerSpec {
                kind: LayerKind::Dense { input: 1, output: 1 },
                activation: Activation::Relu,
                clippable: true,
            },
            LayerSpec {
                kind: LayerKind::Dense { input: 1, output: 1 },
                activation: Activation::None,
                clippable: false,
            },
        ];
        let weights = vec![
            LayerWeights::Dense {
                w: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
                b: Tensor::zeros(vec![1]),
            },
            LayerWeights::Dense {
                w: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                b: Tensor::zeros(vec![1]),
            },
        ];
        let net = Network::new(layers, weights, vec![1]).unwrap();
        let bounds = BoundVectors::new(vec![(0, vec![0.5])]);
        let y = net.bounded_forward(&bounds, &Tensor::vector(&[1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn init_bounds_scales_observed_maxima() {
        let net = tiny_net();
        let samples: Vec<Tensor> = [[0.2, 0.1], [0.9, 0.4], [0.0, 1.0]]
            .iter()
            .map(|x| Tensor::vector(x).unwrap())
            .collect();
        let bounds = net.init_bounds(&samples, 2.0).unwrap();
        // recompute maxima with the oracle
        let mut maxima = [0.0f64; 3];
        for s in &samples {
            let x = s.data();
            let w1 = [[1.0, -0.5, 0.25], [0.5, 1.5, -1.0]];
            let b1 = [0.1, 0.0, -0.2];
            for j in 0..3 {
                let h = (b1[j] + x[0] * w1[0][j] + x[1] * w1[1][j]).max(0.0);
                maxima[j] = maxima[j].max(h);
            }
        }
        let (_, z) = &bounds.entries()[0];
        for (zi, m) in z.iter().zip(&maxima) {
            assert!((zi - (2.0 * m).max(EPS_Z)).abs() < 1e-12);
        }
        // third neuron is dead on this set -> floored
        assert_eq!(z[2], EPS_Z);
    }

    #[test]
    fn init_bounds_large_beta_is_identity_on_the_set() {
        let net = tiny_net();
        let samples: Vec<Tensor> = [[0.2, 0.1], [0.9, 0.4]]
            .iter()
            .map(|x| Tensor::vector(x).unwrap())
            .collect();
        let bounds = net.init_bounds(&samples, f64::INFINITY).unwrap();
        for s in &samples {
            assert_eq!(net.forward(s).unwrap(), net.bounded_forward(&bounds, s).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mmclip");
        let net = presets::mlp3(8, 4, 7);
        let bounds = net
            .init_bounds(&[Tensor::filled(vec![8], 0.5)], 2.0)
            .unwrap();
        save_checkpoint(&net, Some(&bounds), &path).unwrap();
        let (net2, bounds2) = load_checkpoint(&path).unwrap();
        assert_eq!(net, net2);
        assert_eq!(Some(bounds.clone()), bounds2);
        // bounded logits reproduce exactly after the round trip
        let x = Tensor::filled(vec![8], 0.25);
        assert_eq!(
            net.bounded_forward(&bounds, &x).unwrap(),
            net2.bounded_forward(bounds2.as_ref().unwrap(), &x).unwrap()
        );
    }

    #[test]
    fn checkpoint_bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        std::fs::write(&path, b"NOTMER-something").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("not a checkpoint"), "{err}");
    }

    #[test]
    fn checkpoint_truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mmclip");
        let net = presets::mlp3(8, 4, 7);
        save_checkpoint(&net, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn checkpoint_version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mmclip");
        let net = presets::mlp3(8, 4, 7);
        save_checkpoint(&net, None, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[6] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
