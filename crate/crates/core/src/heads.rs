//! The two trainable heads and their model-file persistence.
//!
//! Both heads share one shape: `relu(x̂·W1 + b1)·W2 + b2`, where `x̂` is the
//! L2-normalized input embedding. The cross-entropy head's output is class
//! logits; the contrastive head's output is a projection back into the text
//! embedding space, left linear so negative coordinates survive.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::DenseMatrix;

pub const HIDDEN_UNITS: usize = 512;
pub const PROJECTION_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "contrastive")]
    Contrastive,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::CrossEntropy => "ce",
            HeadKind::Contrastive => "contrastive",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross-entropy" => Ok(HeadKind::CrossEntropy),
            "contrastive" => Ok(HeadKind::Contrastive),
            other => Err(Error::InvalidConfig(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Fully connected layer; `weights` is `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = x.matmul(&self.weights)?;
        out.add_row_vector(&self.bias)?;
        Ok(out)
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: DenseMatrix,
    pub hidden: DenseMatrix,
    pub output: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

impl HeadGrads {
    pub fn slices(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayer {
    pub hidden: Linear,
    pub output: Linear,
}

impl TwoLayer {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            hidden: Linear::zeros(in_dim, hidden),
            output: Linear::zeros(hidden, out_dim),
        }
    }

    /// He-style Gaussian init for the ReLU layer, variance `1/hidden` for the
    /// output layer, zero biases.
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "head dims must be positive (in {in_dim}, hidden {hidden}, out {out_dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(in_dim, hidden, out_dim);
        let first = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).unwrap();
        for w in net.hidden.weights.as_mut_slice() {
            *w = first.sample(&mut rng);
        }
        let second = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        for w in net.output.weights.as_mut_slice() {
            *w = second.sample(&mut rng);
        }
        Ok(net)
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.output_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.hidden.weights.as_slice(),
            &self.hidden.bias,
            self.output.weights.as_slice(),
            &self.output.bias,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.hidden.weights.as_mut_slice(),
            &mut self.hidden.bias,
            self.output.weights.as_mut_slice(),
            &mut self.output.bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, batch: &DenseMatrix) -> Result<ForwardCache> {
        if batch.cols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                actual: batch.cols(),
            });
        }
        let input = batch.normalize_rows()?;
        let mut hidden = self.hidden.forward(&input)?;
        hidden
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = v.max(0.0));
        let output = self.output.forward(&hidden)?;
        Ok(ForwardCache {
            input,
            hidden,
            output,
        })
    }

    /// Parameter gradients given `dL/d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &DenseMatrix) -> Result<HeadGrads> {
        if grad_output.rows() != cache.output.rows() || grad_output.cols() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.out_dim(),
                actual: grad_output.cols(),
            });
        }
        let w2 = cache.hidden.transpose_matmul(grad_output)?;
        let b2 = grad_output.column_sums();
        let mut grad_hidden = grad_output.matmul_transpose(&self.output.weights)?;
        for (g, h) in grad_hidden
            .as_mut_slice()
            .iter_mut()
            .zip(cache.hidden.as_slice())
        {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let w1 = cache.input.transpose_matmul(&grad_hidden)?;
        let b1 = grad_hidden.column_sums();
        Ok(HeadGrads { w1, b1, w2, b2 })
    }
}

/// Metadata carried into the model file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Fingerprint of the taxonomy the head was trained against.
    pub fingerprint: String,
    pub seed: u64,
}

/// Classifier head: hidden 512 ReLU, then one logit per fine class.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossEntropyHead {
    pub net: TwoLayer,
    pub meta: ModelMeta,
}

impl CrossEntropyHead {
    pub fn n_classes(&self) -> usize {
        self.net.out_dim()
    }
}

/// Projection head: hidden 512 ReLU, then a linear 512-unit layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveHead {
    pub net: TwoLayer,
    pub meta: ModelMeta,
}

impl ContrastiveHead {
    /// A head whose projection equals its (normalized) input exactly:
    /// `relu(x) − relu(−x) = x`, using a hidden layer of `2·dim` units.
    pub fn identity(dim: usize) -> Self {
        let mut net = TwoLayer::zeros(dim, 2 * dim, dim);
        for i in 0..dim {
            net.hidden.weights.set(i, i, 1.0);
            net.hidden.weights.set(i, dim + i, -1.0);
            net.output.weights.set(i, i, 1.0);
            net.output.weights.set(dim + i, i, -1.0);
        }
        Self {
            net,
            meta: ModelMeta::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    CrossEntropy(CrossEntropyHead),
    Contrastive(ContrastiveHead),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::CrossEntropy(_) => HeadKind::CrossEntropy,
            Head::Contrastive(_) => HeadKind::Contrastive,
        }
    }

    pub fn net(&self) -> &TwoLayer {
        match self {
            Head::CrossEntropy(h) => &h.net,
            Head::Contrastive(h) => &h.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut TwoLayer {
        match self {
            Head::CrossEntropy(h) => &mut h.net,
            Head::Contrastive(h) => &mut h.net,
        }
    }

    pub fn meta(&self) -> &ModelMeta {
        match self {
            Head::CrossEntropy(h) => &h.meta,
            Head::Contrastive(h) => &h.meta,
        }
    }

    pub fn meta_mut(&mut self) -> &mut ModelMeta {
        match self {
            Head::CrossEntropy(h) => &mut h.meta,
            Head::Contrastive(h) => &mut h.meta,
        }
    }

    pub fn into_ce(self) -> Result<CrossEntropyHead> {
        match self {
            Head::CrossEntropy(h) => Ok(h),
            other => Err(Error::KindMismatch {
                expected: "ce",
                found: other.kind().name(),
            }),
        }
    }

    pub fn into_contrastive(self) -> Result<ContrastiveHead> {
        match self {
            Head::Contrastive(h) => Ok(h),
            other => Err(Error::KindMismatch {
                expected: "contrastive",
                found: other.kind().name(),
            }),
        }
    }
}

/// Builds a freshly initialized head. `out_dim` is the class count for the
/// cross-entropy head and the projection width for the contrastive head.
pub fn init_head_with(
    kind: HeadKind,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    seed: u64,
) -> Result<Head> {
    let net = TwoLayer::init(in_dim, hidden, out_dim, seed)?;
    let meta = ModelMeta {
        fingerprint: String::new(),
        seed,
    };
    Ok(match kind {
        HeadKind::CrossEntropy => Head::CrossEntropy(CrossEntropyHead { net, meta }),
        HeadKind::Contrastive => Head::Contrastive(ContrastiveHead { net, meta }),
    })
}

/// Head with the default 512-unit hidden layer. `n_classes` is ignored for
/// the contrastive head, which projects to [`PROJECTION_DIM`].
pub fn init_head(kind: HeadKind, in_dim: usize, n_classes: usize, seed: u64) -> Result<Head> {
    let out = match kind {
        HeadKind::CrossEntropy => n_classes,
        HeadKind::Contrastive => PROJECTION_DIM,
    };
    init_head_with(kind, in_dim, HIDDEN_UNITS, out, seed)
}

pub fn forward_ce(head: &CrossEntropyHead, batch: &DenseMatrix) -> Result<ForwardCache> {
    head.net.forward(batch)
}

pub fn forward_proj(head: &ContrastiveHead, batch: &DenseMatrix) -> Result<ForwardCache> {
    head.net.forward(batch)
}

const MODEL_FORMAT: &str = "clipe-model";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    kind: HeadKind,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_classes: Option<usize>,
    fingerprint: String,
    seed: u64,
}

/// Model file: one JSON header line, then the parameters as f32 LE in the
/// order W1, b1, W2, b2.
pub fn encode_model(head: &Head) -> Result<Vec<u8>> {
    let net = head.net();
    if !net.is_finite() {
        return Err(Error::NonFinite);
    }
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        kind: head.kind(),
        in_dim: net.in_dim(),
        hidden: net.hidden_dim(),
        out_dim: net.out_dim(),
        n_classes: matches!(head, Head::CrossEntropy(_)).then(|| net.out_dim()),
        fingerprint: head.meta().fingerprint.clone(),
        seed: head.meta().seed,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for slice in net.slices() {
        for &v in slice {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Head> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptModel("missing header line".into()))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::CorruptModel(format!("bad header: {e}")))?;
    if header.format != MODEL_FORMAT || header.version != MODEL_VERSION {
        return Err(Error::CorruptModel(format!(
            "unsupported format {:?} v{}",
            header.format, header.version
        )));
    }
    if header.kind == HeadKind::CrossEntropy && header.n_classes != Some(header.out_dim) {
        return Err(Error::CorruptModel(
            "n_classes disagrees with out_dim".into(),
        ));
    }
    let mut net = TwoLayer::zeros(header.in_dim, header.hidden, header.out_dim);
    let blob = &bytes[newline + 1..];
    let expected = net.param_count() * 4;
    if blob.len() != expected {
        return Err(Error::CorruptModel(format!(
            "parameter blob is {} bytes, shapes need {expected}",
            blob.len()
        )));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for slice in net.slices_mut() {
        for v in slice.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    if !net.is_finite() {
        return Err(Error::CorruptModel("non-finite parameter".into()));
    }
    let meta = ModelMeta {
        fingerprint: header.fingerprint,
        seed: header.seed,
    };
    Ok(match header.kind {
        HeadKind::CrossEntropy => Head::CrossEntropy(CrossEntropyHead { net, meta }),
        HeadKind::Contrastive => Head::Contrastive(ContrastiveHead { net, meta }),
    })
}

pub fn save_model(head: &Head, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(head)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Head> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
