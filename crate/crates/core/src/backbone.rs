//! Two-stream feature extraction: independent global and head-shoulder
//! encoders, generalized-mean pooling, and concatenation fusion.

use std::fmt;
use std::path::{Path, PathBuf};

use agm_autograd::{CustomOp, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AgmError, Result};
use crate::imaging::{self, Image};
use crate::nn::{BatchNorm, Conv, Ctx, Init};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchTag {
    Global,
    HeadShoulder,
    Joint,
}

impl BranchTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchTag::Global => "global",
            BranchTag::HeadShoulder => "head_shoulder",
            BranchTag::Joint => "joint",
        }
    }
}

impl fmt::Display for BranchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Four stride-2 stages of bias-free 3×3 convolution, batch normalization
/// and ReLU; widths `C/8, C/4, C/2, C`.
#[derive(Clone, Debug)]
pub struct BranchNet {
    pub tag: BranchTag,
    pub input_h: usize,
    pub input_w: usize,
    pub channels: usize,
    stages: Vec<(Conv, BatchNorm)>,
}

impl BranchNet {
    pub fn new(
        store: &mut ParamStore,
        tag: BranchTag,
        input_h: usize,
        input_w: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels < 8 || channels % 8 != 0 {
            return Err(AgmError::Config(format!(
                "branch channels must be a positive multiple of 8, got {channels}"
            )));
        }
        if input_h == 0 || input_w == 0 {
            return Err(AgmError::Config("branch input size must be positive".into()));
        }
        let widths = [channels / 8, channels / 4, channels / 2, channels];
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(widths.len());
        for (i, &c_out) in widths.iter().enumerate() {
            let name = format!("{tag}.stage{i}");
            let conv = Conv::new(store, &format!("{name}.conv"), c_in, c_out, 3, 2, false, Init::Kaiming, rng);
            let bn = BatchNorm::new(store, &format!("{name}.bn"), c_out);
            stages.push((conv, bn));
            c_in = c_out;
        }
        Ok(BranchNet {
            tag,
            input_h,
            input_w,
            channels,
            stages,
        })
    }

    /// Spatial size of the output feature map.
    pub fn output_size(&self) -> (usize, usize) {
        let mut hw = (self.input_h, self.input_w);
        for _ in &self.stages {
            hw = (
                agm_autograd::conv2d_output_size(hw.0, 3, 2, 1),
                agm_autograd::conv2d_output_size(hw.1, 3, 2, 1),
            );
        }
        hw
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.input_h, self.input_w) {
            return Err(AgmError::Resolution {
                branch: self.tag.to_string(),
                expected_h: self.input_h,
                expected_w: self.input_w,
                actual_h: h,
                actual_w: w,
            });
        }
        Ok(())
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (_, c, h, w) = cx.value(x).dims4();
        if c != 3 {
            return Err(AgmError::ShapeMismatch(format!("{} branch expects 3 input channels, got {c}", self.tag)));
        }
        self.check_input(h, w)?;
        let mut y = x;
        for (conv, bn) in &self.stages {
            y = conv.forward(cx, y);
            y = bn.forward(cx, y);
            y = cx.graph.relu(y);
        }
        Ok(y)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(|(conv, bn)| [conv.weight, bn.gamma, bn.beta])
            .collect()
    }
}

/// Feature maps of a batch in evaluation mode, shape `N × C × H' × W'`.
pub fn extract(net: &BranchNet, store: &ParamStore, batch: &[&Image]) -> Result<Tensor> {
    for img in batch {
        net.check_input(img.height(), img.width())?;
    }
    let x = imaging::to_tensor(batch)?;
    let mut cx = Ctx::eval(store);
    let xv = cx.graph.constant(x);
    let y = net.forward(&mut cx, xv)?;
    Ok(cx.value(y).clone())
}

/// Generalized-mean pooling with a learnable exponent, shared across
/// channels or one per channel.
#[derive(Clone, Debug)]
pub struct GemPooler {
    pub p: ParamId,
    pub eps: f64,
}

pub const GEM_INIT_P: f64 = 3.0;

impl GemPooler {
    pub fn new(store: &mut ParamStore, name: &str, channels: Option<usize>) -> Self {
        let len = channels.unwrap_or(1);
        GemPooler {
            p: store.add(format!("{name}.gem_p"), Tensor::full(&[len], GEM_INIT_P)),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, fmap: Var) -> Var {
        let p = cx.param(self.p);
        let out = gem_pool(cx.value(fmap), cx.value(p).data(), self.eps);
        cx.graph.custom(Box::new(GemOp { eps: self.eps }), &[fmap, p], out)
    }

    /// Keeps the exponent in the valid range `p ≥ 1` after an update.
    pub fn clamp(&self, store: &mut ParamStore) {
        for v in store.get_mut(self.p).data_mut() {
            *v = v.max(1.0);
        }
    }
}

fn exponent(p: &[f64], c: usize) -> f64 {
    if p.len() == 1 {
        p[0]
    } else {
        p[c]
    }
}

/// Per channel `(mean_s max(x_s, ε)^p)^(1/p)` over an `N × C × H × W` map,
/// evaluated as `m · (mean (z/m)^p)^(1/p)` with `m` the channel maximum so
/// large exponents cannot overflow.
pub fn gem_pool(fmap: &Tensor, p: &[f64], eps: f64) -> Tensor {
    let (n, c, h, w) = fmap.dims4();
    let s = h * w;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for ch in 0..c {
            let pe = exponent(p, ch);
            let base = (i * c + ch) * s;
            let z = &fmap.data()[base..base + s];
            let m = z.iter().fold(eps, |a, &v| a.max(v));
            let mean = z.iter().map(|&v| (v.max(eps) / m).powf(pe)).sum::<f64>() / s as f64;
            out.data_mut()[i * c + ch] = m * mean.powf(1.0 / pe);
        }
    }
    out
}

#[derive(Debug)]
struct GemOp {
    eps: f64,
}

impl CustomOp for GemOp {
    fn name(&self) -> &str {
        "gem_pool"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (x, p) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.dims4();
        let s = h * w;
        let mut dx = Tensor::zeros(x.shape());
        let mut dp = Tensor::zeros(p.shape());
        for i in 0..n {
            for ch in 0..c {
                let pe = exponent(p.data(), ch);
                let y = output.data()[i * c + ch];
                let g = grad_out.data()[i * c + ch];
                let base = (i * c + ch) * s;
                let mut acc = 0.0;
                for k in 0..s {
                    let xv = x.data()[base + k];
                    let ratio = xv.max(self.eps) / y;
                    if xv > self.eps {
                        dx.data_mut()[base + k] = g * ratio.powf(pe - 1.0) / s as f64;
                    }
                    acc += ratio.powf(pe) * ratio.ln();
                }
                let slot = if p.len() == 1 { 0 } else { ch };
                dp.data_mut()[slot] += g * (y / pe) * acc / s as f64;
            }
        }
        vec![Some(dx), Some(dp)]
    }
}

/// Row-aligned embeddings with identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Tensor,
    labels: Vec<u32>,
    pub branch: BranchTag,
}

impl EmbeddingBatch {
    pub fn new(vectors: Tensor, labels: Vec<u32>, branch: BranchTag) -> Result<Self> {
        if vectors.ndim() != 2 {
            return Err(AgmError::ShapeMismatch(format!(
                "embeddings must be N×D, got shape {:?}",
                vectors.shape()
            )));
        }
        let (n, _) = vectors.dims2();
        if n == 0 {
            return Err(AgmError::Precondition("embedding batch is empty".into()));
        }
        if labels.len() != n {
            return Err(AgmError::LabelMismatch(format!("{} labels for {n} embeddings", labels.len())));
        }
        if !vectors.all_finite() {
            return Err(AgmError::NonFinite {
                term: format!("{branch} embedding"),
            });
        }
        Ok(EmbeddingBatch {
            vectors,
            labels,
            branch,
        })
    }

    /// Convenience constructor from row slices.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u32>, branch: BranchTag) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(AgmError::ShapeMismatch("ragged embedding rows".into()));
        }
        let data = rows.concat();
        Self::new(Tensor::new(&[rows.len(), d], data), labels, branch)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }
}

/// Row-wise concatenation `[v_g | v_h]`; both batches must describe the
/// same samples in the same order.
pub fn fuse_concat(v_g: &EmbeddingBatch, v_h: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    if v_g.labels != v_h.labels {
        return Err(AgmError::LabelMismatch(
            "global and head-shoulder embeddings are not row-aligned".into(),
        ));
    }
    let (n, dg) = v_g.vectors.dims2();
    let dh = v_h.dim();
    let mut data = Vec::with_capacity(n * (dg + dh));
    for i in 0..n {
        data.extend_from_slice(v_g.row(i));
        data.extend_from_slice(v_h.row(i));
    }
    EmbeddingBatch::new(Tensor::new(&[n, dg + dh], data), v_g.labels.clone(), BranchTag::Joint)
}

const EMBEDDING_MAGIC: &[u8; 8] = b"AGMEMB\0\0";
const EMBEDDING_VERSION: u32 = 1;

/// Path of the JSON sidecar that accompanies an embedding file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

/// Writes `batch` as a little-endian matrix file (magic, version, N, D, N
/// u32 labels, N·D f64 values) and a JSON sidecar describing it. `extra`
/// object fields are merged into the sidecar.
pub fn write_embeddings(batch: &EmbeddingBatch, path: &Path, extra: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| AgmError::io(parent, e))?;
    }
    let (n, d) = batch.vectors.dims2();
    let mut out = Vec::with_capacity(28 + 4 * n + 8 * n * d);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for &l in &batch.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for v in batch.vectors.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| AgmError::io(path, e))?;

    let mut meta = serde_json::json!({
        "format_version": EMBEDDING_VERSION,
        "num_rows": n,
        "dim": d,
        "branch": batch.branch,
        "labels": batch.labels,
    });
    if let (Some(m), Some(e)) = (meta.as_object_mut(), extra.as_object()) {
        for (k, v) in e {
            m.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    text.push('\n');
    std::fs::write(&side, text).map_err(|e| AgmError::io(&side, e))
}

/// Reads a matrix file written by [`write_embeddings`]. The branch tag is
/// taken from the sidecar when present, `Joint` otherwise.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingBatch> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(AgmError::MissingFile(path.into())),
        Err(e) => return Err(AgmError::io(path, e)),
    };
    let bad = |what: &str| AgmError::Data(format!("{}: {what}", path.display()));
    if bytes.len() < 28 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad("not an embedding file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != EMBEDDING_VERSION {
        return Err(bad(&format!("unsupported embedding format version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(8))
        .and_then(|b| b.checked_add(28 + 4 * n));
    if expected != Some(bytes.len()) {
        return Err(bad("length does not match its header"));
    }
    let body = &bytes[28..];
    let labels = body[..4 * n]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let data = body[4 * n..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let branch = std::fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| serde_json::from_value(v["branch"].clone()).ok())
        .unwrap_or(BranchTag::Joint);
    EmbeddingBatch::new(Tensor::new(&[n, d], data), labels, branch)
}
