//! Linear image and hashed bag-of-tokens text encoders, a two-layer GCN graph
//! encoder, their analytic backward passes, and the checkpoint format.
//!
//! Every emitted embedding row is unit norm (zero pre-activations stay zero and
//! are reported through `zero_rows`).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph_builder::{normalized_adjacency, ReportGraph, NODE_FEATURE_DIM};
use crate::numerics::{dot, l2_normalize_backward, l2_normalize_rows, matmul, matmul_at, Matrix};
use crate::report_nlp::Report;
use crate::seed;

pub const CHECKPOINT_FORMAT: &str = "clinalign-checkpoint";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const TEXT_HASH_SEED: u64 = 0x7465_7874_6861_7368;
/// Graphs per deterministic gradient-accumulation chunk.
const GRAPH_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub text_hash_dim: usize,
    pub graph_input_dim: usize,
    pub graph_hidden: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            text_hash_dim: 4096,
            graph_input_dim: NODE_FEATURE_DIM,
            graph_hidden: 256,
            embed_dim: 512,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.text_hash_dim == 0 || self.graph_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("encoder dimensions must be >= 1".into()));
        }
        if self.graph_input_dim != NODE_FEATURE_DIM {
            return Err(Error::Config(format!(
                "graph_input_dim must be {NODE_FEATURE_DIM}, got {}",
                self.graph_input_dim
            )));
        }
        Ok(())
    }
}

/// Parameter names in checkpoint order.
pub const PARAM_NAMES: [&str; 4] = ["image.w", "text.w", "graph.w1", "graph.w2"];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// feature_dim × D
    pub w_img: Matrix,
    /// text_hash_dim × D
    pub w_txt: Matrix,
    /// 772 × hidden
    pub w1: Matrix,
    /// hidden × D
    pub w2: Matrix,
}

fn uniform_init(rows: usize, cols: usize, base: u64, tag: u64) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    let mut rng = seed::rng(base, &[0x656e_63, tag]);
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::new(rows, cols, data).expect("finite init")
}

impl EncoderParams {
    /// Seeded uniform(±1/√fan_in) initialization.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Self {
            config,
            w_img: uniform_init(config.feature_dim, d, config.seed, 0),
            w_txt: uniform_init(config.text_hash_dim, d, config.seed, 1),
            w1: uniform_init(config.graph_input_dim, config.graph_hidden, config.seed, 2),
            w2: uniform_init(config.graph_hidden, d, config.seed, 3),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self { config: self.config, w_img: z(&self.w_img), w_txt: z(&self.w_txt), w1: z(&self.w1), w2: z(&self.w2) }
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.w_img, &self.w_txt, &self.w1, &self.w2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_img, &mut self.w_txt, &mut self.w1, &mut self.w2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }
}

/// Sparse hashed token counts, sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct TextInput {
    pub entries: Vec<(usize, f64)>,
}

/// Unigram counts plus within-sentence bigram counts, hashed to `dim` buckets.
/// A multiset over sentences, so sentence order never matters.
pub fn text_features(report: &Report, dim: usize) -> TextInput {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    let mut add = |key: String| {
        let h = seed::hash_with_seed(TEXT_HASH_SEED, key.as_bytes());
        *counts.entry((h % dim as u64) as usize).or_insert(0.0) += 1.0;
    };
    for s in &report.sentences {
        for (i, t) in s.tokens.iter().enumerate() {
            add(format!("u:{t}"));
            if let Some(next) = s.tokens.get(i + 1) {
                add(format!("b:{t} {next}"));
            }
        }
    }
    TextInput { entries: counts.into_iter().collect() }
}

/// Single-token input, for probing.
pub fn token_index(token: &str, dim: usize) -> usize {
    (seed::hash_with_seed(TEXT_HASH_SEED, format!("u:{token}").as_bytes()) % dim as u64) as usize
}

/// Graph encoder inputs: normalized adjacency and node features.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub adjacency: Matrix,
    pub features: Matrix,
}

impl GraphInput {
    pub fn from_graph(g: &ReportGraph) -> Self {
        Self { adjacency: normalized_adjacency(g), features: g.node_features().clone() }
    }
}

/// Rows are unit norm; `norms` are the pre-normalization norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub unit: Matrix,
    pub norms: Vec<f64>,
    pub zero_rows: Vec<bool>,
}

fn encoded(pre: &Matrix) -> Encoded {
    let n = l2_normalize_rows(pre);
    Encoded { unit: n.matrix, norms: n.norms, zero_rows: n.zero_rows }
}

fn check_width(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::invalid(format!("{what} width {got} does not match encoder ({want})")));
    }
    Ok(())
}

/// B×feature_dim → B×D unit rows.
pub fn encode_image(features: &Matrix, params: &EncoderParams) -> Result<Encoded> {
    check_width("image feature", features.cols(), params.w_img.rows())?;
    Ok(encoded(&matmul(features, &params.w_img)?))
}

fn text_pre(inputs: &[TextInput], params: &EncoderParams) -> Result<Matrix> {
    let d = params.w_txt.cols();
    let mut pre = Matrix::zeros(inputs.len(), d);
    for (i, t) in inputs.iter().enumerate() {
        let row = pre.row_mut(i);
        for &(k, c) in &t.entries {
            if k >= params.w_txt.rows() {
                return Err(Error::invalid(format!("text feature index {k} out of range")));
            }
            for (o, w) in row.iter_mut().zip(params.w_txt.row(k)) {
                *o += c * w;
            }
        }
    }
    Ok(pre)
}

pub fn encode_texts(inputs: &[TextInput], params: &EncoderParams) -> Result<Encoded> {
    Ok(encoded(&text_pre(inputs, params)?))
}

pub fn encode_text(report: &Report, params: &EncoderParams) -> Vec<f64> {
    let input = text_features(report, params.config.text_hash_dim);
    encode_texts(&[input], params).expect("indices are in range").unit.row(0).to_vec()
}

#[derive(Debug, Clone, PartialEq)]
struct GraphCache {
    /// Â·X·W1, pre-relu.
    z1: Matrix,
    /// Column mean of Â·relu(z1).
    pooled_hidden: Vec<f64>,
}

fn graph_forward(g: &GraphInput, params: &EncoderParams) -> Result<(Vec<f64>, GraphCache)> {
    check_width("graph node feature", g.features.cols(), params.w1.rows())?;
    let n = g.features.rows();
    if g.adjacency.shape() != (n, n) || n == 0 {
        return Err(Error::invalid("graph adjacency does not match node count"));
    }
    let z1 = matmul(&g.adjacency, &matmul(&g.features, &params.w1)?)?;
    let h = z1.cols();
    // mean_rows(Â·H1) = (1/n)·(column sums of Â)·H1
    let mut pooled_hidden = vec![0.0; h];
    for j in 0..n {
        let c: f64 = (0..n).map(|i| g.adjacency.get(i, j)).sum::<f64>() / n as f64;
        for (p, z) in pooled_hidden.iter_mut().zip(z1.row(j)) {
            *p += c * z.max(0.0);
        }
    }
    let d = params.w2.cols();
    let mut pooled = vec![0.0; d];
    for (k, &m) in pooled_hidden.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (p, w) in pooled.iter_mut().zip(params.w2.row(k)) {
            *p += m * w;
        }
    }
    Ok((pooled, GraphCache { z1, pooled_hidden }))
}

fn graph_pre(inputs: &[GraphInput], params: &EncoderParams) -> Result<(Matrix, Vec<GraphCache>)> {
    let outs: Vec<(Vec<f64>, GraphCache)> =
        inputs.par_iter().map(|g| graph_forward(g, params)).collect::<Result<_>>()?;
    let d = params.w2.cols();
    let mut pre = Matrix::zeros(inputs.len(), d);
    let mut caches = Vec::with_capacity(inputs.len());
    for (i, (p, c)) in outs.into_iter().enumerate() {
        pre.row_mut(i).copy_from_slice(&p);
        caches.push(c);
    }
    Ok((pre, caches))
}

pub fn encode_graphs(inputs: &[GraphInput], params: &EncoderParams) -> Result<Encoded> {
    Ok(encoded(&graph_pre(inputs, params)?.0))
}

pub fn encode_graph(g: &ReportGraph, params: &EncoderParams) -> Vec<f64> {
    encode_graphs(&[GraphInput::from_graph(g)], params).expect("graph input matches encoder").unit.row(0).to_vec()
}

/// Encoder inputs of one batch. Text and graph rows are `[originals; hard negatives]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs {
    pub images: Matrix,
    pub texts: Vec<TextInput>,
    pub graphs: Vec<GraphInput>,
}

/// Unit-row embeddings `v`, `T = [T1; T2]` and optionally `G = [G1; G2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub images: Matrix,
    pub texts: Matrix,
    pub graphs: Option<Matrix>,
}

impl BatchEmbeddings {
    pub fn batch_size(&self) -> usize {
        self.images.rows()
    }

    pub fn has_hard_negatives(&self) -> bool {
        self.texts.rows() == 2 * self.images.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    image: Encoded,
    text: Encoded,
    graph: Option<(Encoded, Vec<GraphCache>)>,
}

/// Upstream gradients w.r.t. the embedding matrices of [`BatchEmbeddings`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub images: Matrix,
    pub texts: Matrix,
    pub graphs: Option<Matrix>,
}

pub fn forward(params: &EncoderParams, inputs: &BatchInputs) -> Result<(BatchEmbeddings, ForwardCache)> {
    let image = encode_image(&inputs.images, params)?;
    let text = encode_texts(&inputs.texts, params)?;
    let graph = if inputs.graphs.is_empty() {
        None
    } else {
        let (pre, caches) = graph_pre(&inputs.graphs, params)?;
        Some((encoded(&pre), caches))
    };
    let emb = BatchEmbeddings {
        images: image.unit.clone(),
        texts: text.unit.clone(),
        graphs: graph.as_ref().map(|(e, _)| e.unit.clone()),
    };
    Ok((emb, ForwardCache { image, text, graph }))
}

fn pre_grad(enc: &Encoded, upstream: &Matrix) -> Result<Matrix> {
    if enc.unit.shape() != upstream.shape() {
        return Err(Error::invalid(format!(
            "upstream gradient shape {:?} does not match cached embeddings {:?}",
            upstream.shape(),
            enc.unit.shape()
        )));
    }
    let mut g = Matrix::zeros(upstream.rows(), upstream.cols());
    for r in 0..upstream.rows() {
        g.row_mut(r).copy_from_slice(&l2_normalize_backward(enc.unit.row(r), enc.norms[r], upstream.row(r)));
    }
    Ok(g)
}

fn graph_param_grads(
    inputs: &[GraphInput],
    caches: &[GraphCache],
    g_pre: &Matrix,
    params: &EncoderParams,
) -> (Matrix, Matrix) {
    let partials: Vec<(Matrix, Matrix)> = inputs
        .par_chunks(GRAPH_CHUNK)
        .zip(caches.par_chunks(GRAPH_CHUNK))
        .enumerate()
        .map(|(ci, (gs, cs))| {
            let mut gw1 = Matrix::zeros(params.w1.rows(), params.w1.cols());
            let mut gw2 = Matrix::zeros(params.w2.rows(), params.w2.cols());
            for (off, (g, c)) in gs.iter().zip(cs).enumerate() {
                let gp = g_pre.row(ci * GRAPH_CHUNK + off);
                if gp.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let n = g.features.rows();
                // pooled = m·W2
                for (k, &m) in c.pooled_hidden.iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    for (o, v) in gw2.row_mut(k).iter_mut().zip(gp) {
                        *o += m * v;
                    }
                }
                let gm: Vec<f64> = (0..params.w2.rows()).map(|k| dot(params.w2.row(k), gp)).collect();
                // dL/dZ1[j] = colmean_j(Â) · gm ⊙ 1[z1 > 0]
                let mut gz1 = Matrix::zeros(n, gm.len());
                for j in 0..n {
                    let cj: f64 = (0..n).map(|i| g.adjacency.get(i, j)).sum::<f64>() / n as f64;
                    for ((o, &z), &gmv) in gz1.row_mut(j).iter_mut().zip(c.z1.row(j)).zip(&gm) {
                        if z > 0.0 {
                            *o = cj * gmv;
                        }
                    }
                }
                // Z1 = Â·X·W1 with Â symmetric
                let agz = matmul(&g.adjacency, &gz1).expect("shapes checked in forward");
                // gW1 += Xᵀ·(Â·gZ1), accumulated in place over the sparse rows of X
                for r in 0..n {
                    let arow = agz.row(r);
                    for (k, &x) in g.features.row(r).iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (o, v) in gw1.row_mut(k).iter_mut().zip(arow) {
                            *o += x * v;
                        }
                    }
                }
            }
            (gw1, gw2)
        })
        .collect();
    let mut gw1 = Matrix::zeros(params.w1.rows(), params.w1.cols());
    let mut gw2 = Matrix::zeros(params.w2.rows(), params.w2.cols());
    for (a, b) in &partials {
        gw1.add_assign(a);
        gw2.add_assign(b);
    }
    (gw1, gw2)
}

/// Parameter gradients from embedding gradients, through normalization,
/// mean pooling, relu and the linear maps.
pub fn backward(
    params: &EncoderParams,
    inputs: &BatchInputs,
    cache: &ForwardCache,
    upstream: &EmbeddingGrads,
) -> Result<EncoderParams> {
    let mut grads = params.zeros_like();
    let g_img = pre_grad(&cache.image, &upstream.images)?;
    grads.w_img = matmul_at(&inputs.images, &g_img)?;

    let g_txt = pre_grad(&cache.text, &upstream.texts)?;
    for (i, t) in inputs.texts.iter().enumerate() {
        let gr = g_txt.row(i);
        for &(k, c) in &t.entries {
            for (o, v) in grads.w_txt.row_mut(k).iter_mut().zip(gr) {
                *o += c * v;
            }
        }
    }

    match (&cache.graph, &upstream.graphs) {
        (Some((enc, caches)), Some(ug)) => {
            let g_pre = pre_grad(enc, ug)?;
            let (gw1, gw2) = graph_param_grads(&inputs.graphs, caches, &g_pre, params);
            grads.w1 = gw1;
            grads.w2 = gw2;
        }
        (None, None) => {}
        _ => return Err(Error::invalid("graph gradients and graph forward cache disagree")),
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize)]
struct CheckpointPayload<'a> {
    format: &'a str,
    format_version: u32,
    config: &'a EncoderConfig,
    meta: &'a serde_json::Value,
    params: &'a [ParamRecord],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    format_version: u32,
    config: EncoderConfig,
    meta: serde_json::Value,
    params: Vec<ParamRecord>,
    checksum: String,
}

impl CheckpointFile {
    fn checksum(&self) -> Result<String> {
        let payload = CheckpointPayload {
            format: &self.format,
            format_version: self.format_version,
            config: &self.config,
            meta: &self.meta,
            params: &self.params,
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&payload)?)))
    }
}

/// Trained parameters plus free-form metadata (e.g. the training configuration).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let params = PARAM_NAMES
            .iter()
            .zip(self.params.tensors())
            .map(|(name, m)| ParamRecord { name: name.to_string(), shape: [m.rows(), m.cols()], data: m.data().to_vec() })
            .collect();
        let mut file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.params.config,
            meta: self.meta.clone(),
            params,
            checksum: String::new(),
        };
        file.checksum = file.checksum()?;
        let mut s = serde_json::to_string(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        if let Some(v) = raw.get("format_version").and_then(|v| v.as_u64()) {
            if v != CHECKPOINT_FORMAT_VERSION as u64 {
                return Err(Error::VersionMismatch { found: v as u32, expected: CHECKPOINT_FORMAT_VERSION });
            }
        }
        let file: CheckpointFile = serde_json::from_value(raw)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("not a checkpoint: format {:?}", file.format)));
        }
        let computed = file.checksum()?;
        if computed != file.checksum {
            return Err(Error::Checksum { stored: file.checksum, computed });
        }
        let config = file.config;
        config.validate()?;
        let expected = EncoderParams::init_shapes(&config);
        if file.params.len() != PARAM_NAMES.len() {
            return Err(Error::invalid("checkpoint parameter count mismatch"));
        }
        let mut mats = Vec::new();
        for ((rec, name), shape) in file.params.into_iter().zip(PARAM_NAMES).zip(expected) {
            if rec.name != name || rec.shape != shape {
                return Err(Error::invalid(format!(
                    "checkpoint parameter {} {:?} does not match expected {} {:?}",
                    rec.name, rec.shape, name, shape
                )));
            }
            mats.push(Matrix::new(shape[0], shape[1], rec.data)?);
        }
        let w2 = mats.pop().unwrap();
        let w1 = mats.pop().unwrap();
        let w_txt = mats.pop().unwrap();
        let w_img = mats.pop().unwrap();
        Ok(Self { params: EncoderParams { config, w_img, w_txt, w1, w2 }, meta: file.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_json()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl EncoderParams {
    fn init_shapes(c: &EncoderConfig) -> [[usize; 2]; 4] {
        [
            [c.feature_dim, c.embed_dim],
            [c.text_hash_dim, c.embed_dim],
            [c.graph_input_dim, c.graph_hidden],
            [c.graph_hidden, c.embed_dim],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_builder::{extract_graph, GraphNode, NodeClass};
    use crate::numerics::norm;
    use crate::report_nlp::Lexicon;

    fn small() -> EncoderParams {
        EncoderParams::init(EncoderConfig {
            feature_dim: 6,
            text_hash_dim: 64,
            graph_hidden: 5,
            embed_dim: 4,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    fn report(text: &str) -> Report {
        Report::parse("r", text).unwrap()
    }

    #[test]
    fn image_rows_are_unit_and_zero_rows_flagged() {
        let p = small();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 0.0, -1.0, 0.5, 3.0], vec![0.0; 6]]).unwrap();
        let e = encode_image(&x, &p).unwrap();
        assert!((norm(e.unit.row(0)) - 1.0).abs() < 1e-12);
        assert_eq!(e.zero_rows, vec![false, true]);
        assert!(encode_image(&Matrix::zeros(1, 5), &p).is_err());
    }

    #[test]
    fn identity_image_weights_keep_direction() {
        let mut p = small();
        p.w_img = Matrix::zeros(6, 4);
        for i in 0..4 {
            p.w_img.set(i, i, 1.0);
        }
        let x = Matrix::from_rows(&[vec![0.6, 0.8, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(encode_image(&x, &p).unwrap().unit.row(0), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn text_is_shuffle_invariant_and_single_token_follows_row() {
        let p = small();
        let a = report("Right pleural effusion. No pneumothorax is seen. Mild cardiomegaly.");
        let b = a.reordered(&[2, 0, 1]);
        assert_eq!(encode_text(&a, &p), encode_text(&b, &p));
        let one = report("Effusion.");
        let row = p.w_txt.row(token_index("effusion", 64));
        let n = norm(row);
        let expect: Vec<f64> = row.iter().map(|v| v / n).collect();
        let got = encode_text(&one, &p);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn single_node_graph_reduces_to_mlp() {
        let p = small();
        let g = ReportGraph::new(vec![GraphNode::new("effusion", NodeClass::ObsDp)], []).unwrap();
        let x = g.node_features();
        let h: Vec<f64> = matmul(x, &p.w1).unwrap().data().iter().map(|v| v.max(0.0)).collect();
        let out = matmul(&Matrix::new(1, h.len(), h).unwrap(), &p.w2).unwrap();
        let n = norm(out.row(0));
        let got = encode_graph(&g, &p);
        for (g, o) in got.iter().zip(out.row(0)) {
            assert!((g - o / n).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_embedding_ignores_node_order() {
        let p = small();
        let lex = Lexicon::default_ref();
        let r = report("Right pleural effusion. Left lower lobe atelectasis is present.");
        let g = extract_graph(&r, lex);
        let g2 = extract_graph(&r.reordered(&[1, 0]), lex);
        let (a, b) = (encode_graph(&g, &p), encode_graph(&g2, &p));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_projection_is_null() {
        let p = small();
        let lex = Lexicon::default_ref();
        let r = report("Right pleural effusion.");
        let inputs = BatchInputs {
            images: Matrix::from_rows(&[vec![1.0, 0.5, -0.3, 0.2, 0.0, 1.0]]).unwrap(),
            texts: vec![text_features(&r, 64)],
            graphs: vec![GraphInput::from_graph(&extract_graph(&r, lex))],
        };
        let (emb, cache) = forward(&p, &inputs).unwrap();
        let zero = EmbeddingGrads {
            images: Matrix::zeros(1, 4),
            texts: Matrix::zeros(1, 4),
            graphs: Some(Matrix::zeros(1, 4)),
        };
        let g = backward(&p, &inputs, &cache, &zero).unwrap();
        assert!(g.tensors().iter().all(|m| m.data().iter().all(|v| *v == 0.0)));
        // upstream along the output direction itself
        let along = EmbeddingGrads {
            images: emb.images.clone(),
            texts: emb.texts.clone(),
            graphs: emb.graphs.clone(),
        };
        let g = backward(&p, &inputs, &cache, &along).unwrap();
        assert!(g.tensors().iter().all(|m| m.frobenius_norm() < 1e-12));
        let bad = EmbeddingGrads { images: Matrix::zeros(2, 4), ..zero };
        assert!(backward(&p, &inputs, &cache, &bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let ck = Checkpoint { params: small(), meta: serde_json::json!({"note": "x"}) };
        let a = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), a);
        let needle = "\"data\":[";
        let pos = a.find(needle).unwrap() + needle.len();
        let digit = a[pos..].find(|c: char| c.is_ascii_digit() && c != '0').unwrap() + pos;
        let mut bad = a.clone().into_bytes();
        bad[digit] = if bad[digit] == b'9' { b'8' } else { bad[digit] + 1 };
        let bad = String::from_utf8(bad).unwrap();
        assert!(matches!(Checkpoint::from_json(&bad), Err(Error::Checksum { .. })));
        let old = a.replacen("\"format_version\":1", "\"format_version\":7", 1);
        assert!(matches!(
            Checkpoint::from_json(&old),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }
}
