//! Two-branch gait recognizer.
//!
//! Both branches are stacks of seven blocks (one basic, six residual), each a
//! hypergraph convolution over joints followed by a temporal convolution per
//! joint. The source branch sees the input sequence; the generative branch
//! sees one sequence per configured view through view-specific head blocks
//! and a set of shared tail blocks, and averages the per-view features. The
//! embedding is the normalized concatenation of both branch features.

mod train;

pub use train::{
    held_out_rank1, load_recognizer, read_train_log, save_recognizer, train_log_csv, train_recognizer, OracleViews, RecognizerTrainConfig,
    TrainLogRow, ViewMode, ViewSource, RECOGNIZER_KIND, TRAIN_LOG_HEADER,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{standardization, Condition, GaitSample};
use crate::error::{Error, Result};
use crate::geometry::CASIA_VIEWS;
use crate::hgc::{adjacency_set, Aggregate, AdjacencySet, HgcLayerParams};
use crate::nn::params::{glorot, he, uniform};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::rng;
use crate::skeleton::{canonical_hypergraphs, HypergraphSpec, PoseSequence, SkeletonTopology};

pub use crate::nn::losses::supcon as supcon_with_grad;

/// Channel schedule of the seven blocks at full width.
pub const TABLE1_CHANNELS: [usize; 7] = [64, 64, 32, 128, 128, 256, 256];
/// Blocks (0-based) that halve the temporal axis.
pub const TABLE1_STRIDED: [usize; 2] = [3, 5];
/// Fitted input statistics; stored with the parameters but never trained.
pub const INPUT_MEAN: &str = "input.mean";
pub const INPUT_SCALE: &str = "input.scale";
/// Running batch statistics of the pooled branch features, keyed by branch.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

pub fn bn_buffers(branch: &str) -> (String, String) {
    (format!("bn.{branch}.mean"), format!("bn.{branch}.var"))
}

pub const BLOCKS: usize = 7;
pub const TEMPORAL_KERNEL: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_stride: usize,
    pub temporal_kernel: usize,
}

impl BlockSpec {
    pub fn has_projection(&self) -> bool {
        self.kind == BlockKind::Residual && (self.in_channels != self.out_channels || self.temporal_stride != 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel must be odd, got {}", self.temporal_kernel)));
        }
        if !matches!(self.temporal_stride, 1 | 2) {
            return Err(Error::Config(format!("temporal stride must be 1 or 2, got {}", self.temporal_stride)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channels must be positive".into()));
        }
        Ok(())
    }
}

/// The block schedule with every width divided by `width_divisor`.
pub fn table1_blocks(input_channels: usize, width_divisor: usize, temporal_kernel: usize) -> Vec<BlockSpec> {
    let mut cin = input_channels;
    TABLE1_CHANNELS
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let out = c / width_divisor;
            let spec = BlockSpec {
                kind: if i == 0 { BlockKind::Basic } else { BlockKind::Residual },
                in_channels: cin,
                out_channels: out,
                temporal_stride: if TABLE1_STRIDED.contains(&i) { 2 } else { 1 },
                temporal_kernel,
            };
            cin = out;
            spec
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalDim {
    /// Concatenation of both branch features.
    #[default]
    Concat,
    /// A learned projection of the concatenation back to the per-branch size.
    Project256,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecognizerConfig {
    /// Target views of the generative heads; empty means the single-branch
    /// baseline.
    pub view_list: Vec<f64>,
    pub shared_blocks: usize,
    pub sequence_length: usize,
    pub tau: f64,
    pub input_channels: usize,
    /// 1 for the published widths; 8 or 16 give miniature networks with the
    /// same ratios.
    pub width_divisor: usize,
    pub temporal_kernel: usize,
    pub aggregate: Aggregate,
    pub final_dim: FinalDim,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig {
            view_list: CASIA_VIEWS.to_vec(),
            shared_blocks: 4,
            sequence_length: 60,
            tau: 0.07,
            input_channels: 3,
            width_divisor: 1,
            temporal_kernel: TEMPORAL_KERNEL,
            aggregate: Aggregate::Sum,
            final_dim: FinalDim::Concat,
        }
    }
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_blocks > BLOCKS - 1 {
            return Err(Error::Config(format!("shared_blocks must be at most {}, got {}", BLOCKS - 1, self.shared_blocks)));
        }
        if self.width_divisor == 0 || TABLE1_CHANNELS.iter().any(|c| c % self.width_divisor != 0) {
            return Err(Error::Config(format!("width divisor {} does not divide every block width", self.width_divisor)));
        }
        if self.sequence_length == 0 || self.sequence_length % 4 != 0 {
            return Err(Error::Config(format!("sequence length must be a positive multiple of 4, got {}", self.sequence_length)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.input_channels != 3 {
            return Err(Error::Config("input channels are (x, y, confidence)".into()));
        }
        for (i, v) in self.view_list.iter().enumerate() {
            if self.view_list[..i].contains(v) {
                return Err(Error::Config(format!("duplicate view {v} in view_list")));
            }
        }
        for b in self.blocks() {
            b.validate()?;
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<BlockSpec> {
        table1_blocks(self.input_channels, self.width_divisor, self.temporal_kernel)
    }

    pub fn embedding_dim_per_branch(&self) -> usize {
        TABLE1_CHANNELS[BLOCKS - 1] / self.width_divisor
    }

    pub fn has_generative_branch(&self) -> bool {
        !self.view_list.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        let c = self.embedding_dim_per_branch();
        match (self.has_generative_branch(), self.final_dim) {
            (false, _) | (true, FinalDim::Project256) => c,
            (true, FinalDim::Concat) => 2 * c,
        }
    }

    fn head_blocks(&self) -> usize {
        BLOCKS - self.shared_blocks
    }
}

/// One recognizer block's tensors.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub hgc: Vec<Tensor>,
    pub temporal_w: Tensor,
    pub temporal_b: Tensor,
    pub shortcut: Option<(Tensor, Tensor)>,
}

pub fn init_block(store: &mut ParamStore, prefix: &str, spec: &BlockSpec, heads: usize, rng: &mut impl Rng) {
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.temporal_kernel);
    for j in 0..heads {
        store.add(format!("{prefix}.hgc.w{j}"), he(rng, &[cin, cout], cin * heads));
    }
    let a = (3.0 / (k * cout) as f64).sqrt();
    store.add(format!("{prefix}.tcn.w"), uniform(rng, &[k, cout, cout], a));
    store.add(format!("{prefix}.tcn.b"), Tensor::zeros(&[cout]));
    if spec.has_projection() {
        store.add(format!("{prefix}.short.w"), glorot(rng, &[1, cin, cout], cin, cout));
        store.add(format!("{prefix}.short.b"), Tensor::zeros(&[cout]));
    }
}

/// Block over graph variables with parameters named under `prefix`.
pub fn block_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    spec: &BlockSpec,
    x: Var,
    adj: &AdjacencySet,
    aggregate: Aggregate,
) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[2] != spec.in_channels || shape[1] != adj[0].nodes() {
        return Err(Error::Contract(format!(
            "block expects T x {} x {}, got {:?}",
            adj[0].nodes(),
            spec.in_channels,
            shape
        )));
    }
    let ws: Vec<Var> = (0..adj.len()).map(|j| g.param_named(store, &format!("{prefix}.hgc.w{j}"))).collect();
    let h = g.hgc(x, &ws, adj, aggregate)?;
    let tw = g.param_named(store, &format!("{prefix}.tcn.w"));
    let tb = g.param_named(store, &format!("{prefix}.tcn.b"));
    let pad = spec.temporal_kernel / 2;
    let y = g.temporal_conv(h, tw, Some(tb), spec.temporal_stride, pad)?;
    match spec.kind {
        BlockKind::Basic => Ok(y),
        BlockKind::Residual => {
            let short = if spec.has_projection() {
                let sw = g.param_named(store, &format!("{prefix}.short.w"));
                let sb = g.param_named(store, &format!("{prefix}.short.b"));
                g.temporal_conv(x, sw, Some(sb), spec.temporal_stride, 0)?
            } else {
                x
            };
            Ok(g.add(y, short))
        }
    }
}

/// One block applied to a `T x N x C_in` array: hypergraph convolution, then
/// temporal convolution with the block stride, plus the shortcut for residual
/// blocks.
pub fn block_forward(x: &Tensor, spec: &BlockSpec, hgc: &HgcLayerParams, block: &BlockParams) -> Result<Tensor> {
    spec.validate()?;
    hgc.validate()?;
    let mut store = ParamStore::new();
    for (j, w) in hgc.weights.iter().enumerate() {
        store.add(format!("b.hgc.w{j}"), w.clone());
    }
    let cout = spec.out_channels;
    if block.temporal_w.shape != [spec.temporal_kernel, cout, cout] {
        return Err(Error::Contract(format!("temporal weights {:?} do not match the block", block.temporal_w.shape)));
    }
    store.add("b.tcn.w", block.temporal_w.clone());
    store.add("b.tcn.b", block.temporal_b.clone());
    match (&block.shortcut, spec.has_projection()) {
        (Some((w, b)), true) => {
            store.add("b.short.w", w.clone());
            store.add("b.short.b", b.clone());
        }
        (None, false) => {}
        _ => return Err(Error::Contract("shortcut weights do not match the block kind".into())),
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = block_graph(&mut g, &store, "b", spec, xv, &hgc.adjacencies, hgc.aggregate)?;
    Ok(g.value(y).clone())
}

/// Network input: standardized `(x, y)` plus confidence, `T x N x 3`.
pub fn input_tensor(seq: &PoseSequence) -> Tensor {
    let (mx, my, s) = standardization(seq);
    let mut data = Vec::with_capacity(seq.coords().len() * 3);
    for (p, &c) in seq.coords().iter().zip(seq.confidence()) {
        data.extend_from_slice(&[(p[0] - mx) / s, (p[1] - my) / s, c]);
    }
    Tensor::new(&[seq.frames(), seq.joints(), 3], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub identity: String,
    pub view_degrees: f64,
    pub condition: Condition,
    pub run: u32,
    pub vector: Vec<f64>,
    pub normalized: bool,
}

#[derive(Debug, Clone)]
pub struct Recognizer {
    pub config: RecognizerConfig,
    pub store: ParamStore,
    pub hypergraphs: Vec<HypergraphSpec>,
    adj: AdjacencySet,
}

/// Branch outputs before normalization.
pub struct BranchFeatures {
    pub alpha: Var,
    pub beta: Option<Var>,
}

impl Recognizer {
    /// Fresh parameters over the COCO-17 hypergraphs.
    pub fn new(config: RecognizerConfig, seed: u64) -> Result<Self> {
        let hgs = canonical_hypergraphs(&SkeletonTopology::coco17())?;
        Self::with_hypergraphs(config, hgs.to_vec(), seed)
    }

    pub fn with_hypergraphs(config: RecognizerConfig, hypergraphs: Vec<HypergraphSpec>, seed: u64) -> Result<Self> {
        config.validate()?;
        let adj = adjacency_set(&hypergraphs)?;
        let heads = adj.len();
        let mut rng = rng::stream(seed, "recognizer.init", &[]);
        let mut store = ParamStore::new();
        let blocks = config.blocks();
        for (i, b) in blocks.iter().enumerate() {
            init_block(&mut store, &format!("src.b{i}"), b, heads, &mut rng);
        }
        if config.has_generative_branch() {
            for v in 0..config.view_list.len() {
                for (i, b) in blocks.iter().enumerate().take(config.head_blocks()) {
                    init_block(&mut store, &format!("gen.h{v}.b{i}"), b, heads, &mut rng);
                }
            }
            for (i, b) in blocks.iter().enumerate().skip(config.head_blocks()) {
                init_block(&mut store, &format!("gen.s.b{i}"), b, heads, &mut rng);
            }
            if config.final_dim == FinalDim::Project256 {
                let c = config.embedding_dim_per_branch();
                store.add("proj.w", glorot(&mut rng, &[2 * c, c], 2 * c, c));
            }
        }
        let c = config.embedding_dim_per_branch();
        let branches: &[&str] = if config.has_generative_branch() { &["alpha", "beta"] } else { &["alpha"] };
        for b in branches {
            let (m, v) = bn_buffers(b);
            store.add(m, Tensor::zeros(&[c]));
            store.add(v, Tensor::filled(&[c], 1.0));
        }
        let width = adj[0].nodes() * config.input_channels;
        store.add(INPUT_MEAN, Tensor::zeros(&[width]));
        store.add(INPUT_SCALE, Tensor::filled(&[width], 1.0));
        Ok(Recognizer { config, store, hypergraphs, adj })
    }

    /// Network input for one sequence: [`input_tensor`] shifted and scaled
    /// per joint and channel by the fitted input statistics.
    pub fn input(&self, seq: &PoseSequence) -> Tensor {
        let mut t = input_tensor(seq);
        let mean = &self.store.get(self.store.expect(INPUT_MEAN)).data;
        let scale = &self.store.get(self.store.expect(INPUT_SCALE)).data;
        let w = mean.len();
        for (k, v) in t.data.iter_mut().enumerate() {
            *v = (*v - mean[k % w]) * scale[k % w];
        }
        t
    }

    /// Sets the input statistics to the per joint and channel mean and
    /// inverse standard deviation over `seqs`. Channels with (near) zero
    /// spread are only centered.
    pub fn fit_input_norm<'a>(&mut self, seqs: impl IntoIterator<Item = &'a PoseSequence>) {
        let w = self.store.get(self.store.expect(INPUT_MEAN)).len();
        let (mut sum, mut sq, mut n) = (vec![0.0; w], vec![0.0; w], 0usize);
        for seq in seqs {
            let t = input_tensor(seq);
            for row in t.data.chunks(w) {
                for (k, v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n as f64 - m * m).max(0.0);
                if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 }
            })
            .collect();
        *self.store.get_mut(self.store.expect(INPUT_MEAN)) = Tensor::new(&[w], mean);
        *self.store.get_mut(self.store.expect(INPUT_SCALE)) = Tensor::new(&[w], scale);
    }

    pub fn adjacencies(&self) -> &AdjacencySet {
        &self.adj
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.config.input_channels || s[1] != self.adj[0].nodes() {
            return Err(Error::Contract(format!("recognizer input must be T x {} x 3, got {s:?}", self.adj[0].nodes())));
        }
        if s[0] == 0 || s[0] % 4 != 0 {
            return Err(Error::Contract(format!("sequence length must be a positive multiple of 4, got {}", s[0])));
        }
        Ok(())
    }

    fn run_blocks(&self, g: &mut Graph, mut x: Var, prefixes: &[String], range: std::ops::Range<usize>) -> Result<Var> {
        let blocks = self.config.blocks();
        for i in range {
            x = block_graph(g, &self.store, &prefixes[i], &blocks[i], x, &self.adj, self.config.aggregate)?;
        }
        Ok(x)
    }

    /// Source-branch feature of one `T x N x 3` input.
    pub fn source_branch(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let prefixes: Vec<String> = (0..BLOCKS).map(|i| format!("src.b{i}")).collect();
        let y = self.run_blocks(g, x, &prefixes, 0..BLOCKS)?;
        Ok(g.pool_tn(y))
    }

    /// Generative-branch feature from one input per configured view.
    pub fn generative_branch(&self, g: &mut Graph, xs: &[Var]) -> Result<Var> {
        let views = self.config.view_list.len();
        if views == 0 {
            return Err(Error::Contract("model has no generative branch".into()));
        }
        if xs.len() != views {
            return Err(Error::Contract(format!("generative branch expects {views} view inputs, got {}", xs.len())));
        }
        let split = self.config.head_blocks();
        let mut pooled = Vec::with_capacity(views);
        for (v, &x) in xs.iter().enumerate() {
            self.check_input(g, x)?;
            let prefixes: Vec<String> =
                (0..BLOCKS).map(|i| if i < split { format!("gen.h{v}.b{i}") } else { format!("gen.s.b{i}") }).collect();
            let y = self.run_blocks(g, x, &prefixes, 0..BLOCKS)?;
            pooled.push(g.pool_tn(y));
        }
        let sum = g.add_all(&pooled);
        Ok(g.affine(sum, 1.0 / views as f64, 0.0))
    }

    /// Both branch features for one sample: the source input and, when the
    /// model has a generative branch, one input per view.
    pub fn branches(&self, g: &mut Graph, source: Var, views: &[Var]) -> Result<BranchFeatures> {
        let alpha = self.source_branch(g, source)?;
        let beta = if self.config.has_generative_branch() { Some(self.generative_branch(g, views)?) } else { None };
        Ok(BranchFeatures { alpha, beta })
    }

    /// Standardizes a pooled branch feature with its running statistics.
    pub fn standardize(&self, g: &mut Graph, branch: &str, x: Var) -> Var {
        let (m, v) = bn_buffers(branch);
        let mean = self.store.get(self.store.expect(&m)).clone();
        let var = &self.store.get(self.store.expect(&v)).data;
        let inv = Tensor::new(&mean.shape, var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect());
        let mean = g.input(mean);
        let inv = g.input(inv);
        let centered = g.sub(x, mean);
        g.mul(centered, inv)
    }

    /// Folds one batch of feature statistics into the running buffers.
    pub fn update_running_stats(&mut self, branch: &str, mean: &[f64], var: &[f64]) {
        let (m, v) = bn_buffers(branch);
        for (name, batch) in [(m, mean), (v, var)] {
            let id = self.store.expect(&name);
            for (r, b) in self.store.get_mut(id).data.iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Final embedding vector from branch features.
    pub fn combine(&self, g: &mut Graph, f: &BranchFeatures) -> Result<Var> {
        let alpha = self.standardize(g, "alpha", f.alpha);
        match f.beta {
            None => g.l2_normalize(alpha),
            Some(beta) => {
                let beta = self.standardize(g, "beta", beta);
                let cat = g.concat_rows(&[alpha, beta]);
                match self.config.final_dim {
                    FinalDim::Concat => g.l2_normalize(cat),
                    FinalDim::Project256 => {
                        let w = g.param_named(&self.store, "proj.w");
                        let c = g.reshape(cat, &[1, 2 * self.config.embedding_dim_per_branch()]);
                        let p = g.linear(c, w, None);
                        let p = g.reshape(p, &[self.config.embedding_dim_per_branch()]);
                        g.l2_normalize(p)
                    }
                }
            }
        }
    }

    /// Embedding of a source sequence given its per-view sequences (ignored by
    /// the baseline).
    pub fn embed_sequences(&self, source: &PoseSequence, views: &[PoseSequence]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(self.input(source));
        let vs: Vec<Var> = views.iter().map(|s| g.input(self.input(s))).collect();
        let f = self.branches(&mut g, x, &vs)?;
        let e = self.combine(&mut g, &f)?;
        Ok(g.value(e).data.clone())
    }

    /// Embedding record of one sample, generating its views with `views`.
    pub fn embed(&self, sample: &GaitSample, views: &dyn ViewSource) -> Result<EmbeddingRecord> {
        let generated =
            if self.config.has_generative_branch() { views.generate(sample, &self.config.view_list)? } else { Vec::new() };
        let vector = self.embed_sequences(&sample.sequence, &generated)?;
        Ok(EmbeddingRecord {
            identity: sample.identity.clone(),
            view_degrees: sample.view_degrees,
            condition: sample.condition,
            run: sample.run,
            vector,
            normalized: true,
        })
    }

    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.store.scalar_count(prefix)
    }
}

/// Supervised contrastive loss of an `n x d` feature batch.
pub fn supcon_loss(features: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    Ok(supcon_with_grad(features, labels, tau)?.0)
}

/// Sum of the two branch losses.
pub fn total_loss(f_alpha: &Tensor, f_beta: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    if f_alpha.shape != f_beta.shape {
        return Err(Error::Contract(format!("branch batches differ: {:?} vs {:?}", f_alpha.shape, f_beta.shape)));
    }
    Ok(supcon_loss(f_alpha, labels, tau)? + supcon_loss(f_beta, labels, tau)?)
}
