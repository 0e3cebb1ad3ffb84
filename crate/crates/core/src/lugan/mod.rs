//! Cross-view pose generation with full-rank transforms.
//!
//! The generator encodes the source sequence with graph-convolution blocks
//! and the target view with two dense layers, arranges both into a pairwise
//! interaction map, and runs two independent convolution stacks that emit a
//! lower and an upper triangular 3x3 factor. Their product is the view
//! transform, full rank by construction because every diagonal entry is kept
//! at least `diag_floor` in magnitude. The discriminator scores a candidate
//! sequence conditioned on the source sequence and target view.
//!
//! Transforms act in the intrinsics-normalized image frame
//! `((x - cx) / f, (y - cy) / f, 1)`; the pixel-frame matrix is the
//! conjugate `K Q K⁻¹`, which has the same determinant.

mod train;

pub use train::{
    discriminator_loss_graph, evaluate_generation, generator_loss_graph, load_lugan, lugan_log_csv, save_lugan, train_lugan, GenerationReport, LuganLogRow, LuganTrainConfig,
    LuganViews, LUGAN_KIND, LUGAN_LOG_HEADER,
};

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_view_transform, ViewTransform, DEFAULT_FOCAL_PX, DEFAULT_PRINCIPAL_POINT};
use crate::hgc::{adjacency_set, Aggregate, AdjacencySet};
use crate::nn::params::{glorot, he};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::recognizer::{block_graph, init_block, BlockKind, BlockSpec};
use crate::rng;
use crate::skeleton::{build_bone_graph, PoseSequence, SkeletonTopology};

pub const GCN_CHANNELS: [usize; 7] = [32, 32, 64, 64, 64, 128, 128];
pub const FC_DIMS: [usize; 2] = [64, 128];
pub const CNN_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1];

/// Image frame the transforms operate in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for ImageFrame {
    fn default() -> Self {
        ImageFrame { focal_px: DEFAULT_FOCAL_PX, cx: DEFAULT_PRINCIPAL_POINT[0], cy: DEFAULT_PRINCIPAL_POINT[1] }
    }
}

impl ImageFrame {
    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.focal_px, 0.0, self.cx, 0.0, self.focal_px, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        let f = self.focal_px;
        Matrix3::new(1.0 / f, 0.0, -self.cx / f, 0.0, 1.0 / f, -self.cy / f, 0.0, 0.0, 1.0)
    }

    /// `T x N x 2` normalized-frame coordinates of a sequence.
    pub fn to_normalized(&self, seq: &PoseSequence) -> Tensor {
        let data = seq.coords().iter().flat_map(|p| [(p[0] - self.cx) / self.focal_px, (p[1] - self.cy) / self.focal_px]).collect();
        Tensor::new(&[seq.frames(), seq.joints(), 2], data)
    }

    /// Pixel-frame sequence from normalized-frame coordinates.
    pub fn to_pixels(&self, xy: &Tensor, confidence: &[f64]) -> Result<PoseSequence> {
        let joints = xy.shape[1];
        let coords = xy.data.chunks(2).map(|p| [p[0] * self.focal_px + self.cx, p[1] * self.focal_px + self.cy, 1.0]).collect();
        PoseSequence::new(joints, coords, confidence.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleNorm {
    #[default]
    Frobenius,
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub gcn_channels: Vec<usize>,
    pub fc_dims: Vec<usize>,
    pub cnn_channels: Vec<usize>,
    pub diag_floor: f64,
    pub init_scale: f64,
    /// A single convolution head emits `Q` directly, with no factors.
    pub qgan_mode: bool,
    pub temporal_kernel: usize,
    pub cycle_norm: CycleNorm,
    pub frame: ImageFrame,
    /// Multiplier on normalized-frame coordinates before encoding.
    pub coord_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            gcn_channels: GCN_CHANNELS.to_vec(),
            fc_dims: FC_DIMS.to_vec(),
            cnn_channels: CNN_CHANNELS.to_vec(),
            diag_floor: 1e-3,
            init_scale: 0.1,
            qgan_mode: false,
            temporal_kernel: 9,
            cycle_norm: CycleNorm::Frobenius,
            frame: ImageFrame::default(),
            coord_gain: 5.0,
        }
    }
}

impl GeneratorConfig {
    /// Every width except the single output channel divided by `d`.
    pub fn miniature(d: usize) -> Self {
        let base = Self::default();
        GeneratorConfig {
            gcn_channels: base.gcn_channels.iter().map(|c| (c / d).max(1)).collect(),
            fc_dims: base.fc_dims.iter().map(|c| (c / d).max(1)).collect(),
            cnn_channels: base.cnn_channels.iter().map(|&c| if c == 1 { 1 } else { (c / d).max(1) }).collect(),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.diag_floor > 0.0) {
            return Err(Error::Config(format!("diag_floor must be positive, got {}", self.diag_floor)));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config(format!("init_scale must be non-negative, got {}", self.init_scale)));
        }
        if self.gcn_channels.is_empty() || self.fc_dims.len() != 2 || self.cnn_channels.len() != 5 {
            return Err(Error::Config("expected 7 GCN widths, 2 FC widths and 5 CNN widths".into()));
        }
        if self.fc_dims[1] != *self.gcn_channels.last().unwrap() {
            return Err(Error::Config("view encoding width must equal the pose encoding width".into()));
        }
        if self.cnn_channels[4] != 1 {
            return Err(Error::Config("the last CNN layer has a single channel".into()));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config("temporal kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn gcn_blocks(&self) -> Vec<BlockSpec> {
        let mut cin = 3;
        self.gcn_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = BlockSpec {
                    kind: if i == 0 { BlockKind::Basic } else { BlockKind::Residual },
                    in_channels: cin,
                    out_channels: c,
                    temporal_stride: 1,
                    temporal_kernel: self.temporal_kernel,
                };
                cin = c;
                b
            })
            .collect()
    }

    fn feature_dim(&self) -> usize {
        *self.gcn_channels.last().unwrap()
    }
}

/// Generator and discriminator parameters with their graph structure.
#[derive(Debug, Clone)]
pub struct Lugan {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    adj: AdjacencySet,
    joints: usize,
}

/// Lower and upper factors plus their product, as graph values.
pub struct GeneratedQ {
    pub q: Var,
    pub factors: Option<(Var, Var)>,
}

fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) {
    for (i, b) in cfg.gcn_blocks().iter().enumerate() {
        init_block(store, &format!("{prefix}.b{i}"), b, 1, rng);
    }
}

fn init_view(store: &mut ParamStore, prefix: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) {
    let (h, o) = (cfg.fc_dims[0], cfg.fc_dims[1]);
    store.add(format!("{prefix}.w0"), he(rng, &[2, h], 2));
    store.add(format!("{prefix}.b0"), Tensor::zeros(&[h]));
    store.add(format!("{prefix}.w1"), glorot(rng, &[h, o], h, o));
    store.add(format!("{prefix}.b1"), Tensor::zeros(&[o]));
}

fn init_interaction(store: &mut ParamStore, prefix: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) {
    let (c, m) = (cfg.feature_dim(), cfg.cnn_channels[0]);
    store.add(format!("{prefix}.wa"), glorot(rng, &[c, m], 2 * c, m));
    store.add(format!("{prefix}.wb"), glorot(rng, &[c, m], 2 * c, m));
    store.add(format!("{prefix}.b"), Tensor::zeros(&[m]));
}

fn init_cnn(store: &mut ParamStore, prefix: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) {
    let ch = &cfg.cnn_channels;
    for j in 0..3 {
        let (ci, co) = (ch[j], ch[j + 1]);
        store.add(format!("{prefix}.c{j}.w"), he(rng, &[co, ci, 3, 3], ci * 9));
        store.add(format!("{prefix}.c{j}.b"), Tensor::zeros(&[co]));
    }
    store.add(format!("{prefix}.out.w"), glorot(rng, &[1, ch[3], 1, 1], ch[3], 1));
    store.add(format!("{prefix}.out.b"), Tensor::zeros(&[1]));
}

impl Lugan {
    /// Fresh parameters over the COCO-17 bone graph.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        Self::with_topology(config, &SkeletonTopology::coco17(), seed)
    }

    pub fn with_topology(config: GeneratorConfig, topology: &SkeletonTopology, seed: u64) -> Result<Self> {
        config.validate()?;
        let adj = adjacency_set(&[build_bone_graph(topology)?])?;
        let mut rng = rng::stream(seed, "lugan.init", &[]);
        let mut store = ParamStore::new();
        init_encoder(&mut store, "g.enc", &config, &mut rng);
        init_view(&mut store, "g.view", &config, &mut rng);
        init_interaction(&mut store, "g.int", &config, &mut rng);
        let heads: &[&str] = if config.qgan_mode { &["g.q"] } else { &["g.l", "g.u"] };
        for h in heads {
            init_cnn(&mut store, h, &config, &mut rng);
        }
        init_encoder(&mut store, "d.x", &config, &mut rng);
        init_encoder(&mut store, "d.c", &config, &mut rng);
        init_view(&mut store, "d.view", &config, &mut rng);
        init_interaction(&mut store, "d.int", &config, &mut rng);
        let (c, m) = (config.feature_dim(), config.cnn_channels[0]);
        store.add("d.int.wv", glorot(&mut rng, &[c, m], c, m));
        init_cnn(&mut store, "d.cnn", &config, &mut rng);
        Ok(Lugan { config, store, adj, joints: topology.joint_count() })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Normalized bone-graph adjacency used by both pose encoders.
    pub fn adjacency(&self) -> &AdjacencySet {
        &self.adj
    }

    /// Sets every generator parameter to zero, which makes `Q = I`.
    pub fn zero_generator(&mut self) {
        let ids: Vec<_> = self.store.ids().filter(|&id| self.store.name(id).starts_with("g.")).collect();
        for id in ids {
            self.store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Encoder input `T x N x 3` from normalized-frame coordinates.
    pub fn pose_input(&self, g: &mut Graph, xy: Var, confidence: &[f64]) -> Var {
        let s = g.shape(xy).to_vec();
        let scaled = g.affine(xy, self.config.coord_gain, 0.0);
        let conf = g.input(Tensor::new(&[s[0], s[1], 1], confidence.to_vec()));
        g.concat_last(&[scaled, conf])
    }

    /// Per-node pose feature `N x C`: graph blocks, then the mean over time.
    pub fn encode_pose(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.joints || s[2] != 3 {
            return Err(Error::Contract(format!("pose encoder expects T x {} x 3, got {s:?}", self.joints)));
        }
        let mut h = x;
        for (i, b) in self.config.gcn_blocks().iter().enumerate() {
            h = block_graph(g, &self.store, &format!("{prefix}.b{i}"), b, h, &self.adj, Aggregate::Sum)?;
        }
        Ok(g.mean_axis0(h))
    }

    /// View feature from `(sin β, cos β)` through two dense layers.
    pub fn encode_view(&self, g: &mut Graph, prefix: &str, beta_degrees: f64) -> Var {
        let r = beta_degrees.to_radians();
        let x = g.input(Tensor::new(&[1, 2], vec![r.sin(), r.cos()]));
        let w0 = g.param_named(&self.store, &format!("{prefix}.w0"));
        let b0 = g.param_named(&self.store, &format!("{prefix}.b0"));
        let h = g.linear(x, w0, Some(b0));
        let h = g.relu(h);
        let w1 = g.param_named(&self.store, &format!("{prefix}.w1"));
        let b1 = g.param_named(&self.store, &format!("{prefix}.b1"));
        let o = g.linear(h, w1, Some(b1));
        g.reshape(o, &[self.config.fc_dims[1]])
    }

    /// `C x 2N x 2N` map with entry `(i, j)` a linear function of the
    /// concatenated rows `F_i` and `F_j` of the `2N x D` feature stack.
    pub fn interaction_map(&self, g: &mut Graph, prefix: &str, features: Var, extra_bias: Option<Var>) -> Var {
        let wa = g.param_named(&self.store, &format!("{prefix}.wa"));
        let wb = g.param_named(&self.store, &format!("{prefix}.wb"));
        let mut bias = g.param_named(&self.store, &format!("{prefix}.b"));
        if let Some(e) = extra_bias {
            bias = g.add(bias, e);
        }
        let a = g.linear(features, wa, None);
        let b = g.linear(features, wb, None);
        let m = g.pair_sum(a, b, bias);
        g.relu(m)
    }

    /// Three stride-2 convolutions, reduction to 3x3 and a 1x1 convolution to
    /// one channel: a raw `3 x 3` map.
    pub fn cnn(&self, g: &mut Graph, prefix: &str, map: Var) -> Result<Var> {
        let mut h = map;
        for j in 0..3 {
            let w = g.param_named(&self.store, &format!("{prefix}.c{j}.w"));
            let b = g.param_named(&self.store, &format!("{prefix}.c{j}.b"));
            h = g.conv2d(h, w, Some(b), 2, 1)?;
            h = g.relu(h);
        }
        let p = g.adaptive_avg_pool2d(h, 3, 3);
        let w = g.param_named(&self.store, &format!("{prefix}.out.w"));
        let b = g.param_named(&self.store, &format!("{prefix}.out.b"));
        let o = g.conv2d(p, w, Some(b), 1, 0)?;
        Ok(g.reshape(o, &[3, 3]))
    }

    /// Generator transform for a source input (`T x N x 3`) and target view.
    pub fn generator_q(&self, g: &mut Graph, x: Var, beta_degrees: f64) -> Result<GeneratedQ> {
        let pose = self.encode_pose(g, "g.enc", x)?;
        let view = self.encode_view(g, "g.view", beta_degrees);
        let rows = g.broadcast_rows(view, self.joints);
        let stack = g.concat_rows(&[pose, rows]);
        let map = self.interaction_map(g, "g.int", stack, None);
        if self.config.qgan_mode {
            let raw = self.cnn(g, "g.q", map)?;
            let eye = g.input(Tensor::eye(3));
            let scaled = g.affine(raw, self.config.init_scale, 0.0);
            return Ok(GeneratedQ { q: g.add(eye, scaled), factors: None });
        }
        let raw_l = self.cnn(g, "g.l", map)?;
        let raw_u = self.cnn(g, "g.u", map)?;
        let l = g.tri_factor(raw_l, true, self.config.init_scale, self.config.diag_floor);
        let u = g.tri_factor(raw_u, false, self.config.init_scale, self.config.diag_floor);
        Ok(GeneratedQ { q: g.matmul(l, u), factors: Some((l, u)) })
    }

    /// Generated normalized-frame coordinates and transform for a source
    /// sequence given as normalized coordinates.
    pub fn generate_graph(&self, g: &mut Graph, xy: Var, confidence: &[f64], beta_degrees: f64) -> Result<(Var, GeneratedQ)> {
        let x = self.pose_input(g, xy, confidence);
        let q = self.generator_q(g, x, beta_degrees)?;
        let out = g.transform(q.q, xy)?;
        Ok((out, q))
    }

    /// Discriminator score in `[0, 1]` of candidate coordinates `xy`
    /// conditioned on the source coordinates and the target view.
    pub fn discriminator_graph(
        &self,
        g: &mut Graph,
        xy: Var,
        confidence: &[f64],
        cond_xy: Var,
        cond_confidence: &[f64],
        beta_degrees: f64,
    ) -> Result<Var> {
        let x = self.pose_input(g, xy, confidence);
        let c = self.pose_input(g, cond_xy, cond_confidence);
        let fx = self.encode_pose(g, "d.x", x)?;
        let fc = self.encode_pose(g, "d.c", c)?;
        let view = self.encode_view(g, "d.view", beta_degrees);
        let wv = g.param_named(&self.store, "d.int.wv");
        let v2 = g.reshape(view, &[1, self.config.feature_dim()]);
        let vb = g.linear(v2, wv, None);
        let vb = g.reshape(vb, &[self.config.cnn_channels[0]]);
        let stack = g.concat_rows(&[fx, fc]);
        let map = self.interaction_map(g, "d.int", stack, Some(vb));
        let raw = self.cnn(g, "d.cnn", map)?;
        let logit = g.mean(raw);
        Ok(g.sigmoid(logit))
    }

    fn frame_conjugate(&self, q: &Tensor) -> Matrix3<f64> {
        let f = &self.config.frame;
        f.k() * Matrix3::from_row_slice(&q.data) * f.k_inv()
    }

    /// Pixel-frame transform the generator produces for `source` and `beta`.
    /// Factors, when present, are those of the normalized-frame matrix.
    pub fn transform_for(&self, source: &PoseSequence, beta_degrees: f64) -> Result<ViewTransform> {
        self.check_sequence(source)?;
        let mut g = Graph::new();
        let xy = g.input(self.config.frame.to_normalized(source));
        let x = self.pose_input(&mut g, xy, source.confidence());
        let q = self.generator_q(&mut g, x, beta_degrees)?;
        let factors = q.factors.map(|(l, u)| {
            (Matrix3::from_row_slice(&g.value(l).data), Matrix3::from_row_slice(&g.value(u).data))
        });
        Ok(ViewTransform { q: self.frame_conjugate(g.value(q.q)), factors, residual: 0.0 })
    }

    /// Generated sequence at view `beta` and the transform that produced it.
    pub fn generate_pose(&self, source: &PoseSequence, beta_degrees: f64) -> Result<(PoseSequence, ViewTransform)> {
        let q = self.transform_for(source, beta_degrees)?;
        let out = apply_view_transform(&q, source)?;
        Ok((out, q))
    }

    /// Discriminator score of `x` given the source sequence and view.
    pub fn discriminator_score(&self, x: &PoseSequence, cond: &PoseSequence, beta_degrees: f64) -> Result<f64> {
        self.check_sequence(x)?;
        self.check_sequence(cond)?;
        let mut g = Graph::new();
        let xv = g.input(self.config.frame.to_normalized(x));
        let cv = g.input(self.config.frame.to_normalized(cond));
        let s = self.discriminator_graph(&mut g, xv, x.confidence(), cv, cond.confidence(), beta_degrees)?;
        Ok(g.value(s).item())
    }

    fn check_sequence(&self, seq: &PoseSequence) -> Result<()> {
        if seq.joints() != self.joints {
            return Err(Error::Contract(format!("sequence has {} joints, model expects {}", seq.joints(), self.joints)));
        }
        if !seq.is_normalized() {
            return Err(Error::Contract("sequence is not normalized".into()));
        }
        Ok(())
    }
}

/// `‖I − q_ab q_ba‖ + (1 − d_fake)²` with the configured matrix norm.
pub fn generator_loss(q_ab: &Matrix3<f64>, q_ba: &Matrix3<f64>, d_fake: f64, norm: CycleNorm) -> f64 {
    let r = Matrix3::identity() - q_ab * q_ba;
    let n = match norm {
        CycleNorm::Frobenius => r.norm(),
        CycleNorm::Spectral => r.svd(false, false).singular_values.max(),
    };
    n + (1.0 - d_fake).powi(2)
}

/// `(1 − d_real)² + d_fake²`.
pub fn discriminator_loss(d_real: f64, d_fake: f64) -> f64 {
    (1.0 - d_real).powi(2) + d_fake.powi(2)
}

/// `‖I − q_ab q_ba‖_F` of two pixel- or normalized-frame transforms.
pub fn cycle_residual(q_ab: &Matrix3<f64>, q_ba: &Matrix3<f64>) -> f64 {
    (Matrix3::identity() - q_ab * q_ba).norm()
}
