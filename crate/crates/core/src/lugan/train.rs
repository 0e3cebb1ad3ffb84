use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CycleNorm, GeneratorConfig, Lugan};
use crate::checkpoint::Checkpoint;
use crate::dataio::GaitSample;
use crate::error::{Error, Result};
use crate::eval::mpjpe;
use crate::geometry::CameraRig;
use crate::nn::{Adam, Graph, ParamId, Tensor, Var};
use crate::recognizer::ViewSource;
use crate::rng;
use crate::skeleton::PoseSequence;

pub const LUGAN_KIND: &str = "lugan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LuganTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Generator steps per discriminator step.
    pub g_steps_per_d: usize,
    /// Use the aligned target-view sequence as the real sample (synthetic
    /// diagnostics only).
    pub aligned_reals: bool,
    /// Random crop length for training sequences (0 = full length).
    pub sequence_length: usize,
    /// Caps the number of batches per epoch (0 = no cap).
    pub max_batches_per_epoch: usize,
}

impl Default for LuganTrainConfig {
    fn default() -> Self {
        LuganTrainConfig {
            epochs: 20,
            batch_size: 32,
            lr_g: 1e-4,
            lr_d: 1e-4,
            g_steps_per_d: 50,
            aligned_reals: false,
            sequence_length: 0,
            max_batches_per_epoch: 0,
        }
    }
}

impl LuganTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.g_steps_per_d == 0 {
            return Err(Error::Config("batch_size and g_steps_per_d must be >= 1".into()));
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LuganLogRow {
    pub epoch: usize,
    pub loss_g: f64,
    /// NaN when no discriminator step ran in the epoch.
    pub loss_d: f64,
    /// Mean `‖I − Q_ab Q_ba‖_F` in the normalized frame.
    pub cycle: f64,
}

pub const LUGAN_LOG_HEADER: &str = "epoch,loss_g,loss_d,cycle";

pub fn lugan_log_csv(rows: &[LuganLogRow]) -> String {
    let mut out = format!("{LUGAN_LOG_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss_g, r.loss_d, r.cycle));
    }
    out
}

/// One generator training example.
#[derive(Debug, Clone, Copy)]
struct Pair {
    source: usize,
    beta: f64,
    real: usize,
}

/// Index of the records of each identity at each view.
struct ViewIndex<'a> {
    records: &'a [GaitSample],
    by_id_view: BTreeMap<(&'a str, u64), Vec<usize>>,
    views: Vec<f64>,
}

impl<'a> ViewIndex<'a> {
    fn new(records: &'a [GaitSample], views: &[f64]) -> Self {
        let mut by_id_view: BTreeMap<(&str, u64), Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_id_view.entry((r.identity.as_str(), r.view_degrees.to_bits())).or_default().push(i);
        }
        ViewIndex { records, by_id_view, views: views.to_vec() }
    }

    fn candidates(&self, source: usize, beta: f64, aligned: bool) -> Vec<usize> {
        let s = &self.records[source];
        self.by_id_view
            .get(&(s.identity.as_str(), beta.to_bits()))
            .map(|v| {
                v.iter()
                    .copied()
                    .filter(|&i| {
                        let same_group = s.aligned_group.is_some() && self.records[i].aligned_group == s.aligned_group;
                        same_group == aligned
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Checks that every identity has a usable real sample at every view.
    fn check(&self, aligned: bool) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            for &b in &self.views {
                if b != r.view_degrees && self.candidates(i, b, aligned).is_empty() {
                    return Err(Error::Config(format!(
                        "identity {} has no {} record at view {b} to serve as a real sample",
                        r.identity,
                        if aligned { "aligned" } else { "unaligned" }
                    )));
                }
            }
        }
        Ok(())
    }

    fn pairs(&self, aligned: bool, rng: &mut impl Rng) -> Vec<Pair> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(rng);
        order
            .into_iter()
            .map(|source| {
                let alpha = self.records[source].view_degrees;
                let targets: Vec<f64> = self.views.iter().copied().filter(|&v| v != alpha).collect();
                let beta = targets[rng.random_range(0..targets.len())];
                let c = self.candidates(source, beta, aligned);
                Pair { source, beta, real: c[rng.random_range(0..c.len())] }
            })
            .collect()
    }
}

fn crop(seq: &PoseSequence, len: usize, rng: &mut impl Rng) -> PoseSequence {
    if len == 0 || len >= seq.frames() {
        return seq.clone();
    }
    seq.window_looped(rng.random_range(0..=seq.frames() - len), len)
}

#[derive(Default)]
struct GradSum(BTreeMap<ParamId, Tensor>);

impl GradSum {
    fn add(&mut self, grads: Vec<(ParamId, Tensor)>, prefix: &str, model: &Lugan, scale: f64) {
        for (id, t) in grads {
            if !model.store.name(id).starts_with(prefix) {
                continue;
            }
            let t = t.scale(scale);
            match self.0.get_mut(&id) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    self.0.insert(id, t);
                }
            }
        }
    }

    fn into_vec(self) -> Vec<(ParamId, Tensor)> {
        self.0.into_iter().collect()
    }
}

fn matrix(t: &Tensor) -> Matrix3<f64> {
    Matrix3::from_row_slice(&t.data)
}

/// Generator objective for one example on `g`: cycle norm of `Q_ab Q_ba`
/// plus the least-squares adversarial term. Returns the loss and the
/// normalized-frame cycle residual.
pub fn generator_loss_graph(g: &mut Graph, model: &Lugan, source: &PoseSequence, alpha: f64, beta: f64) -> Result<(Var, f64)> {
    let frame = &model.config.frame;
    let conf = source.confidence();
    let xy = g.input(frame.to_normalized(source));
    let (fake, q_ab) = model.generate_graph(g, xy, conf, beta)?;
    let (_, q_ba) = model.generate_graph(g, fake, conf, alpha)?;
    let prod = g.matmul(q_ab.q, q_ba.q);
    let eye = g.input(Tensor::eye(3));
    let r = g.sub(eye, prod);
    let cyc = match model.config.cycle_norm {
        CycleNorm::Frobenius => g.frob_norm(r),
        CycleNorm::Spectral => g.spectral_norm(r),
    };
    let d = model.discriminator_graph(g, fake, conf, xy, conf, beta)?;
    let one_minus = g.affine(d, -1.0, 1.0);
    let adv = g.square(one_minus);
    let residual = (Matrix3::identity() - matrix(g.value(q_ab.q)) * matrix(g.value(q_ba.q))).norm();
    Ok((g.add(cyc, adv), residual))
}

/// Discriminator objective for one example on `g`; the fake is generated
/// outside the graph so no gradient reaches the generator.
pub fn discriminator_loss_graph(g: &mut Graph, model: &Lugan, source: &PoseSequence, real: &PoseSequence, beta: f64) -> Result<Var> {
    let frame = &model.config.frame;
    let (fake, _) = model.generate_pose(source, beta)?;
    let cond = g.input(frame.to_normalized(source));
    let xr = g.input(frame.to_normalized(real));
    let xf = g.input(frame.to_normalized(&fake));
    let dr = model.discriminator_graph(g, xr, real.confidence(), cond, source.confidence(), beta)?;
    let df = model.discriminator_graph(g, xf, fake.confidence(), cond, source.confidence(), beta)?;
    let miss = g.affine(dr, -1.0, 1.0);
    let a = g.square(miss);
    let b = g.square(df);
    Ok(g.add(a, b))
}

fn generator_example(model: &Lugan, source: &PoseSequence, alpha: f64, beta: f64, grads: &mut GradSum, scale: f64) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let (loss, residual) = generator_loss_graph(&mut g, model, source, alpha, beta)?;
    let value = g.value(loss).item();
    g.backward(loss);
    grads.add(g.param_grads(), "g.", model, scale);
    Ok((value, residual))
}

fn discriminator_example(
    model: &Lugan,
    source: &PoseSequence,
    real: &PoseSequence,
    beta: f64,
    grads: &mut GradSum,
    scale: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = discriminator_loss_graph(&mut g, model, source, real, beta)?;
    let value = g.value(loss).item();
    g.backward(loss);
    grads.add(g.param_grads(), "d.", model, scale);
    Ok(value)
}

fn mean_or_nan(sum: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Adversarial training with the cycle-identity term.
///
/// `views` lists the rig views targets are drawn from. Row 0 of the log
/// evaluates the untrained model on the first epoch's batches.
pub fn train_lugan(
    records: &[GaitSample],
    views: &[f64],
    config: &GeneratorConfig,
    train_cfg: &LuganTrainConfig,
    seed: u64,
) -> Result<(Lugan, Vec<LuganLogRow>)> {
    train_cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::Config("at least two rig views are required".into()));
    }
    for r in records {
        if !views.contains(&r.view_degrees) {
            return Err(Error::Config(format!("record view {} is not a rig view", r.view_degrees)));
        }
    }
    let index = ViewIndex::new(records, views);
    index.check(train_cfg.aligned_reals)?;
    let mut model = Lugan::new(config.clone(), seed)?;
    let mut adam_g = Adam::new(train_cfg.lr_g);
    let mut adam_d = Adam::new(train_cfg.lr_d);
    let mut log = Vec::with_capacity(train_cfg.epochs + 1);
    let mut step = 0usize;

    for epoch in 0..=train_cfg.epochs {
        let mut rng = rng::stream(seed, "lugan.pairs", &[epoch.max(1) as u64]);
        let pairs = index.pairs(train_cfg.aligned_reals, &mut rng);
        let mut batches: Vec<&[Pair]> = pairs.chunks(train_cfg.batch_size).collect();
        if train_cfg.max_batches_per_epoch > 0 {
            batches.truncate(train_cfg.max_batches_per_epoch);
        }
        let (mut g_sum, mut d_sum, mut cyc_sum) = (0.0, 0.0, 0.0);
        let (mut g_n, mut d_n, mut cyc_n) = (0, 0, 0);
        for (bi, batch) in batches.iter().enumerate() {
            let mut crop_rng = rng::stream(seed, "lugan.crop", &[epoch as u64, bi as u64]);
            let examples: Vec<(PoseSequence, PoseSequence, f64, f64)> = batch
                .iter()
                .map(|p| {
                    let s = &records[p.source];
                    let src = crop(&s.sequence, train_cfg.sequence_length, &mut crop_rng);
                    let real = crop(&records[p.real].sequence, train_cfg.sequence_length, &mut crop_rng);
                    (src, real, s.view_degrees, p.beta)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;

            if epoch > 0 && step % train_cfg.g_steps_per_d == 0 {
                let mut grads = GradSum::default();
                let mut loss = 0.0;
                for (src, real, _, beta) in &examples {
                    loss += discriminator_example(&model, src, real, *beta, &mut grads, scale)?;
                }
                adam_d.step(&mut model.store, &grads.into_vec());
                d_sum += loss * scale;
                d_n += 1;
            }

            let mut grads = GradSum::default();
            let mut loss = 0.0;
            for (src, _, alpha, beta) in &examples {
                let (l, r) = generator_example(&model, src, *alpha, *beta, &mut grads, scale)?;
                loss += l;
                cyc_sum += r;
                cyc_n += 1;
            }
            g_sum += loss * scale;
            g_n += 1;
            if !loss.is_finite() {
                return Err(Error::Contract(format!("non-finite generator loss at epoch {epoch}, batch {bi}")));
            }
            if epoch > 0 {
                adam_g.step(&mut model.store, &grads.into_vec());
                step += 1;
            }
        }
        log.push(LuganLogRow { epoch, loss_g: mean_or_nan(g_sum, g_n), loss_d: mean_or_nan(d_sum, d_n), cycle: mean_or_nan(cyc_sum, cyc_n) });
    }
    Ok((model, log))
}

/// Mean MPJPE of generated against aligned ground truth, next to the same
/// metric for the identity transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub pairs: usize,
    pub mpjpe_generated: f64,
    pub mpjpe_identity: f64,
}

impl GenerationReport {
    pub fn ratio(&self) -> f64 {
        self.mpjpe_generated / self.mpjpe_identity
    }
}

/// Scores every (record, other rig view) pair that has an aligned target,
/// or a seeded subset of `max_pairs` of them when nonzero.
pub fn evaluate_generation(model: &Lugan, records: &[GaitSample], views: &[f64], max_pairs: usize, seed: u64) -> Result<GenerationReport> {
    let index = ViewIndex::new(records, views);
    let mut pairs = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for &b in views {
            if b == r.view_degrees {
                continue;
            }
            if let Some(&t) = index.candidates(i, b, true).first() {
                pairs.push((i, b, t));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config("no aligned record pairs to evaluate".into()));
    }
    if max_pairs > 0 && pairs.len() > max_pairs {
        pairs.shuffle(&mut rng::stream(seed, "lugan.eval", &[]));
        pairs.truncate(max_pairs);
    }
    let (mut gen, mut id) = (0.0, 0.0);
    for &(i, b, t) in &pairs {
        let (out, _) = model.generate_pose(&records[i].sequence, b)?;
        gen += mpjpe(&out, &records[t].sequence)?;
        id += mpjpe(&records[i].sequence, &records[t].sequence)?;
    }
    let n = pairs.len() as f64;
    Ok(GenerationReport { pairs: pairs.len(), mpjpe_generated: gen / n, mpjpe_identity: id / n })
}

/// Views from a trained generator. A requested view equal to the source view
/// returns the source unchanged.
#[derive(Debug, Clone)]
pub struct LuganViews {
    pub model: Lugan,
}

impl ViewSource for LuganViews {
    fn generate(&self, sample: &GaitSample, views: &[f64]) -> Result<Vec<PoseSequence>> {
        views
            .iter()
            .map(|&v| if v == sample.view_degrees { Ok(sample.sequence.clone()) } else { self.model.generate_pose(&sample.sequence, v).map(|r| r.0) })
            .collect()
    }
}

/// Saves a generator with the rig it was trained on.
pub fn save_lugan(model: &Lugan, rig: &CameraRig, seed: u64, path: &Path) -> Result<()> {
    let extra = serde_json::json!({ "rig": rig, "views": rig.yaws() });
    Checkpoint::new(LUGAN_KIND, seed, &model.config, &model.store, extra).save(path)
}

/// Loads a generator and the rig recorded with it.
pub fn load_lugan(path: &Path) -> Result<(Lugan, CameraRig, Checkpoint)> {
    let ck = Checkpoint::load(path, LUGAN_KIND)?;
    let config: GeneratorConfig = ck.config_as()?;
    let rig: CameraRig = serde_json::from_value(ck.extra["rig"].clone()).map_err(|e| Error::Config(format!("checkpoint rig: {e}")))?;
    rig.validate()?;
    let mut model = Lugan::new(config, ck.seed)?;
    model.store.load_from(&ck.store()?)?;
    Ok((model, rig, ck))
}
