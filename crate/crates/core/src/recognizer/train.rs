use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Recognizer, RecognizerConfig, BN_EPS};
use crate::checkpoint::Checkpoint;
use crate::dataio::{augment, pk_sampler, GaitSample};
use crate::error::{Error, Result};
use crate::eval::{rank1_matrix, EvalProtocol, SameViewPolicy};
use crate::geometry::{apply_view_transform, CameraRig, ViewTransform};
use crate::nn::{Adam, Graph, Var};
use crate::rng::derive_seed;
use crate::skeleton::{HypergraphSpec, PoseSequence};

/// Produces the per-view sequences the generative branch consumes.
pub trait ViewSource {
    /// One sequence per target view, in the order given.
    fn generate(&self, sample: &GaitSample, views: &[f64]) -> Result<Vec<PoseSequence>>;
}

/// Views produced by the exact geometric transforms of a known rig.
#[derive(Debug, Clone)]
pub struct OracleViews {
    rig: CameraRig,
    transforms: BTreeMap<(u64, u64), ViewTransform>,
}

impl OracleViews {
    pub fn new(rig: CameraRig) -> Result<Self> {
        let mut transforms = BTreeMap::new();
        for a in rig.yaws() {
            for b in rig.yaws() {
                transforms.insert((a.to_bits(), b.to_bits()), rig.oracle(a, b)?);
            }
        }
        Ok(OracleViews { rig, transforms })
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }
}

impl ViewSource for OracleViews {
    fn generate(&self, sample: &GaitSample, views: &[f64]) -> Result<Vec<PoseSequence>> {
        views
            .iter()
            .map(|&v| {
                if v == sample.view_degrees {
                    return Ok(sample.sequence.clone());
                }
                let q = self.transforms.get(&(sample.view_degrees.to_bits(), v.to_bits())).ok_or_else(|| {
                    Error::Config(format!("no oracle transform from view {} to {v}", sample.view_degrees))
                })?;
                apply_view_transform(q, &sample.sequence)
            })
            .collect()
    }
}

/// How the generative branch obtains its views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    /// Source branch only.
    None,
    /// Geometric oracle transforms.
    #[default]
    Oracle,
    /// A trained generator.
    Lugan,
}

impl std::str::FromStr for ViewMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ViewMode::None),
            "oracle" => Ok(ViewMode::Oracle),
            "lugan" => Ok(ViewMode::Lugan),
            _ => Err(Error::Config(format!("unknown view mode {s:?} (none, oracle, lugan)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecognizerTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Identities per batch.
    pub p: usize,
    /// Sequences per identity in a batch.
    pub k: usize,
    /// Coordinate noise in standardized units.
    pub noise_std: f64,
    /// Caps the number of batches per epoch (0 = no cap).
    pub max_batches_per_epoch: usize,
    /// Held-out rank-1 every this many epochs (0 = only after the last).
    pub eval_every: usize,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        RecognizerTrainConfig { epochs: 500, lr: 1e-3, p: 8, k: 4, noise_std: 0.01, max_batches_per_epoch: 0, eval_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub loss_alpha: f64,
    pub loss_beta: f64,
    /// Mean cross-view rank-1 on the held-out split (NaN when not evaluated).
    pub val_rank1: f64,
    /// The same per probe condition: NM, BG, CL.
    pub val_by_condition: [f64; 3],
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss_alpha,loss_beta,val_rank1,val_nm,val_bg,val_cl";

pub fn train_log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for r in rows {
        let [nm, bg, cl] = r.val_by_condition;
        out.push_str(&format!("{},{},{},{},{nm},{bg},{cl}\n", r.epoch, r.loss_alpha, r.loss_beta, r.val_rank1));
    }
    out
}

/// Parses a log written by [`train_log_csv`].
pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRAIN_LOG_HEADER => {}
        _ => return Err(Error::Format { path: path.into(), line: 1, message: format!("expected header {TRAIN_LOG_HEADER:?}") }),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            let bad = |message: String| Error::Format { path: path.into(), line: k + 1, message };
            let v: Vec<&str> = l.split(',').collect();
            if v.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", v.len())));
            }
            let f = |i: usize| v[i].parse::<f64>().map_err(|e| bad(format!("field {}: {e}", i + 1)));
            Ok(TrainLogRow {
                epoch: v[0].parse().map_err(|e| bad(format!("epoch: {e}")))?,
                loss_alpha: f(1)?,
                loss_beta: f(2)?,
                val_rank1: f(3)?,
                val_by_condition: [f(4)?, f(5)?, f(6)?],
            })
        })
        .collect()
}

/// Mean cross-view rank-1 (same view excluded) over all probe sets, and
/// per probe set of the synthetic protocol (NM, BG, CL).
pub fn held_out_rank1(model: &Recognizer, records: &[GaitSample], views: &dyn ViewSource, view_list: &[f64]) -> Result<(f64, [f64; 3])> {
    let embs = records.iter().map(|r| model.embed(r, views)).collect::<Result<Vec<_>>>()?;
    let mut proto = EvalProtocol::synthetic(view_list.to_vec());
    proto.same_view_policy = SameViewPolicy::Exclude;
    let report = rank1_matrix(&embs, &proto)?;
    let mean = report.mean(SameViewPolicy::Exclude).ok_or_else(|| Error::Protocol("no probe sets evaluated".into()))?;
    let mut by = [f64::NAN; 3];
    for (slot, probe) in by.iter_mut().zip(&proto.probes) {
        if let Some(row) = report.rows.iter().find(|r| r.probe == probe.label()) {
            *slot = row.mean;
        }
    }
    Ok((mean, by))
}

/// Trains a recognizer with P x K batches and the summed contrastive losses
/// of both branches.
///
/// `validation` holds the held-out records and the view list of the rank-1
/// protocol.
pub fn train_recognizer(
    train: &[GaitSample],
    validation: Option<(&[GaitSample], &[f64])>,
    views: &dyn ViewSource,
    config: &RecognizerConfig,
    train_cfg: &RecognizerTrainConfig,
    hypergraphs: Vec<HypergraphSpec>,
    seed: u64,
) -> Result<(Recognizer, Vec<TrainLogRow>)> {
    let mut model = Recognizer::with_hypergraphs(config.clone(), hypergraphs, seed)?;
    model.fit_input_norm(train.iter().map(|r| &r.sequence));
    let ids: Vec<&str> = train.iter().map(|r| r.identity.as_str()).collect();
    let mut label_of = BTreeMap::new();
    for id in &ids {
        let n = label_of.len();
        label_of.entry(*id).or_insert(n);
    }
    if label_of.len() < 2 {
        return Err(Error::Config("training needs at least two identities".into()));
    }
    let labels: Vec<usize> = ids.iter().map(|id| label_of[id]).collect();
    // feasibility check up front so a bad P x K fails before any work
    pk_sampler(&labels, train_cfg.p, train_cfg.k, seed)?;

    let generated: Vec<Vec<PoseSequence>> = if config.has_generative_branch() {
        train.iter().map(|r| views.generate(r, &config.view_list)).collect::<Result<_>>()?
    } else {
        vec![Vec::new(); train.len()]
    };

    let mut adam = Adam::new(train_cfg.lr);
    let t = config.sequence_length;
    let mut log = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        let mut batches = pk_sampler(&labels, train_cfg.p, train_cfg.k, derive_seed(seed, "recognizer.batches", &[epoch as u64]))?;
        if train_cfg.max_batches_per_epoch > 0 {
            batches.truncate(train_cfg.max_batches_per_epoch);
        }
        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let mut fa = Vec::with_capacity(batch.len());
            let mut fb = Vec::with_capacity(batch.len());
            for (pos, &idx) in batch.iter().enumerate() {
                let aug_seed = derive_seed(seed, "recognizer.augment", &[epoch as u64, bi as u64, pos as u64]);
                let src = augment(&train[idx].sequence, t, train_cfg.noise_std, aug_seed);
                let x = g.input(model.input(&src));
                let vs: Vec<Var> = generated[idx]
                    .iter()
                    .map(|s| g.input(model.input(&augment(s, t, train_cfg.noise_std, aug_seed))))
                    .collect();
                let f = model.branches(&mut g, x, &vs)?;
                fa.push(f.alpha);
                fb.extend(f.beta);
            }
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut normalized = |g: &mut Graph, feats: &[Var], branch: &str| -> Result<Var> {
                let s = g.stack(feats);
                let (s, mean, var) = g.batch_norm_rows(s, BN_EPS);
                model.update_running_stats(branch, &mean, &var);
                g.l2_normalize_rows(s)
            };
            let sa = normalized(&mut g, &fa, "alpha")?;
            let la = g.supcon(sa, &batch_labels, config.tau)?;
            sum_a += g.value(la).item();
            let loss = if fb.is_empty() {
                la
            } else {
                let sb = normalized(&mut g, &fb, "beta")?;
                let lb = g.supcon(sb, &batch_labels, config.tau)?;
                sum_b += g.value(lb).item();
                g.add(la, lb)
            };
            g.backward(loss);
            adam.step(&mut model.store, &g.param_grads());
        }
        let nb = batches.len().max(1) as f64;
        let last = epoch + 1 == train_cfg.epochs;
        let due = train_cfg.eval_every > 0 && (epoch + 1) % train_cfg.eval_every == 0;
        let (val_rank1, val_by_condition) = match validation {
            Some((records, view_list)) if last || due => held_out_rank1(&model, records, views, view_list)?,
            _ => (f64::NAN, [f64::NAN; 3]),
        };
        log.push(TrainLogRow { epoch, loss_alpha: sum_a / nb, loss_beta: sum_b / nb, val_rank1, val_by_condition });
    }
    Ok((model, log))
}

pub const RECOGNIZER_KIND: &str = "recognizer";

pub fn save_recognizer(model: &Recognizer, seed: u64, path: &Path) -> Result<()> {
    let extra = serde_json::to_value(&model.hypergraphs).expect("hypergraphs serialize");
    Checkpoint::new(RECOGNIZER_KIND, seed, &model.config, &model.store, extra).save(path)
}

pub fn load_recognizer(path: &Path) -> Result<(Recognizer, Checkpoint)> {
    let ck = Checkpoint::load(path, RECOGNIZER_KIND)?;
    let config: RecognizerConfig = ck.config_as()?;
    let hypergraphs: Vec<HypergraphSpec> =
        serde_json::from_value(ck.extra.clone()).map_err(|e| Error::Config(format!("checkpoint hypergraphs: {e}")))?;
    let mut model = Recognizer::with_hypergraphs(config, hypergraphs, ck.seed)?;
    model.store.load_from(&ck.store()?)?;
    Ok((model, ck))
}
