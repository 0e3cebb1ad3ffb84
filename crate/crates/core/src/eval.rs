//! Gallery/probe rank-1 evaluation and generation-quality metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::Condition;
use crate::error::{Error, Result};
use crate::recognizer::EmbeddingRecord;
use crate::skeleton::PoseSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SameViewPolicy {
    Include,
    Exclude,
    #[default]
    Both,
}

impl SameViewPolicy {
    fn expand(self) -> Vec<SameViewPolicy> {
        match self {
            SameViewPolicy::Both => vec![SameViewPolicy::Include, SameViewPolicy::Exclude],
            p => vec![p],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SameViewPolicy::Include => "include",
            SameViewPolicy::Exclude => "exclude",
            SameViewPolicy::Both => "both",
        }
    }
}

/// Selects records by condition and run; an empty run list accepts any run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFilter {
    pub condition: Condition,
    #[serde(default)]
    pub runs: Vec<u32>,
}

impl RecordFilter {
    pub fn matches(&self, r: &EmbeddingRecord) -> bool {
        r.condition == self.condition && (self.runs.is_empty() || self.runs.contains(&r.run))
    }

    fn overlaps(&self, other: &RecordFilter) -> bool {
        self.condition == other.condition
            && (self.runs.is_empty() || other.runs.is_empty() || self.runs.iter().any(|r| other.runs.contains(r)))
    }

    pub fn label(&self) -> String {
        if self.runs.is_empty() {
            self.condition.to_string()
        } else {
            let runs: Vec<String> = self.runs.iter().map(u32::to_string).collect();
            format!("{}#{}", self.condition, runs.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub gallery: RecordFilter,
    pub probes: Vec<RecordFilter>,
    pub view_list: Vec<f64>,
    #[serde(default)]
    pub same_view_policy: SameViewPolicy,
}

impl EvalProtocol {
    /// Gallery NM run 0; probes NM run 1, BG and CL.
    pub fn synthetic(view_list: Vec<f64>) -> Self {
        EvalProtocol {
            gallery: RecordFilter { condition: Condition::NM, runs: vec![0] },
            probes: vec![
                RecordFilter { condition: Condition::NM, runs: vec![1] },
                RecordFilter { condition: Condition::BG, runs: vec![] },
                RecordFilter { condition: Condition::CL, runs: vec![] },
            ],
            view_list,
            same_view_policy: SameViewPolicy::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.probes.iter().find(|p| p.overlaps(&self.gallery)) {
            return Err(Error::Protocol(format!("probe set {} overlaps the gallery {}", p.label(), self.gallery.label())));
        }
        if self.view_list.is_empty() {
            return Err(Error::Protocol("empty view list".into()));
        }
        Ok(())
    }
}

/// Rank-1 accuracy per probe view for one probe set and same-view policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rank1Row {
    pub probe: String,
    pub policy: SameViewPolicy,
    /// Indexed like the protocol view list; `None` where no probe exists.
    pub per_view: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rank1Report {
    pub view_list: Vec<f64>,
    pub rows: Vec<Rank1Row>,
}

impl Rank1Report {
    /// Mean over probe sets of the row means for one policy.
    pub fn mean(&self, policy: SameViewPolicy) -> Option<f64> {
        let means: Vec<f64> = self.rows.iter().filter(|r| r.policy == policy).map(|r| r.mean).collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Nearest-neighbour rank-1 accuracy by cosine similarity. For each probe
/// view, accuracy is averaged over gallery views (skipping the probe view
/// under the exclude policy); the row mean averages the probe views.
pub fn rank1_matrix(embeddings: &[EmbeddingRecord], protocol: &EvalProtocol) -> Result<Rank1Report> {
    protocol.validate()?;
    let gallery: Vec<(&EmbeddingRecord, Vec<f64>)> =
        embeddings.iter().filter(|r| protocol.gallery.matches(r)).map(|r| (r, unit(&r.vector))).collect();
    let mut rows = Vec::new();
    for probe_filter in &protocol.probes {
        let probes: Vec<(&EmbeddingRecord, Vec<f64>)> =
            embeddings.iter().filter(|r| probe_filter.matches(r)).map(|r| (r, unit(&r.vector))).collect();
        if let Some((p, _)) = probes.iter().find(|(p, _)| !gallery.iter().any(|(g, _)| g.identity == p.identity)) {
            return Err(Error::Protocol(format!("probe identity {} is absent from the gallery", p.identity)));
        }
        for policy in protocol.same_view_policy.expand() {
            let mut per_view = Vec::with_capacity(protocol.view_list.len());
            for &pv in &protocol.view_list {
                let at_view: Vec<&(&EmbeddingRecord, Vec<f64>)> = probes.iter().filter(|(p, _)| p.view_degrees == pv).collect();
                if at_view.is_empty() {
                    per_view.push(None);
                    continue;
                }
                let mut accs = Vec::new();
                for &gv in &protocol.view_list {
                    if policy == SameViewPolicy::Exclude && gv == pv {
                        continue;
                    }
                    let cands: Vec<&(&EmbeddingRecord, Vec<f64>)> = gallery.iter().filter(|(g, _)| g.view_degrees == gv).collect();
                    if cands.is_empty() {
                        continue;
                    }
                    let hits = at_view
                        .iter()
                        .filter(|(p, pu)| {
                            let mut best = (f64::NEG_INFINITY, 0usize);
                            for (i, (_, gu)) in cands.iter().enumerate() {
                                let s: f64 = pu.iter().zip(gu).map(|(a, b)| a * b).sum();
                                if s > best.0 {
                                    best = (s, i);
                                }
                            }
                            cands[best.1].0.identity == p.identity
                        })
                        .count();
                    accs.push(hits as f64 / at_view.len() as f64);
                }
                per_view.push((!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64));
            }
            let present: Vec<f64> = per_view.iter().flatten().copied().collect();
            let mean = if present.is_empty() { f64::NAN } else { present.iter().sum::<f64>() / present.len() as f64 };
            rows.push(Rank1Row { probe: probe_filter.label(), policy, per_view, mean });
        }
    }
    Ok(Rank1Report { view_list: protocol.view_list.clone(), rows })
}

/// Mean Euclidean distance of the image coordinates over joints and frames.
pub fn mpjpe(generated: &PoseSequence, reference: &PoseSequence) -> Result<f64> {
    if generated.frames() != reference.frames() || generated.joints() != reference.joints() {
        return Err(Error::Contract(format!(
            "MPJPE of {}x{} against {}x{}",
            generated.frames(),
            generated.joints(),
            reference.frames(),
            reference.joints()
        )));
    }
    if !generated.is_normalized() || !reference.is_normalized() {
        return Err(Error::Contract("MPJPE expects normalized sequences".into()));
    }
    let n = generated.coords().len();
    let total: f64 = generated
        .coords()
        .iter()
        .zip(reference.coords())
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum();
    Ok(total / n as f64)
}

pub const REPORT_HEADER: &str = "probe_condition,probe_view,policy,accuracy";

fn view_label(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// CSV in the long `probe_condition,probe_view,policy,accuracy` layout with a
/// `mean` row per probe set and policy.
pub fn report_csv(report: &Rank1Report) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for row in &report.rows {
        for (v, acc) in report.view_list.iter().zip(&row.per_view) {
            if let Some(a) = acc {
                writeln!(out, "{},{},{},{}", row.probe, view_label(*v), row.policy.as_str(), a).unwrap();
            }
        }
        writeln!(out, "{},mean,{},{}", row.probe, row.policy.as_str(), row.mean).unwrap();
    }
    out
}

/// Fixed-width table with one column per view plus the mean, in percent.
pub fn report_table(report: &Rank1Report) -> String {
    let mut out = format!("{:<12}{:<9}", "probe", "policy");
    for v in &report.view_list {
        write!(out, "{:>8}", format!("{}°", view_label(*v))).unwrap();
    }
    writeln!(out, "{:>8}", "mean").unwrap();
    for row in &report.rows {
        write!(out, "{:<12}{:<9}", row.probe, row.policy.as_str()).unwrap();
        for acc in &row.per_view {
            match acc {
                Some(a) => write!(out, "{:>8.1}", 100.0 * a).unwrap(),
                None => write!(out, "{:>8}", "-").unwrap(),
            }
        }
        writeln!(out, "{:>8.1}", 100.0 * row.mean).unwrap();
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.txt` next to `path`.
pub fn report(report: &Rank1Report, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let csv_path = path.with_extension("csv");
    std::fs::write(&csv_path, report_csv(report)).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = path.with_extension("txt");
    std::fs::write(&txt_path, report_table(report)).map_err(|e| Error::io(&txt_path, e))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportLine {
    pub probe_condition: String,
    pub probe_view: String,
    pub policy: String,
    pub accuracy: f64,
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportLine>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format { path: path.into(), line: 0, message: e.to_string() })?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Format { path: path.into(), line: i + 2, message: e.to_string() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rec(id: usize, view: f64, cond: Condition, run: u32, vector: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord { identity: format!("id{id}"), view_degrees: view, condition: cond, run, vector, normalized: true }
    }

    fn one_hot(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn one_hot_identities_are_perfect() {
        let views = vec![0.0, 90.0];
        let mut embs = Vec::new();
        for id in 0..5 {
            for &v in &views {
                embs.push(rec(id, v, Condition::NM, 0, one_hot(id, 5)));
                embs.push(rec(id, v, Condition::NM, 1, one_hot(id, 5)));
                embs.push(rec(id, v, Condition::BG, 0, one_hot(id, 5)));
                embs.push(rec(id, v, Condition::CL, 0, one_hot(id, 5)));
            }
        }
        let rep = rank1_matrix(&embs, &EvalProtocol::synthetic(views)).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert!(rep.rows.iter().all(|r| r.mean == 1.0));
    }

    #[test]
    fn self_match_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let views = vec![0.0, 45.0, 90.0];
        let mut embs = Vec::new();
        for id in 0..6 {
            for &v in &views {
                let e: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
                embs.push(rec(id, v, Condition::NM, 0, e.clone()));
                embs.push(rec(id, v, Condition::NM, 1, e));
            }
        }
        let proto = EvalProtocol {
            gallery: RecordFilter { condition: Condition::NM, runs: vec![0] },
            probes: vec![RecordFilter { condition: Condition::NM, runs: vec![1] }],
            view_list: views,
            same_view_policy: SameViewPolicy::Include,
        };
        let rep = rank1_matrix(&embs, &proto).unwrap();
        // same-view pairs are exact copies; cross-view pairs are random
        for (i, acc) in rep.rows[0].per_view.iter().enumerate() {
            assert!(acc.unwrap() >= 1.0 / 3.0, "view {i}");
        }
    }

    #[test]
    fn absent_probe_identity_is_protocol_error() {
        let embs = vec![rec(0, 0.0, Condition::NM, 0, vec![1.0]), rec(1, 0.0, Condition::NM, 1, vec![1.0])];
        let proto = EvalProtocol::synthetic(vec![0.0]);
        assert!(matches!(rank1_matrix(&embs, &proto), Err(Error::Protocol(_))));
    }

    #[test]
    fn overlapping_sets_rejected() {
        let mut proto = EvalProtocol::synthetic(vec![0.0]);
        proto.probes.push(RecordFilter { condition: Condition::NM, runs: vec![] });
        assert!(matches!(proto.validate(), Err(Error::Protocol(_))));
    }

    #[test]
    fn rescaling_and_rotation_do_not_change_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let views = vec![0.0, 90.0];
        let mut embs = Vec::new();
        for id in 0..6 {
            for &v in &views {
                for (cond, run) in [(Condition::NM, 0), (Condition::NM, 1), (Condition::BG, 0), (Condition::CL, 0)] {
                    let e: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
                    embs.push(rec(id, v, cond, run, e));
                }
            }
        }
        let proto = EvalProtocol::synthetic(views);
        let base = rank1_matrix(&embs, &proto).unwrap();
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let moved: Vec<EmbeddingRecord> = embs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let v = &r.vector;
                let k = 1.0 + i as f64;
                EmbeddingRecord { vector: vec![k * (c * v[0] - s * v[1]), k * (s * v[0] + c * v[1]), k * v[2]], ..r.clone() }
            })
            .collect();
        assert_eq!(rank1_matrix(&moved, &proto).unwrap(), base);
    }

    #[test]
    fn mpjpe_examples() {
        let a = PoseSequence::from_xy(2, &[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [3.0, 3.0]], None).unwrap();
        assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        let b = a.map_coords(|p| [p[0] + 1.0, p[1], p[2]]);
        assert!((mpjpe(&b, &a).unwrap() - 1.0).abs() < 1e-15);
        let c = PoseSequence::from_xy(2, &[[0.0, 0.0], [1.0, 1.0]], None).unwrap();
        assert!(matches!(mpjpe(&a, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn report_files_round_trip() {
        let rep = Rank1Report {
            view_list: vec![0.0, 18.0],
            rows: vec![Rank1Row {
                probe: "NM#1".into(),
                policy: SameViewPolicy::Exclude,
                per_view: vec![Some(0.1 + 0.2), Some(2.0 / 3.0)],
                mean: (0.1 + 0.2 + 2.0 / 3.0) / 2.0,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r");
        report(&rep, &path).unwrap();
        let lines = read_report_csv(&path.with_extension("csv")).unwrap();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].accuracy, 0.1 + 0.2);
        assert_eq!(lines[1].accuracy, 2.0 / 3.0);
        assert_eq!(lines[2].probe_view, "mean");
        let empty = Rank1Report { view_list: vec![], rows: vec![] };
        report(&empty, &path).unwrap();
        assert_eq!(std::fs::read_to_string(path.with_extension("csv")).unwrap(), format!("{REPORT_HEADER}\n"));
        assert!(read_report_csv(&path.with_extension("csv")).unwrap().is_empty());
    }
}
