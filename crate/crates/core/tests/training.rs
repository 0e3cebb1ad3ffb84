//! Short seeded training runs: both models must make progress on their
//! objectives.

use gaitlu::lugan::{evaluate_generation, train_lugan, GeneratorConfig, Lugan, LuganTrainConfig};
use gaitlu::recognizer::{train_recognizer, OracleViews, RecognizerConfig, RecognizerTrainConfig};
use gaitlu::skeleton::{canonical_hypergraphs, SkeletonTopology};
use gaitlu::synth::{identity_label, synth_records, SynthSpec};

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn recognizer_loss_falls() {
    let spec = SynthSpec { identities: 6, frames: 40, ..SynthSpec::acceptance(21) };
    let records = synth_records(&spec).unwrap();
    let oracle = OracleViews::new(spec.rig.clone()).unwrap();
    let hgs = canonical_hypergraphs(&SkeletonTopology::coco17()).unwrap().to_vec();
    let cfg = RecognizerConfig { view_list: vec![], sequence_length: 24, width_divisor: 16, ..Default::default() };
    let tc = RecognizerTrainConfig { epochs: 12, p: 4, k: 4, max_batches_per_epoch: 4, ..Default::default() };
    let (_, log) = train_recognizer(&records, None, &oracle, &cfg, &tc, hgs, 21).unwrap();
    let first = mean(log[..3].iter().map(|r| r.loss_alpha));
    let last = mean(log[log.len() - 3..].iter().map(|r| r.loss_alpha));
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn generator_beats_its_initialization_on_held_out_identities() {
    let spec = SynthSpec { identities: 6, frames: 40, ..SynthSpec::acceptance(22) };
    let records = synth_records(&spec).unwrap();
    let views = spec.rig.yaws();
    let train_ids: Vec<String> = (0..4).map(identity_label).collect();
    let (train, test): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| train_ids.contains(&r.identity));
    let gcfg = GeneratorConfig::miniature(16);
    let tcfg = LuganTrainConfig { epochs: 6, batch_size: 8, g_steps_per_d: 5, sequence_length: 16, max_batches_per_epoch: 10, lr_g: 1e-3, ..Default::default() };
    let (model, log) = train_lugan(&train, &views, &gcfg, &tcfg, 22).unwrap();
    let before = evaluate_generation(&Lugan::new(gcfg, 22).unwrap(), &test, &views, 0, 22).unwrap();
    let after = evaluate_generation(&model, &test, &views, 0, 22).unwrap();
    assert!(after.mpjpe_generated < before.mpjpe_generated);
    assert!(log.iter().all(|r| r.cycle.is_finite() && r.loss_g.is_finite()));
    assert!(log.last().unwrap().cycle < log[0].cycle);
}
