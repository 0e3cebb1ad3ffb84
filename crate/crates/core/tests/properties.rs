//! Randomized invariants across module boundaries.

use gaitlu::dataio::{load_dataset, save_dataset};
use gaitlu::geometry::{lemma1_residual, oracle_view_transform, CameraRig, CameraExtrinsics, CameraIntrinsics, compose_projection};
use gaitlu::hgc::normalized_adjacency;
use gaitlu::lugan::{GeneratorConfig, Lugan};
use gaitlu::nn::losses::supcon;
use gaitlu::nn::Tensor;
use gaitlu::skeleton::{HypergraphSpec, PoseSequence};
use gaitlu::synth::{sample_walker, synth_records, synth_walk_3d, SynthSpec};
use nalgebra::{DVector, Matrix3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_rows(raw: &[f64], d: usize) -> Vec<f64> {
    raw.chunks(d)
        .flat_map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            r.iter().map(move |x| x / n).collect::<Vec<_>>()
        })
        .collect()
}

/// Random order-2 hypergraph with no isolated node and no edge under two members.
fn hypergraph(nodes: usize, masks: &[Vec<bool>]) -> HypergraphSpec {
    let mut edges: Vec<(String, Vec<usize>)> = masks
        .iter()
        .enumerate()
        .map(|(e, m)| (format!("e{e}"), (0..nodes).filter(|&i| m[i % m.len()]).collect::<Vec<_>>()))
        .filter(|(_, members)| members.len() >= 2)
        .collect();
    let covered: Vec<bool> = (0..nodes).map(|i| edges.iter().any(|(_, m)| m.contains(&i))).collect();
    let loose: Vec<usize> = (0..nodes).filter(|&i| !covered[i]).collect();
    if !loose.is_empty() {
        let mut members = loose;
        if members.len() < 2 {
            members.push((members[0] + 1) % nodes);
        }
        edges.push(("rest".into(), members));
    }
    HypergraphSpec::from_members(2, nodes, &edges).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn oracle_of_a_view_onto_itself_is_identity(yaw in -180.0f64..180.0, radius in 2.0f64..30.0, f in 300.0f64..2000.0) {
        let extr = CameraExtrinsics::from_yaw([radius * yaw.to_radians().sin(), 1.0, radius * yaw.to_radians().cos()], yaw);
        let m = compose_projection(&CameraIntrinsics::new(f, [512.0, 384.0]), &extr).unwrap();
        let q = oracle_view_transform(&m, &m).unwrap();
        prop_assert!((q.q - Matrix3::identity()).norm() < 1e-9);
        prop_assert!(q.residual < 1e-9);
    }

    #[test]
    fn cocentered_rig_transfers_poses_exactly(k in 2usize..7, radius in 2.0f64..20.0, seed in 0u64..1000) {
        let rig = CameraRig::cocentered(k, radius).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let walk = synth_walk_3d(&sample_walker(&mut rng), 12, seed).unwrap();
        for pair in lemma1_residual(&rig, &walk).unwrap() {
            prop_assert!(pair.max_joint_error < 1e-6, "{:?}", pair);
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric_with_unit_spectral_radius(
        nodes in 3usize..12,
        masks in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), 1..6),
    ) {
        let h = hypergraph(nodes, &masks);
        let a = normalized_adjacency(&h).unwrap();
        let m = &a.matrix;
        prop_assert_eq!(m.clone(), m.transpose());
        let eig = m.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        prop_assert!((max - 1.0).abs() < 1e-9, "largest eigenvalue {max}");
        prop_assert!(eig.eigenvalues.min() > -1e-9);
        // the square root of the degree vector is a fixed point
        let d = DVector::from_iterator(nodes, (0..nodes).map(|i| (h.node_degree(i) as f64).sqrt()));
        prop_assert!((m * &d - &d).norm() < 1e-9);
    }

    #[test]
    fn supcon_is_invariant_to_batch_order(
        raw in proptest::collection::vec(-1.0f64..1.0, 24),
        shift in 1usize..8,
        tau in 0.05f64..1.0,
    ) {
        let (n, d) = (8, 3);
        let feats = unit_rows(&raw, d);
        let labels: Vec<usize> = (0..n).map(|i| i % 2 + 2 * (i >= 4) as usize).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pf: Vec<f64> = perm.iter().flat_map(|&i| feats[i * d..(i + 1) * d].to_vec()).collect();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (l1, g1) = supcon(&Tensor::new(&[n, d], feats), &labels, tau).unwrap();
        let (l2, g2) = supcon(&Tensor::new(&[n, d], pf), &pl, tau).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-10 * l1.abs().max(1.0));
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..d {
                prop_assert!((g2.data[row * d + c] - g1.data[src * d + c]).abs() < 1e-10);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_transform_determinant_is_the_product_of_factor_diagonals(seed in 0u64..10_000, beta in -180.0f64..180.0) {
        let model = Lugan::new(GeneratorConfig::miniature(32), seed).unwrap();
        let xy: Vec<[f64; 2]> = (0..3 * 17).map(|k| [400.0 + (k % 17) as f64 * 9.0, 300.0 + (k * 7 % 23) as f64 * 11.0]).collect();
        let seq = PoseSequence::from_xy(17, &xy, None).unwrap();
        let q = model.transform_for(&seq, beta).unwrap();
        let (l, u) = q.factors.unwrap();
        let diag: f64 = (0..3).map(|i| l[(i, i)] * u[(i, i)]).product();
        prop_assert!(((l * u).determinant() - diag).abs() <= 1e-9 * diag.abs());
        prop_assert!(diag.abs() > 0.0);
    }

    #[test]
    fn datasets_survive_a_save_load_cycle(ids in 2usize..4, frames in 2usize..10, seed in 0u64..1000) {
        let spec = SynthSpec { identities: ids, frames, runs: 1, ..SynthSpec::acceptance(seed) };
        let records = synth_records(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let manifest = save_dataset(&records, &path, None).unwrap();
        let (back, m2) = load_dataset(&path).unwrap();
        prop_assert_eq!(back, records);
        prop_assert_eq!(m2.record_count, manifest.record_count);
    }
}
