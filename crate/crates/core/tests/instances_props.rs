mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::oracles::{partition, two_blobs};
use hierpart::instances::{extract_instances, mean_shift, InstanceSet, MeanShiftParams};
use hierpart::losses::Embeddings;
use hierpart::rng::seeded;
use hierpart::synth::{gen_synthetic, random_direction, SyntheticSpec};
use hierpart::voxelgrid::VoxelKey;
use hierpart::NodeId;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// `blobs` well separated groups with random spreads up to `spread`.
fn blob_mixture(seed: u64, dim: usize, blobs: usize, spread: f64) -> Embeddings {
    let mut rng = seeded(seed);
    let mut rows = Vec::new();
    for b in 0..blobs {
        let center: Vec<f64> = random_direction(&mut rng, dim).iter().map(|x| x * 8.0 * (b + 1) as f64).collect();
        for _ in 0..rng.random_range(3..15) {
            let dir = random_direction(&mut rng, dim);
            let r = rng.random_range(0.0..spread);
            rows.push(center.iter().zip(&dir).map(|(c, d)| c + d * r).collect::<Vec<f64>>());
        }
    }
    Embeddings::from_rows(dim, &rows).unwrap()
}

fn random_orthogonal(seed: u64, dim: usize) -> DMatrix<f64> {
    let mut rng = seeded(seed);
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permutation_invariant(seed in any::<u64>(), dim in 1usize..6, blobs in 1usize..5) {
        let emb = blob_mixture(seed, dim, blobs, 0.6);
        let params = MeanShiftParams::with_bandwidth(1.0);
        let base = mean_shift(&emb, &params).unwrap();
        let mut order: Vec<usize> = (0..emb.len()).collect();
        order.shuffle(&mut seeded(seed ^ 7));
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| emb.row(i).to_vec()).collect();
        let shuffled = mean_shift(&Embeddings::from_rows(dim, &rows).unwrap(), &params).unwrap();
        let mut back = vec![0; emb.len()];
        for (new_i, &old_i) in order.iter().enumerate() {
            back[old_i] = shuffled[new_i];
        }
        prop_assert_eq!(partition(&back), partition(&base));
    }

    #[test]
    fn isometry_equivariant(seed in any::<u64>(), dim in 1usize..6, blobs in 1usize..5) {
        let emb = blob_mixture(seed, dim, blobs, 0.6);
        let params = MeanShiftParams::with_bandwidth(1.0);
        let base = mean_shift(&emb, &params).unwrap();
        let q = random_orthogonal(seed, dim);
        let shift: Vec<f64> = (0..dim).map(|i| (i as f64 + 1.0) * 3.7).collect();
        let rows: Vec<Vec<f64>> = (0..emb.len())
            .map(|i| {
                let x = q.clone() * nalgebra::DVector::from_column_slice(emb.row(i));
                x.iter().zip(&shift).map(|(a, b)| a + b).collect()
            })
            .collect();
        let moved = mean_shift(&Embeddings::from_rows(dim, &rows).unwrap(), &params).unwrap();
        prop_assert_eq!(partition(&moved), partition(&base));
    }

    #[test]
    fn ids_dense_in_first_appearance_order(seed in any::<u64>(), dim in 1usize..6, blobs in 1usize..5) {
        let emb = blob_mixture(seed, dim, blobs, 2.0);
        let ids = mean_shift(&emb, &MeanShiftParams::with_bandwidth(1.0)).unwrap();
        prop_assert_eq!(ids.len(), emb.len());
        let mut next = 1;
        for &id in &ids {
            prop_assert!(id <= next);
            if id == next {
                next += 1;
            }
        }
    }

    #[test]
    fn extraction_partitions_and_counts(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let n = rng.random_range(1..80);
        let keys: Vec<VoxelKey> = (0..n as i32).map(|i| [i, -i, i % 3]).collect();
        let clusters: Vec<u32> = (0..n).map(|_| rng.random_range(1..6)).collect();
        let labels: Vec<NodeId> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let min_conf = rng.random_range(0.0..1.0);
        let set = extract_instances(&keys, &clusters, &labels, min_conf).unwrap();
        // histogram oracle
        let mut hist: BTreeMap<u32, (usize, BTreeMap<NodeId, usize>)> = BTreeMap::new();
        for i in 0..n {
            let e = hist.entry(clusters[i]).or_default();
            e.0 += 1;
            if labels[i] != 0 {
                *e.1.entry(labels[i]).or_default() += 1;
            }
        }
        let mut expected = BTreeMap::new();
        for (c, (size, h)) in &hist {
            let best = h.iter().map(|(l, k)| (*k, std::cmp::Reverse(*l))).max();
            if let Some((count, std::cmp::Reverse(label))) = best {
                let conf = count as f64 / *size as f64;
                if conf >= min_conf {
                    expected.insert(*c, (label, conf));
                }
            }
        }
        prop_assert_eq!(set.len(), expected.len());
        let mut seen = BTreeSet::new();
        for inst in &set.instances {
            let (label, conf) = expected[&inst.id];
            prop_assert_eq!(inst.class_id, label);
            prop_assert_eq!(inst.confidence, conf);
            let members: BTreeSet<VoxelKey> = (0..n).filter(|&i| clusters[i] == inst.id).map(|i| keys[i]).collect();
            prop_assert_eq!(&inst.voxels, &members);
            for k in &inst.voxels {
                prop_assert!(seen.insert(*k));
            }
        }
    }
}

#[test]
fn two_blobs_give_two_clusters() {
    for seed in 0..20 {
        let dim = [2, 3, 8, 16][seed as usize % 4];
        let (emb, truth) = two_blobs(seed, dim, 0.75);
        let ids = mean_shift(&emb, &MeanShiftParams::with_bandwidth(0.75)).unwrap();
        assert_eq!(partition(&ids), partition(&truth), "seed {seed}");
        assert_eq!(partition(&ids).len(), 2);
    }
}

#[test]
fn doubling_bandwidth_never_adds_clusters() {
    for seed in 0..30 {
        let emb = blob_mixture(seed, 1 + seed as usize % 5, 2 + seed as usize % 4, 1.5);
        let mut last = usize::MAX;
        for h in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let count = partition(&mean_shift(&emb, &MeanShiftParams::with_bandwidth(h)).unwrap()).len();
            assert!(count <= last, "seed {seed}, bandwidth {h}: {count} > {last}");
            last = count;
        }
    }
}

#[test]
fn ground_truth_instances_at_each_level() {
    let synth = gen_synthetic(&SyntheticSpec::random(8, 4, 0.05)).unwrap();
    let objects: BTreeSet<u32> = synth.scene.entries.values().map(|e| e.object_id).collect();
    for level in 1..=3 {
        let set = InstanceSet::ground_truth(&synth.scene, &synth.taxonomy, level).unwrap();
        let firsts: Vec<VoxelKey> = set.instances.iter().map(|i| *i.voxels.first().unwrap()).collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]));
        assert!(set.instances.iter().enumerate().all(|(i, inst)| inst.id == i as u32 + 1));
        let covered: usize = set.instances.iter().map(|i| i.voxels.len()).sum();
        assert_eq!(covered, synth.scene.labeled_count());
        if level == 1 {
            assert_eq!(set.len(), objects.len());
        }
        if level == 3 {
            for inst in &set.instances {
                let parts: BTreeSet<u32> = inst.voxels.iter().map(|k| synth.scene.entries[k].instance_id).collect();
                assert_eq!(parts.len(), 1);
            }
        }
    }
}
