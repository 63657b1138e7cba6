use proptest::prelude::*;

use flowhmm::classify::{evaluate, vote};
use flowhmm::flow::{FlowConfig, GlowConfig, NvpConfig};
use flowhmm::hmm;
use flowhmm::io::{self, FeatureRecord, Manifest, ManifestEntry};
use flowhmm::numerics::{Matrix, RngStream};
use flowhmm::oracle;
use flowhmm::selftest::{random_chain, random_flow};

fn flow_config(glow: bool, depth: usize) -> FlowConfig {
    if glow {
        FlowConfig::Glow(GlowConfig {
            flow_steps: depth,
            hidden_width: Some(8),
        })
    } else {
        FlowConfig::Nvp(NvpConfig {
            coupling_layers: 2 * depth,
            hidden_width: Some(8),
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_path_enumeration(seed in 0u64..10_000, s in 1usize..4, t in 1usize..6) {
        let mut rng = RngStream::new(seed);
        let chain = random_chain(s, &mut rng).unwrap();
        let emis = Matrix::from_vec(t, s, (0..t * s).map(|_| -5.0 * rng.uniform()).collect()).unwrap();
        let fast = hmm::forward_log_likelihood(&chain, &emis).unwrap();
        let brute = oracle::brute_force_log_likelihood(&chain, &emis);
        prop_assert!((fast - brute).abs() < 1e-9, "{fast} vs {brute}");
    }

    #[test]
    fn flows_invert(seed in 0u64..10_000, dim in 2usize..10, glow in any::<bool>(), depth in 1usize..4) {
        let mut rng = RngStream::new(seed);
        let f = random_flow(&flow_config(glow, depth), dim, 0.2, &mut rng).unwrap();
        let x: Vec<f64> = (0..dim).map(|_| 3.0 * rng.normal()).collect();
        let (z, _) = f.forward(&x).unwrap();
        let back = f.inverse(&z).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn majority_always_wins(a in 0usize..5, b in 0usize..5, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        prop_assert_eq!(vote(&[a, a, b], &mut rng).unwrap(), a);
        prop_assert_eq!(vote(&[b, a, a], &mut rng).unwrap(), a);
    }

    #[test]
    fn weighted_recall_is_accuracy(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let labels: Vec<String> = (0..4).map(|i| format!("l{i}")).collect();
        let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = evaluate(&p, &t, &labels).unwrap();
        prop_assert!((r.weighted_recall - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn archive_round_trip(lens in prop::collection::vec(0usize..8, 0..12), dim in 1usize..5, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let records: Vec<FeatureRecord> = lens
            .iter()
            .enumerate()
            .map(|(i, &t)| FeatureRecord {
                id: format!("r{i}"),
                features: Matrix::from_vec(t, dim, (0..t * dim).map(|_| rng.normal() as f32 as f64).collect()).unwrap(),
            })
            .collect();
        let bytes = io::encode_features(&records).unwrap();
        prop_assert_eq!(io::decode_features(&bytes).unwrap(), records);
        if !bytes.is_empty() {
            prop_assert!(io::decode_features(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn manifest_round_trip(ids in prop::collection::btree_set("[a-z0-9_-]{1,12}", 1..20), seed in any::<u64>()) {
        let labels: Vec<String> = vec!["x".into(), "y y".into(), "z".into()];
        let mut rng = RngStream::new(seed);
        let entries: Vec<ManifestEntry> = ids
            .into_iter()
            .map(|id| ManifestEntry {
                path: format!("dir/{id}.arc"),
                label: labels[rng.below(3)].clone(),
                id,
            })
            .collect();
        let m = Manifest::new(labels, entries).unwrap();
        prop_assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }
}
