//! Cross-module invariants as property tests.

use proptest::prelude::*;

use pointfuse::alignment::{aggregate, apply_offsets, quantize};
use pointfuse::comms::{comm_volume, MessagePacket};
use pointfuse::encoder::importance_filter;
use pointfuse::geometry::{apply_transform, relative_transform, Pose};
use pointfuse::scene_context::{per_agent_context, project_to_bev, BevGrid};
use pointfuse::serialization::{order_tokens, OrderingMode};
use pointfuse::ssm::{fssm_scan, SsmParams};
use pointfuse::tensor::Matrix;
use pointfuse::tokenizer::{tokenize_points, Range3, RawPointCloud, TokenSequence, TokenizerConfig};

fn tokens_from(coords: &[[f64; 3]], width: usize, agents: &[u32]) -> TokenSequence {
    let features = Matrix::from_fn(coords.len(), width, |i, j| ((i * 31 + j * 7) % 17) as f32 - 8.0);
    let cells = coords.iter().map(|c| c.map(|v| (v / 0.4).floor() as i32)).collect();
    TokenSequence::new(features, coords.to_vec(), cells, agents.to_vec()).unwrap()
}

fn coord() -> impl Strategy<Value = [f64; 3]> {
    (-20.0..20.0f64, -10.0..10.0f64, -2.0..1.0f64).prop_map(|(x, y, z)| [x, y, z])
}

fn pose() -> impl Strategy<Value = Pose> {
    (-50.0..50.0f64, -50.0..50.0f64, -3.0..3.0f64, -3.2..3.2f64, -0.3..0.3f64, -0.3..0.3f64)
        .prop_map(|(x, y, z, yaw, pitch, roll)| Pose::new([x, y, z], yaw, pitch, roll))
}

fn cloud() -> impl Strategy<Value = RawPointCloud> {
    prop::collection::vec((-9.0..9.0f32, -9.0..9.0f32, -2.5..1.5f32, 0.0..1.0f32), 1..400)
        .prop_map(|pts| RawPointCloud { points: pts.into_iter().map(|(x, y, z, i)| [x, y, z, i]).collect(), sensor_origin: [0.0, 0.0, 1.5] })
}

fn tok_cfg(g: f64) -> TokenizerConfig {
    TokenizerConfig { grid_interval: g, range: Range3 { min: [-8.0, -8.0, -2.0], max: [8.0, 8.0, 1.0] }, ..TokenizerConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relative_transforms_are_inverse_isometries(a in pose(), b in pose(), p in coord(), q in coord()) {
        let ab = relative_transform(&a, &b).unwrap();
        let ba = relative_transform(&b, &a).unwrap();
        let back = ba.apply(ab.apply(p));
        prop_assert!((0..3).all(|k| (back[k] - p[k]).abs() < 1e-10));
        let same = relative_transform(&a, &a).unwrap().apply(p);
        prop_assert!((0..3).all(|k| (same[k] - p[k]).abs() < 1e-10));
        let moved = apply_transform(&[p, q], &ab).unwrap();
        let dist = |u: [f64; 3], v: [f64; 3]| (0..3).map(|k| (u[k] - v[k]).powi(2)).sum::<f64>().sqrt();
        prop_assert!((dist(moved[0], moved[1]) - dist(p, q)).abs() < 1e-10);
    }

    #[test]
    fn tokenizer_partitions_in_range_points(c in cloud(), seed in any::<u64>()) {
        let cfg = tok_cfg(0.4);
        let tokens = tokenize_points(&c, &cfg, 0).unwrap();
        let inside = c.points.iter().filter(|p| cfg.range.contains([p[0], p[1], p[2]].map(f64::from))).count();
        let counted: f64 = tokens.iter().map(|t| t.features[4] * cfg.density_normalizer).sum();
        // density saturates at 1, so only the unsaturated case counts exactly
        if tokens.iter().all(|t| t.features[4] < 1.0) {
            prop_assert_eq!(counted.round() as usize, inside);
        }
        // shuffled input gives the same tokens, bit for bit
        let mut shuffled = c.clone();
        let n = shuffled.points.len();
        for i in (1..n).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % (i as u64 + 1)) as usize;
            shuffled.points.swap(i, j);
        }
        prop_assert_eq!(tokenize_points(&shuffled, &cfg, 0).unwrap(), tokens);
    }

    #[test]
    fn coarser_nested_grids_never_add_tokens(c in cloud()) {
        // nested grids only: 0.2 | 0.4 | 0.8
        let counts: Vec<usize> = [0.2, 0.4, 0.8].iter().map(|&g| tokenize_points(&c, &tok_cfg(g), 0).unwrap().len()).collect();
        prop_assert!(counts[0] >= counts[1] && counts[1] >= counts[2]);
    }

    #[test]
    fn every_ordering_is_a_bijection(coords in prop::collection::vec(coord(), 0..200), seed in any::<u64>()) {
        let agents = vec![0; coords.len()];
        let t = tokens_from(&coords, 2, &agents);
        for mode in OrderingMode::ALL.into_iter().filter(|m| *m != OrderingMode::Semantic) {
            let mut perm = order_tokens(&t, mode, seed).unwrap();
            perm.sort_unstable();
            prop_assert_eq!(perm, (0..coords.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bev_pooling_ignores_order_and_fused_max_dominates(coords in prop::collection::vec(coord(), 1..120), rot in 0usize..120) {
        let grid = BevGrid { cell_size: [1.0, 1.0], origin: [-20.0, -10.0], height: 20, width: 40 };
        let agents: Vec<u32> = (0..coords.len()).map(|i| (i % 3) as u32).collect();
        let t = tokens_from(&coords, 3, &agents);
        let n = coords.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let a = project_to_bev(&t, &grid).map;
        let b = project_to_bev(&t.select(&perm), &grid).map;
        prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0)));

        let ctx = per_agent_context(&t, &grid, &[0, 1, 2]).unwrap();
        for (_, m) in &ctx.per_agent {
            for y in 0..grid.height {
                for x in 0..grid.width {
                    let (f, p) = (ctx.fused.pixel(y, x), m.pixel(y, x));
                    // an agent's empty pixel reads 0 and says nothing about the max
                    if p.iter().any(|v| *v != 0.0) {
                        prop_assert!((3..6).all(|c| f[c] >= p[c]));
                    }
                }
            }
        }
    }

    #[test]
    fn filter_is_nested_and_sized(scores in prop::collection::vec(-1.0f32..1.0, 1..150), k in 0usize..160) {
        let coords: Vec<[f64; 3]> = (0..scores.len()).map(|i| [i as f64, 0.0, 0.0]).collect();
        let t = tokens_from(&coords, 2, &vec![0; scores.len()]);
        let a = importance_filter(&t, &scores, k).unwrap();
        let b = importance_filter(&t, &scores, k + 1).unwrap();
        prop_assert_eq!(a.indices.len(), k.min(scores.len()));
        prop_assert!(a.indices.iter().all(|i| b.indices.contains(i)));
    }

    #[test]
    fn scan_is_causal_and_frequency_free_at_zero_gamma(len in 2usize..48, n in 1usize..6, d in 1usize..5, cut in 0usize..47, seed in any::<u64>()) {
        let cut = cut % (len - 1);
        let mut s = seed;
        let mut next = move || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0 };
        let x = Matrix::from_fn(len, d, |_, _| next());
        let q = Matrix::from_fn(len, n, |_, _| next());
        let p = SsmParams {
            a: (0..n).map(|_| -next().abs()).collect(),
            delta: (0..len).map(|_| 0.05 + next().abs() * 0.4).collect(),
            b: Matrix::from_fn(len, n, |_, _| next()),
            c: Matrix::from_fn(len, n, |_, _| next()),
            d: (0..d).map(|_| next()).collect(),
            gamma: 0.0,
        };
        let plain = fssm_scan(&x, &p, None).unwrap();
        let zero_gamma = fssm_scan(&x, &p, Some(&q)).unwrap();
        prop_assert!(plain.as_slice().iter().zip(zero_gamma.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut later = x.clone();
        for i in cut + 1..len {
            later.row_mut(i).iter_mut().for_each(|v| *v = -*v * 3.0 + 1.0);
        }
        let y = fssm_scan(&later, &p, None).unwrap();
        for i in 0..=cut {
            prop_assert!(y.row(i).iter().zip(plain.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn aggregate_tags_partition_the_sequence(sizes in prop::collection::vec(0usize..30, 1..5), poses in prop::collection::vec(pose(), 5)) {
        let d = 4;
        let packet = |id: u32, k: usize| MessagePacket {
            agent_id: id,
            features: Matrix::from_fn(k, d, |i, j| (i + j) as f32),
            coords: (0..k).map(|i| [i as f32 * 0.3, -(i as f32), 0.5]).collect(),
            pose: poses[id as usize].to_wire(),
        };
        let ego = packet(0, sizes[0]);
        // ids in descending order; aggregate sorts them
        let neighbors: Vec<MessagePacket> = (1..sizes.len()).rev().map(|j| packet(j as u32, sizes[j])).collect();
        let transforms: Vec<_> = neighbors.iter().map(|p| relative_transform(&poses[0], &poses[p.agent_id as usize]).unwrap()).collect();
        let embed = Matrix::zeros(2, d);
        let fused = aggregate(&ego, &neighbors, &transforms, &embed, 0.4).unwrap();
        prop_assert_eq!(fused.tokens.len(), sizes.iter().sum::<usize>());
        let mut start = 0;
        for (id, &k) in sizes.iter().enumerate() {
            prop_assert!(fused.tokens.agent_ids[start..start + k].iter().all(|&a| a == id as u32));
            start += k;
        }
    }

    #[test]
    fn lattice_offsets_apply_exactly(
        pts in prop::collection::vec((coord(), -2.0..2.0f64, -2.0..2.0f64), 1..100),
    ) {
        let coords: Vec<[f64; 3]> = pts.iter().map(|(c, _, _)| c.map(quantize)).collect();
        let props: Vec<[f64; 3]> = pts.iter().map(|(_, a, _)| [*a, -*a, *a * 0.5].map(quantize)).collect();
        let comp: Vec<[f64; 3]> = pts.iter().map(|(_, _, b)| [*b, *b * 0.25, -*b].map(quantize)).collect();
        let out = apply_offsets(&coords, &props, &comp).unwrap();
        for i in 0..out.len() {
            for k in 0..3 {
                prop_assert_eq!((out[i][k] - coords[i][k]).to_bits(), (props[i][k] + comp[i][k]).to_bits());
            }
        }
    }

    #[test]
    fn packet_bytes_follow_the_formula(k in 0usize..500, d in 1usize..128) {
        let p = MessagePacket { agent_id: 1, features: Matrix::zeros(k, d), coords: vec![[0.0; 3]; k], pose: [0.0; 6] };
        let c = comm_volume(&p);
        prop_assert_eq!(c.payload_bytes, 4 * (k as u64 * (d as u64 + 3) + 6));
    }
}
