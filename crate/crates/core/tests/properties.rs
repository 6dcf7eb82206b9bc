//! Randomized checks of the library's invariants across module boundaries.

use proptest::prelude::*;

use sconv_core::autotune::{autotune_network, candidate_tiles, CostModelProfiler, TuneTask};
use sconv_core::execution::{
    arrangement_padding, build_metadata_tables, dense_conv_oracle, check_against_oracle, gather, gemm_execute,
    gemm_unbatched, group_gemms, prepare_layer, sc_layer_forward, scatter, GroupingParams, GroupingPolicy, LayerConfig,
    MapBackend, WeightSet,
};
use sconv_core::geometry::{generate_output_coords, weight_offsets};
use sconv_core::kernelmap::baseline::{brute_force_map, build_hash_index, query_hash_map};
use sconv_core::kernelmap::sorted::{build_kernel_map_sorted, SearchParams};
use sconv_core::netdef::{forward_network, LayerSpec, NetworkSpec};
use sconv_core::synthetic::{random_cloud, random_matrix};
use sconv_core::{Coordinate, PointCloud};

/// Random cloud shifted so that it straddles the origin.
fn cloud(n: usize, extent: u32, channels: usize, seed: u64) -> PointCloud {
    let n = n.min((extent as usize).pow(3));
    let pc = random_cloud(n, extent, channels, seed).unwrap();
    let h = extent as i32 / 2;
    let coords = pc.coords().iter().map(|c| Coordinate::new(c.x - h, c.y - h, c.z - h)).collect();
    PointCloud::new(coords, pc.features().clone()).unwrap()
}

fn ceil_log2(v: u64) -> u64 {
    64 - (v.max(1) - 1).leading_zeros() as u64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn map_backends_agree_with_brute_force(
        n in 0usize..1500,
        extent in 2u32..40,
        kernel in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        block in 1usize..64,
        query in 1usize..64,
        seed in any::<u64>(),
    ) {
        let pc = cloud(n, extent, 0, seed).to_sorted().0;
        let outputs = generate_output_coords(&pc, stride).unwrap().coords;
        let offsets = weight_offsets(kernel, stride).unwrap();
        let expected = brute_force_map(pc.coords(), &outputs, &offsets);
        let index = build_hash_index(&pc);
        let (hash, probes) = query_hash_map(&index, &outputs, &offsets);
        let params = SearchParams { block_size: block, query_block: query };
        let (sorted, counters) = build_kernel_map_sorted(&pc, &outputs, &offsets, params).unwrap();
        prop_assert_eq!(&hash, &expected);
        prop_assert_eq!(&sorted, &expected);
        for list in expected.lists() {
            prop_assert!(list.windows(2).all(|w| w[0].output < w[1].output));
        }

        prop_assert!(index.load_factor() <= 0.5);
        prop_assert!((probes.max_probe as usize) <= index.capacity());

        let (p, q) = (pc.len() as u64, outputs.len() as u64);
        let backward_bound = offsets.len() as u64 * p.div_ceil(block as u64) * ceil_log2(q + 1);
        prop_assert!(counters.backward_comparisons <= backward_bound);
        prop_assert!(counters.forward_comparisons <= counters.queries_executed * ceil_log2(block as u64 + 1));
    }

    #[test]
    fn gather_scatter_tile_invariance(
        n in 1usize..600,
        extent in 3u32..14,
        channels in prop::sample::select(vec![1usize, 4, 6, 12, 16]),
        policy in prop::sample::select(vec![GroupingPolicy::Sorted, GroupingPolicy::MapOrder]),
        seed in any::<u64>(),
    ) {
        let pc = cloud(n, extent, channels, seed);
        let cfg = LayerConfig { grouping: policy, ..LayerConfig::default() };
        let prep = prepare_layer(&pc, 3, 1, &cfg).unwrap();
        let buf_rows = prep.tables.buffer_len;
        let products = random_matrix(buf_rows, channels, seed, 7, -1.0, 1.0);
        let mut reference = None;
        for t in candidate_tiles(channels) {
            let (g, g_lookups) = gather(prep.input.features(), &prep.tables.imt, buf_rows, t).unwrap();
            let (s, s_lookups) = scatter(&products, &prep.tables.omt, t).unwrap();
            prop_assert_eq!(g_lookups, (channels / t) as u64 * prep.map.total() as u64);
            prop_assert_eq!(s_lookups, (channels / t) as u64 * prep.map.total() as u64);
            match &reference {
                None => reference = Some((g, s)),
                Some((g0, s0)) => {
                    prop_assert!(g.bit_eq(g0));
                    prop_assert!(s.bit_eq(s0));
                }
            }
        }
    }

    #[test]
    fn grouped_gemm_equals_unbatched(
        n in 1usize..500,
        extent in 3u32..12,
        c_in in 1usize..9,
        c_out in 1usize..9,
        epsilon in 0.0f64..2.0,
        max_batch in 1usize..30,
        width in 1usize..6,
        seed in any::<u64>(),
    ) {
        let pc = cloud(n, extent, c_in, seed).to_sorted().0;
        let offsets = weight_offsets(3, 1).unwrap();
        let map = brute_force_map(pc.coords(), pc.coords(), &offsets);
        let params = GroupingParams { epsilon, max_batch };
        let plan = group_gemms(&map.sizes(), GroupingPolicy::Sorted, params).unwrap();
        let tables = build_metadata_tables(&map, &plan, pc.len(), pc.len()).unwrap();
        let (buffer, _) = gather(pc.features(), &tables.imt, tables.buffer_len, 1).unwrap();
        let w = WeightSet::random(offsets.len(), c_in, c_out, seed, 0);
        let grouped = gemm_execute(&buffer, &w, &plan, width).unwrap();
        prop_assert!(grouped.bit_eq(&gemm_unbatched(&buffer, &w, &plan).unwrap()));
    }

    #[test]
    fn grouping_plan_is_well_formed(
        sizes in prop::collection::vec(0usize..400, 1..40),
        epsilon in 0.0f64..1.0,
        max_batch in 1usize..20,
        policy in prop::sample::select(vec![GroupingPolicy::Sorted, GroupingPolicy::MapOrder]),
    ) {
        let plan = group_gemms(&sizes, policy, GroupingParams { epsilon, max_batch }).unwrap();
        let mut seen: Vec<usize> = plan.offset_order.clone();
        seen.sort_unstable();
        let nonempty: Vec<usize> = (0..sizes.len()).filter(|&k| sizes[k] > 0).collect();
        prop_assert_eq!(seen, nonempty);
        let mut next = 0;
        for (g, range) in plan.groups.iter().enumerate() {
            prop_assert_eq!(range.start, next);
            next = range.end;
            let members = plan.members(g);
            prop_assert!(!members.is_empty() && members.len() <= max_batch);
            let real: usize = members.iter().map(|&k| sizes[k]).sum();
            let pad = plan.padded_heights[g] * members.len() - real;
            prop_assert_eq!(plan.padded_heights[g], members.iter().map(|&k| sizes[k]).max().unwrap());
            if members.len() > 1 {
                prop_assert!(pad as f64 <= epsilon * real as f64 + 1e-9);
            }
        }
        prop_assert_eq!(next, plan.offset_order.len());
        prop_assert_eq!(plan.real_rows() + plan.padded_rows(), plan.buffer_len);
    }

    #[test]
    fn ascending_is_optimal_for_equal_cardinalities(
        card in 1usize..4,
        groups in 1usize..4,
        pool in prop::collection::vec(1usize..100, 9),
    ) {
        let mut sizes = pool[..(card * groups).min(8)].to_vec();
        let cards = vec![card; sizes.len() / card];
        sizes.truncate(card * cards.len());
        sizes.sort_unstable();
        let ascending = arrangement_padding(&sizes, &cards);
        let mut best = usize::MAX;
        permute(&mut sizes.clone(), 0, &mut |p| best = best.min(arrangement_padding(p, &cards)));
        prop_assert_eq!(ascending, best);
    }

    #[test]
    fn layer_matches_dense_oracle(
        n in 0usize..250,
        extent in 2u32..9,
        kernel in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        channels in prop::sample::select(vec![1usize, 4, 8]),
        backend in prop::sample::select(vec![MapBackend::Hash, MapBackend::Sorted]),
        seed in any::<u64>(),
    ) {
        let pc = cloud(n, extent, channels, seed);
        let w = WeightSet::random(kernel.pow(3), channels, 3, seed, 1);
        let cfg = LayerConfig { backend, ..LayerConfig::default() };
        let (out, metrics) = sc_layer_forward(&pc, &w, kernel, stride, &cfg).unwrap();
        let oracle = dense_conv_oracle(&pc, &w, kernel, stride).unwrap();
        let check = check_against_oracle(&out, &oracle, 1e-5);
        prop_assert!(check.passed, "{:?}", check);
        prop_assert_eq!(metrics.matches, brute_force_map(
            pc.to_sorted().0.coords(),
            &generate_output_coords(&pc.to_sorted().0, stride).unwrap().coords,
            &weight_offsets(kernel, stride).unwrap(),
        ).total());
    }

    #[test]
    fn tuner_matches_brute_force_on_cost_model(
        c_in in prop::sample::select(vec![1usize, 6, 16, 24, 64]),
        c_out in prop::sample::select(vec![2usize, 8, 12, 32]),
        a in 0.1f64..10.0,
        b in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let pc = cloud(150, 8, c_in, seed);
        let layers = [LayerSpec::new(3, 1, c_in, c_out)];
        let cost = |c: usize, t: usize| a * (c / t) as f64 + b * t as f64;
        let mut profiler = CostModelProfiler(|task: &TuneTask<'_>, t: usize| cost(task.channels(), t));
        let tuned = autotune_network(&layers, std::slice::from_ref(&pc), &LayerConfig::default(), 1, &mut profiler).unwrap();
        let argmin = |c: usize| {
            let mut best = (0, f64::INFINITY);
            for t in candidate_tiles(c) {
                if cost(c, t) < best.1 {
                    best = (t, cost(c, t));
                }
            }
            best.0
        };
        prop_assert_eq!(tuned[0].gather_tile, argmin(c_in));
        prop_assert_eq!(tuned[0].scatter_tile, argmin(c_out));
        tuned[0].validate(c_in, c_out).unwrap();
    }

    #[test]
    fn network_sort_count_and_backend_equivalence(
        strides in prop::collection::vec(1usize..3, 1..5),
        n in 1usize..400,
        seed in any::<u64>(),
    ) {
        let layers: Vec<LayerSpec> = strides.iter().map(|&s| LayerSpec::new(3, s, 2, 2)).collect();
        let net = NetworkSpec::new(layers).unwrap();
        prop_assert_eq!(NetworkSpec::parse(&net.to_text()).unwrap(), net.clone());
        let pc = cloud(n, 12, 2, seed);
        let mut outs = Vec::new();
        for backend in [MapBackend::Hash, MapBackend::Sorted] {
            let cfg = LayerConfig { backend, ..LayerConfig::default() };
            let run = forward_network(&net, &pc, &cfg, seed).unwrap();
            prop_assert_eq!(run.total_sorts(), 1 + strides.iter().filter(|&&s| s > 1).count());
            outs.push(run.output);
        }
        prop_assert!(outs[0].bit_eq(&outs[1]));
    }
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}
