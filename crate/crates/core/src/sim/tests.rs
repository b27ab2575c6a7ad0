use super::*;
use crate::model::{LayerDef, NetworkModel, PoolSpec};
use crate::quant::{forward_quantized, quantize_model, QuantConfig};
use crate::mapper::{mapping_spec, MapGeometry};
use crate::synth::{apply_layer_mask, random_input, random_mask, tiny_defs};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quantized(defs: &[LayerDef], input: [usize; 3], b_w: u32, b_a: u32, seed: u64) -> QuantizedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = NetworkModel::random(input, defs, 0.5, &mut rng).unwrap();
    let cfg = QuantConfig {
        b_w,
        b_a,
        ..QuantConfig::default()
    };
    quantize_model(&model, &cfg).unwrap()
}

fn prune(q: &mut QuantizedModel, ratios: &[f64], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, &r) in q.layers.iter_mut().zip(ratios) {
        let total = MapGeometry::new(&mapping_spec(&l.def)).unwrap().total_sets();
        let keep = random_mask(&mut rng, total, r);
        apply_layer_mask(l, &keep).unwrap();
    }
}

#[test]
fn dense_layer_activates_every_set_at_every_pixel() {
    let defs = tiny_defs(16, &[32], false).unwrap();
    let q = quantized(&defs, [16, 6, 6], 8, 8, 1);
    let net = map_network(&q, CORES).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(&mut rng, [16, 6, 6], 8);
    let run = run_network(&net, &x, &SimConfig::default()).unwrap();
    let c = &run.layers[0];
    assert_eq!(c.groupsets_activated, 2 * 9 * 36);
    assert_eq!(c.macro_accesses, 2 * c.groupsets_activated);
    assert_eq!(c.fm_reads, c.groupsets_activated);
    assert_eq!(c.fm_writes, 2 * 36);
    assert_eq!(run.output, forward_quantized(&q, &x).unwrap());
}

#[test]
fn all_zero_layer_only_writes_bias() {
    let defs = tiny_defs(16, &[16], false).unwrap();
    let mut q = quantized(&defs, [16, 4, 4], 4, 4, 3);
    q.layers[0].codes.iter_mut().for_each(|c| *c = 0);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(4), [16, 4, 4], 4);
    let run = run_network(&net, &x, &SimConfig::default()).unwrap();
    assert_eq!(run.layers[0].macro_accesses, 0);
    assert_eq!(run.layers[0].fm_reads, 0);
    let l = &q.layers[0];
    for k in 0..16 {
        let expect = requantize(l.bias_codes[k] as i64, l.scale, 4) as i64;
        assert!(run.output.data()[k * 16..(k + 1) * 16].iter().all(|&v| v == expect));
    }
}

#[test]
fn half_pruned_layer_matches_golden() {
    let defs = tiny_defs(16, &[16], false).unwrap();
    let mut q = quantized(&defs, [16, 8, 8], 8, 8, 5);
    prune(&mut q, &[0.5], 6);
    let net = map_network(&q, CORES).unwrap();
    let stored = net.layers[0].sets.stored() as u64;
    // 9 sets, round(4.5) = 5 pruned
    assert_eq!(stored, 4);
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(7), [16, 8, 8], 8);
    let run = run_network(&net, &x, &SimConfig::default()).unwrap();
    assert_eq!(run.output, forward_quantized(&q, &x).unwrap());
    assert_eq!(run.layers[0].groupsets_activated, stored * 64);
}

#[test]
fn one_layer_network_equals_run_layer() {
    let defs = tiny_defs(16, &[32], true).unwrap();
    let q = quantized(&defs, [16, 6, 6], 4, 8, 9);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(10), [16, 6, 6], 8);
    let cfg = SimConfig::default();
    let run = run_network(&net, &x, &cfg).unwrap();
    let mut ifm = FmSram::new();
    let mut ofm = FmSram::new();
    ifm.load(&x).unwrap();
    let c = run_layer(0, &net.layers[0], &mut ifm, &mut ofm, 8, &cfg).unwrap();
    assert_eq!(ofm.contents(), run.output);
    assert_eq!(c, run.layers[0]);
    assert_eq!(run.output.dims(), &[32, 3, 3]);
}

#[test]
fn dense_network_has_unit_speedup() {
    let defs = tiny_defs(16, &[16, 32], false).unwrap();
    let q = quantized(&defs, [16, 5, 5], 8, 4, 11);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(12), [16, 5, 5], 4);
    let (_, report) = simulate(&net, &x, &SimConfig::default(), true).unwrap();
    for l in report.layers.iter().chain([&report.total]) {
        assert_eq!(l.speedup_vs_dense, Some(1.0));
        assert_eq!(l.fm_access_reduction, Some(1.0));
    }
}

#[test]
fn macro_access_ratios_follow_zero_ratios() {
    let defs = tiny_defs(16, &[32, 32, 32], false).unwrap();
    let mut q = quantized(&defs, [16, 6, 6], 8, 8, 13);
    prune(&mut q, &[0.0, 0.5, 0.9], 14);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(15), [16, 6, 6], 8);
    let (out, report) = simulate(&net, &x, &SimConfig::default(), true).unwrap();
    assert_eq!(out, forward_quantized(&q, &x).unwrap());
    // 36 sets per layer: 0, 18 and 32 pruned
    let expect = [36.0 / 36.0, 18.0 / 36.0, 4.0 / 36.0];
    for (l, e) in report.layers.iter().zip(expect) {
        assert_eq!(l.macro_access_ratio, Some(e));
        let d = l.dense.as_ref().unwrap();
        assert_eq!(l.counters.fm_reads as f64 / d.fm_reads as f64, e);
        assert_eq!(l.counters.system_cycles, 4 * l.counters.core_cycles);
    }
}

#[test]
fn bit_serial_matches_behavioral() {
    let defs = tiny_defs(16, &[16], false).unwrap();
    let mut q = quantized(&defs, [16, 4, 4], 4, 4, 16);
    prune(&mut q, &[0.25], 17);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(18), [16, 4, 4], 4);
    let a = run_network(&net, &x, &SimConfig::default()).unwrap();
    let cfg = SimConfig {
        mode: ActivationMode::BitSerial,
        ..SimConfig::default()
    };
    let b = run_network(&net, &x, &cfg).unwrap();
    assert_eq!(a.output, b.output);
    assert_eq!(b.layers[0].macro_accesses, 4 * a.layers[0].macro_accesses);
    assert_eq!(b.layers[0].fm_reads, a.layers[0].fm_reads);
}

#[test]
fn accumulator_overflow_is_an_error() {
    let defs = tiny_defs(16, &[16], false).unwrap();
    let mut q = quantized(&defs, [16, 4, 4], 8, 8, 19);
    q.layers[0].bias_codes[3] = i32::MAX;
    q.layers[0].codes.iter_mut().for_each(|c| *c = 127);
    let net = map_network(&q, CORES).unwrap();
    let x = Tensor::filled(vec![16, 4, 4], 255);
    let e = run_network(&net, &x, &SimConfig::default()).unwrap_err();
    assert!(matches!(e, MarsError::AccumulatorOverflow { layer: 0, .. }));
}

#[test]
fn fc_layer_runs_on_flattened_map() {
    use crate::model::LayerKind;
    let conv = LayerDef {
        pool: Some(PoolSpec { window: 2, stride: 2 }),
        ..LayerDef::conv(ConvSpec::square(3, 3, 16, 1, 1))
    };
    let fc = LayerDef {
        kind: LayerKind::Fc,
        ..LayerDef::conv(ConvSpec::square(1, 64, 32, 1, 0))
    };
    let mut q = quantized(&[conv, fc], [3, 4, 4], 8, 8, 20);
    prune(&mut q, &[0.0, 0.5], 21);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(22), [3, 4, 4], 8);
    let run = run_network(&net, &x, &SimConfig::default()).unwrap();
    assert_eq!(run.output, forward_quantized(&q, &x).unwrap());
    assert_eq!(run.output.dims(), &[32, 1, 1]);
}

#[test]
fn strided_unpadded_layer_matches_golden() {
    let def = LayerDef::conv(ConvSpec::square(3, 32, 16, 2, 0));
    let mut q = quantized(&[def], [32, 9, 9], 4, 8, 23);
    prune(&mut q, &[0.25], 24);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(25), [32, 9, 9], 8);
    let run = run_network(&net, &x, &SimConfig::default()).unwrap();
    assert_eq!(run.output, forward_quantized(&q, &x).unwrap());
}

#[test]
fn trace_satisfies_shunter_contract() {
    let defs = tiny_defs(16, &[16, 48], false).unwrap();
    let mut q = quantized(&defs, [16, 4, 4], 8, 8, 26);
    prune(&mut q, &[0.5, 0.3], 27);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(28), [16, 4, 4], 8);
    let (_, report) = simulate(&net, &x, &SimConfig::default(), false).unwrap();
    let check = verify_trace(shunter_trace(&report));
    assert_eq!(check.violations(), 0);
    assert_eq!(check.system_cycles, report.total.counters.system_cycles);
    // the 16-kernel layer keeps cores 1..3 idle, but their slots still come round
    let l0 = &report.layers[0].counters;
    assert_eq!(l0.per_core_cycles[1..], [0, 0, 0]);
    let first: Vec<Grant> = shunter_trace(&report).take(8).collect();
    assert_eq!(first.iter().map(|g| g.core).collect::<Vec<_>>(), vec![0, 1, 2, 3, 0, 1, 2, 3]);
    assert!(first[0].active && !first[1].active);
    let bytes: Vec<u8> = shunter_trace(&report).map(Grant::to_byte).collect();
    assert_eq!(verify_trace_bytes(&bytes).violations(), 0);
}

#[test]
fn energy_table_is_optional() {
    let defs = tiny_defs(16, &[16], false).unwrap();
    let q = quantized(&defs, [16, 3, 3], 8, 8, 29);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(30), [16, 3, 3], 8);
    let plain = run_network(&net, &x, &SimConfig::default()).unwrap();
    assert_eq!(plain.layers[0].energy, None);
    let cfg = SimConfig {
        energy: Some(EnergyTable {
            macro_access: 1.0,
            fm_read: 0.0,
            fm_write: 0.0,
            reload_word: 0.0,
        }),
        ..SimConfig::default()
    };
    let e = run_network(&net, &x, &cfg).unwrap();
    assert_eq!(e.layers[0].energy, Some(e.layers[0].macro_accesses as f64));
}

#[test]
fn report_serializes_to_json_and_csv() {
    let defs = tiny_defs(16, &[16], false).unwrap();
    let q = quantized(&defs, [16, 3, 3], 8, 8, 31);
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(32), [16, 3, 3], 8);
    let (_, report) = simulate(&net, &x, &SimConfig::default(), true).unwrap();
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().last().unwrap().starts_with("total,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sparse_run_equals_golden(seed in 0u64..10_000, ratio_i in 0usize..4, bits in 0usize..4, layers in 1usize..=3) {
        let ratio = [0.0, 0.25, 0.5, 0.9][ratio_i];
        let (b_w, b_a) = [(4, 4), (4, 8), (8, 4), (8, 8)][bits];
        let widths: Vec<usize> = (0..layers).map(|i| if (seed >> i) & 1 == 0 { 16 } else { 32 }).collect();
        let defs = tiny_defs(16, &widths, seed % 3 == 0).unwrap();
        let mut q = quantized(&defs, [16, 6, 6], b_w, b_a, seed);
        prune(&mut q, &vec![ratio; layers], seed + 1);
        let net = map_network(&q, CORES).unwrap();
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(seed + 2), [16, 6, 6], b_a);
        let (out, report) = simulate(&net, &x, &SimConfig::default(), true).unwrap();
        prop_assert_eq!(out, forward_quantized(&q, &x).unwrap());
        for l in &report.layers {
            let d = l.dense.as_ref().unwrap();
            let kept = l.counters.stored_groupsets as f64 / l.counters.total_groupsets as f64;
            prop_assert_eq!(l.counters.groupsets_activated as f64 / d.groupsets_activated as f64, kept);
            prop_assert_eq!(l.counters.fm_reads as f64 / d.fm_reads as f64, kept);
            prop_assert_eq!(l.counters.system_cycles, 4 * l.counters.core_cycles);
        }
    }

    #[test]
    fn speedup_monotone_in_sparsity(seed in 0u64..1000) {
        let defs = tiny_defs(32, &[64], false).unwrap();
        let q = quantized(&defs, [32, 6, 6], 8, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_input(&mut rng, [32, 6, 6], 8);
        // nested masks: each step prunes a superset of the previous one
        let mut ranks: Vec<usize> = (0..4 * 18).collect();
        ranks.shuffle(&mut rng);
        let mut last = 0.0;
        for step in 0..10 {
            let ratio = step as f64 / 10.0;
            let cut = (ratio * ranks.len() as f64).round() as usize;
            let mut keep = vec![true; ranks.len()];
            for &i in &ranks[..cut] {
                keep[i] = false;
            }
            let mut ql = q.clone();
            apply_layer_mask(&mut ql.layers[0], &keep).unwrap();
            let net = map_network(&ql, CORES).unwrap();
            let (_, report) = simulate(&net, &x, &SimConfig::default(), true).unwrap();
            let s = report.total.speedup_vs_dense.unwrap();
            prop_assert!(s >= last, "speedup fell from {} to {} at ratio {}", last, s, ratio);
            last = s;
        }
    }
}
