use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mars_cli::descriptor::Descriptor;
use mars_cli::formats;
use mars_core::model::{LayerDef, NetworkModel};
use mars_core::prune::SparsityConfig;
use mars_core::quant::{quantize_model, QuantConfig};
use mars_core::synth::{apply_layer_mask, random_mask, slab_uniform_mask, tiny_defs};
use mars_core::tensor::{ConvSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn mars(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mars"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn mars")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = mars(dir, args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "mars {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    mars(dir, args).status.code().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Writes `net.json` and `weights.mrsw` for a float model.
fn write_net(dir: &Path, model: &NetworkModel, q: QuantConfig) {
    let desc = Descriptor::from_defs(model.input_dims, &model.defs(), q, SparsityConfig::default());
    fs::write(dir.join("net.json"), desc.to_json()).unwrap();
    fs::write(dir.join("weights.mrsw"), formats::write_weights(model).unwrap()).unwrap();
}

fn quant(b_w: u32, b_a: u32) -> QuantConfig {
    QuantConfig {
        b_w,
        b_a,
        ..QuantConfig::default()
    }
}

#[test]
fn help_exits_zero_and_bad_flag_exits_two() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(t.path(), &["--help"]), 0);
    assert_eq!(code(t.path(), &["quantize", "--nope"]), 2);
    assert_eq!(code(t.path(), &["frobnicate"]), 2);
}

#[test]
fn four_bit_codes_stay_in_range() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["synth", "--channels", "16,32", "--input", "3,6,6"]);
    let stdout = ok(d, &["quantize", "--net", "net.json", "--weights", "weights.mrsw", "--bw", "4"]);
    assert!(stdout.contains("layer 1 codes -7..7"));
    let m = formats::read_model(&fs::read(d.join("model.mrsq")).unwrap()).unwrap();
    assert_eq!(m.b_w, 4);
    assert!(m.layers.iter().flat_map(|l| &l.codes).all(|c| (-7..=7).contains(c)));
}

#[test]
fn out_of_range_bit_width_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["synth"]);
    assert_eq!(code(d, &["quantize", "--net", "net.json", "--weights", "weights.mrsw", "--bw", "9"]), 2);
    assert!(!d.join("model.mrsq").exists());
}

#[test]
fn all_zero_weights_quantize_to_zero() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = NetworkModel::random([3, 6, 6], &tiny_defs(3, &[16, 16], false).unwrap(), 0.1, &mut rng).unwrap();
    for l in &mut m.layers {
        l.weights = l.weights.map(|_| 0.0);
    }
    write_net(d, &m, quant(8, 8));
    ok(d, &["quantize", "--net", "net.json", "--weights", "weights.mrsw"]);
    let q = formats::read_model(&fs::read(d.join("model.mrsq")).unwrap()).unwrap();
    assert!(q.layers.iter().flat_map(|l| &l.codes).all(|&c| c == 0));
}

#[test]
fn non_finite_weights_are_a_constraint_violation() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = NetworkModel::random([3, 6, 6], &tiny_defs(3, &[16], false).unwrap(), 0.1, &mut rng).unwrap();
    m.layers[0].weights.data_mut()[5] = f64::NAN;
    write_net(d, &m, quant(8, 8));
    let o = mars(d, &["quantize", "--net", "net.json", "--weights", "weights.mrsw"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("degenerate group"));
}

#[test]
fn schema_violations_exit_two() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["synth"]);
    let text = fs::read_to_string(d.join("net.json")).unwrap();
    fs::write(d.join("bad.json"), text.replacen("\"stride\"", "\"strides\"", 1)).unwrap();
    assert_eq!(code(d, &["quantize", "--net", "bad.json", "--weights", "weights.mrsw"]), 2);
    fs::write(d.join("short.mrsw"), &fs::read(d.join("weights.mrsw")).unwrap()[..100]).unwrap();
    assert_eq!(code(d, &["quantize", "--net", "net.json", "--weights", "short.mrsw"]), 2);
    assert_eq!(code(d, &["quantize", "--net", "missing.json", "--weights", "weights.mrsw"]), 2);
}

#[test]
fn unknown_config_keys_exit_two() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    fs::write(d.join("cfg.json"), r#"{"sim": {"cores": 4, "turbo": true}}"#).unwrap();
    assert_eq!(code(d, &["--config", "cfg.json", "report", "table4"]), 2);
    fs::write(d.join("cfg.json"), r#"{"sim": {"cores": 9}}"#).unwrap();
    assert_eq!(code(d, &["--config", "cfg.json", "report", "table4"]), 2);
}

fn quantized_tiny(d: &Path, channels: &str, seed: &str) {
    ok(d, &["--seed", seed, "synth", "--channels", channels, "--input", "16,6,6", "--weight-std", "1.0"]);
    ok(d, &["quantize", "--net", "net.json", "--weights", "weights.mrsw"]);
}

#[test]
fn prune_hits_target_from_above() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    quantized_tiny(d, "32,32,16", "4");
    ok(d, &["prune", "--model", "model.mrsq", "--target", "0.95"]);
    let rows = csv_rows(&d.join("sparsity.csv"));
    let total = rows.last().unwrap();
    assert_eq!(total[0], "total");
    let ratio: f64 = total[2].parse().unwrap();
    let sets = (2 * 9 + 2 * 2 * 9 + 2 * 9) as f64;
    assert!(ratio >= 0.95 - 1e-6 && ratio < 0.95 + 1.0 / sets, "{ratio}");
    let mask = formats::read_mask(&fs::read(d.join("mask.mrsm")).unwrap()).unwrap();
    assert_eq!((mask.alpha, mask.n), (16, 16));
    assert_eq!(mask.mask.pruned_count(), (0.95 * sets).ceil() as usize);
}

#[test]
fn zero_target_is_identity() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    quantized_tiny(d, "16,32", "5");
    ok(d, &["prune", "--model", "model.mrsq", "--target", "0"]);
    assert_eq!(fs::read(d.join("model.mrsq")).unwrap(), fs::read(d.join("pruned.mrsq")).unwrap());
    let rows = csv_rows(&d.join("sparsity.csv"));
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));
    let mask = formats::read_mask(&fs::read(d.join("mask.mrsm")).unwrap()).unwrap();
    assert_eq!(mask.mask.pruned_count(), 0);
}

#[test]
fn coarser_groups_zero_fewer_sets_at_equal_budget() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    quantized_tiny(d, "32,64", "6");
    let ratio = |n: &str| -> f64 {
        let out = d.join(format!("n{n}"));
        ok(
            d,
            &["prune", "--model", "model.mrsq", "--element-budget", "0.6", "--n", n, "--out", out.to_str().unwrap()],
        );
        csv_rows(&out.join("sparsity.csv")).last().unwrap()[2].parse().unwrap()
    };
    let (r16, r32) = (ratio("16"), ratio("32"));
    assert!(r32 <= r16, "n=32 {r32} vs n=16 {r16}");
    assert!(r16 > 0.0);
}

#[test]
fn indivisible_groups_exit_two() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    quantized_tiny(d, "16,32", "7");
    assert_eq!(code(d, &["prune", "--model", "model.mrsq", "--target", "0.5", "--n", "12"]), 2);
}

#[test]
fn map_reproduces_a_published_storage_row() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let defs = [LayerDef::conv(ConvSpec::square(3, 256, 256, 1, 1))];
    let m = NetworkModel::random([256, 2, 2], &defs, 0.5, &mut rng).unwrap();
    let mut q = quantize_model(&m, &quant(8, 8)).unwrap();
    let keep = random_mask(&mut rng, 16 * 144, 0.932);
    apply_layer_mask(&mut q.layers[0], &keep).unwrap();
    fs::write(d.join("p.mrsq"), formats::write_model(&q).unwrap()).unwrap();
    ok(d, &["map", "--model", "p.mrsq"]);
    let row = &csv_rows(&d.join("storage.csv"))[0];
    let v = |i: usize| row[i].parse::<f64>().unwrap();
    assert_eq!(row[1], "3x3x256x256");
    assert!((v(5) - 313.34).abs() / 313.34 < 0.005, "weight {}", v(5));
    assert!((v(4) - 2.46).abs() / 2.46 < 0.01, "index {}", v(4));
    assert!((v(6) - 14.59).abs() / 14.59 < 0.01, "rate {}", v(6));
}

#[test]
fn dense_layer_warns_about_index_overhead() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    quantized_tiny(d, "16", "9");
    let o = mars(d, &["map", "--model", "model.mrsq"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: layer 0"));
    let rate: f64 = csv_rows(&d.join("storage.csv"))[0][6].parse().unwrap();
    assert!(rate < 1.0);
}

#[test]
fn empty_network_maps_to_empty_table() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    fs::write(d.join("net.json"), r#"{"input": [16, 4, 4], "layers": []}"#).unwrap();
    let empty = NetworkModel {
        input_dims: [16, 4, 4],
        layers: vec![],
    };
    fs::write(d.join("weights.mrsw"), formats::write_weights(&empty).unwrap()).unwrap();
    ok(d, &["quantize", "--net", "net.json", "--weights", "weights.mrsw"]);
    ok(d, &["map", "--model", "model.mrsq"]);
    assert!(csv_rows(&d.join("storage.csv")).is_empty());
}

#[test]
fn count_overflow_exits_three_with_layer() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let defs = tiny_defs(16, &[16, 128, 16], false).unwrap();
    let m = NetworkModel::random([16, 4, 4], &defs, 1.0, &mut rng).unwrap();
    write_net(d, &m, quant(8, 8));
    ok(d, &["quantize", "--net", "net.json", "--weights", "weights.mrsw"]);
    let o = mars(d, &["map", "--model", "model.mrsq"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("layer 2") && err.contains("count field overflow"), "{err}");
}

fn pipeline(d: &Path, target: &str) {
    ok(d, &["--seed", "11", "synth", "--channels", "16,32", "--input", "3,8,8", "--pool", "--bw", "4", "--ba", "4"]);
    ok(d, &["quantize", "--net", "net.json", "--weights", "weights.mrsw"]);
    ok(d, &["prune", "--model", "model.mrsq", "--target", target]);
    ok(d, &["map", "--model", "pruned.mrsq"]);
    ok(d, &["simulate", "--image", "image.mrsi", "--input", "input.mrsa", "--baseline", "--trace"]);
    ok(d, &["reference", "--net", "net.json", "--model", "pruned.mrsq", "--input", "input.mrsa"]);
}

#[test]
fn simulate_matches_reference_bytes() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    pipeline(d, "0.4");
    assert_eq!(fs::read(d.join("output.mrsa")).unwrap(), fs::read(d.join("reference.mrsa")).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let total = &report["total"];
    assert_eq!(total["system_cycles"].as_u64().unwrap(), 4 * total["core_cycles"].as_u64().unwrap());
    let trace = fs::read(d.join("trace.bin")).unwrap();
    assert_eq!(trace.len() as u64, total["system_cycles"].as_u64().unwrap());
    assert_eq!(mars_core::sim::verify_trace_bytes(&trace).violations(), 0);
}

#[test]
fn every_command_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    pipeline(a.path(), "0.5");
    pipeline(b.path(), "0.5");
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 14);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn dense_image_has_unit_speedup() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    quantized_tiny(d, "16,32", "12");
    ok(d, &["map", "--model", "model.mrsq", "--dense"]);
    let x = mars_core::synth::random_input(&mut ChaCha8Rng::seed_from_u64(1), [16, 6, 6], 8);
    fs::write(d.join("x.mrsa"), formats::write_activations(&x, 8).unwrap()).unwrap();
    ok(d, &["simulate", "--image", "image.mrsi", "--input", "x.mrsa", "--baseline"]);
    let rows = csv_rows(&d.join("report.csv"));
    let speedup: f64 = rows.last().unwrap()[11].parse().unwrap();
    assert!((speedup - 1.0).abs() <= 0.01);
}

#[test]
fn uniform_ninety_percent_cuts_macro_accesses_tenfold() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // 10 chunks x 9 taps = 90 group-sets per slab, so 0.9 is exact.
    let defs = [LayerDef::conv(ConvSpec::square(3, 160, 32, 1, 1))];
    let m = NetworkModel::random([160, 5, 5], &defs, 1.0, &mut rng).unwrap();
    let mut q = quantize_model(&m, &quant(8, 8)).unwrap();
    let keep = slab_uniform_mask(&mut rng, &defs[0], 0.9).unwrap();
    apply_layer_mask(&mut q.layers[0], &keep).unwrap();
    fs::write(d.join("p.mrsq"), formats::write_model(&q).unwrap()).unwrap();
    let x = mars_core::synth::random_input(&mut rng, [160, 5, 5], 8);
    fs::write(d.join("x.mrsa"), formats::write_activations(&x, 8).unwrap()).unwrap();
    ok(d, &["map", "--model", "p.mrsq"]);
    ok(d, &["simulate", "--image", "image.mrsi", "--input", "x.mrsa", "--baseline"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let l = &report["layers"][0];
    let sparse = l["macro_accesses"].as_u64().unwrap();
    let dense = l["dense"]["macro_accesses"].as_u64().unwrap();
    assert_eq!(dense, 10 * sparse);
}

#[test]
fn bit_serial_mode_changes_counters_not_values() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    pipeline(d, "0.3");
    let out = d.join("bs");
    ok(
        d,
        &["simulate", "--image", "image.mrsi", "--input", "input.mrsa", "--mode", "bit-serial", "--out", out.to_str().unwrap()],
    );
    assert_eq!(fs::read(out.join("output.mrsa")).unwrap(), fs::read(d.join("output.mrsa")).unwrap());
    let acc = |p: &Path| -> u64 {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        v["total"]["macro_accesses"].as_u64().unwrap()
    };
    assert_eq!(acc(&out.join("report.json")), 4 * acc(&d.join("report.json")));
}

#[test]
fn oversize_feature_map_exits_three() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    quantized_tiny(d, "16", "14");
    ok(d, &["map", "--model", "model.mrsq"]);
    let x = mars_core::synth::random_input(&mut ChaCha8Rng::seed_from_u64(1), [16, 6, 6], 8);
    fs::write(d.join("x.mrsa"), formats::write_activations(&x, 8).unwrap()).unwrap();
    fs::write(d.join("cfg.json"), r#"{"sim": {"fm_capacity_bytes": 64}}"#).unwrap();
    let o = mars(d, &["--config", "cfg.json", "simulate", "--image", "image.mrsi", "--input", "x.mrsa"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("layer 0"));
}

#[test]
fn reference_is_deterministic() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    quantized_tiny(d, "16,16", "15");
    let x = mars_core::synth::random_input(&mut ChaCha8Rng::seed_from_u64(2), [16, 6, 6], 8);
    fs::write(d.join("x.mrsa"), formats::write_activations(&x, 8).unwrap()).unwrap();
    ok(d, &["reference", "--model", "model.mrsq", "--input", "x.mrsa"]);
    let first = fs::read(d.join("reference.mrsa")).unwrap();
    ok(d, &["reference", "--model", "model.mrsq", "--input", "x.mrsa"]);
    assert_eq!(first, fs::read(d.join("reference.mrsa")).unwrap());
}

#[test]
fn identity_net_reproduces_its_input() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let defs = [LayerDef::conv(ConvSpec::square(1, 16, 16, 1, 0))];
    let mut m = NetworkModel::random([16, 5, 5], &defs, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    m.layers[0].weights = Tensor::from_fn(vec![16, 16, 1, 1], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
    m.layers[0].bias = vec![0.0; 16];
    write_net(d, &m, quant(8, 4));
    ok(d, &["quantize", "--net", "net.json", "--weights", "weights.mrsw"]);
    let x = mars_core::synth::random_input(&mut ChaCha8Rng::seed_from_u64(4), [16, 5, 5], 4);
    fs::write(d.join("x.mrsa"), formats::write_activations(&x, 4).unwrap()).unwrap();
    ok(d, &["reference", "--net", "net.json", "--model", "model.mrsq", "--input", "x.mrsa"]);
    let (y, _) = formats::read_activations(&fs::read(d.join("reference.mrsa")).unwrap()).unwrap();
    assert_eq!(y, x);
}

#[test]
fn reference_rejects_mismatched_inputs() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    quantized_tiny(d, "16", "16");
    let x = mars_core::synth::random_input(&mut ChaCha8Rng::seed_from_u64(2), [16, 5, 5], 8);
    fs::write(d.join("x.mrsa"), formats::write_activations(&x, 8).unwrap()).unwrap();
    assert_eq!(code(d, &["reference", "--model", "model.mrsq", "--input", "x.mrsa"]), 2);
    ok(d, &["--out", "other", "--seed", "3", "synth", "--channels", "32", "--input", "16,6,6"]);
    assert_eq!(
        code(d, &["reference", "--net", "other/net.json", "--model", "model.mrsq", "--input", "other/input.mrsa"]),
        2
    );
}

#[test]
fn reports_write_data_files() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["report", "table4"]);
    let rows = csv_rows(&d.join("table4.csv"));
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[4][0], "3x3x256x256");
    ok(d, &["report", "sweep", "--shape", "3,3,16,32", "--ratios", "0,0.5"]);
    let rows = csv_rows(&d.join("sweep.csv"));
    assert_eq!(rows.len(), 2);
    assert!((rows[0][3].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
}
