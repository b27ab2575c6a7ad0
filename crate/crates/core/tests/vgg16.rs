use mars_core::mapper::CORES;
use mars_core::quant::forward_quantized;
use mars_core::sim::{map_network, simulate, SimConfig};
use mars_core::synth::{pruned_vgg16, random_input};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn pruned_vgg16_runs_exactly_and_fast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let q = pruned_vgg16(&mut rng).unwrap();
    let net = map_network(&q, CORES).unwrap();
    let x = random_input(&mut rng, [3, 32, 32], 8);
    let (out, report) = simulate(&net, &x, &SimConfig::default(), true).unwrap();
    assert_eq!(out, forward_quantized(&q, &x).unwrap());
    let speedup = report.total.speedup_vs_dense.unwrap();
    println!("{}", report.to_csv());
    assert!(speedup > 5.0, "speedup {speedup}");
}
