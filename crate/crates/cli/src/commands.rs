use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mars_core::error::at_layer;
use mars_core::mapper::{mapping_spec, storage_of, StorageReport};
use mars_core::model::NetworkModel;
use mars_core::prune::{
    apply_mask, prune_to_element_budget, prune_to_target, shapes_of, sparsity_stats, GroupStructure, SparsityConfig,
};
use mars_core::quant::{forward_quantized, quantize_model, weight_code_max, QuantConfig, QuantizedModel};
use mars_core::sim::{shunter_trace, simulate, verify_trace, ActivationMode, MappedLayer, MappedNetwork, SimConfig};
use mars_core::synth::{random_input, tiny_defs, vgg16_defs};
use mars_core::MarsError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::formats::{self, Image, MaskFile};
use crate::{
    report, Cli, Command, MapArgs, Mode, Preset, PruneArgs, QuantizeArgs, ReferenceArgs, SimulateArgs, SynthArgs,
};

/// Contents of the `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub sim: SimConfig,
}

pub struct Ctx {
    pub sim: SimConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Ctx {
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_descriptor(path: &Path) -> Result<Descriptor> {
    Descriptor::from_json(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg: ConfigFile = match &cli.config {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| MarsError::Format(format!("config: {e}")))
            .with_context(|| format!("in {}", p.display()))?,
        None => ConfigFile::default(),
    };
    cfg.sim.validate()?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx {
        sim: cfg.sim,
        seed: cli.seed,
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Quantize(a) => quantize(&ctx, a),
        Command::Prune(a) => prune(&ctx, a),
        Command::Map(a) => map(&ctx, a),
        Command::Simulate(a) => simulate_cmd(&ctx, a),
        Command::Reference(a) => reference(&ctx, a),
        Command::Report(a) => report::run(&ctx, a),
    }
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let (input, defs) = match a.preset {
        Preset::Tiny => {
            let [c, h, w] = <[usize; 3]>::try_from(a.input.as_slice())
                .map_err(|_| MarsError::Config("--input takes C,H,W".into()))?;
            ([c, h, w], tiny_defs(c, &a.channels, a.pool)?)
        }
        Preset::Vgg16 => ([3, 32, 32], vgg16_defs()),
    };
    let quant = QuantConfig {
        b_w: a.bw,
        b_a: a.ba,
        ..QuantConfig::default()
    };
    quant.validate()?;
    let desc = Descriptor::from_defs(input, &defs, quant, SparsityConfig::default());
    let mut rng = ctx.rng();
    let model = NetworkModel::random(input, &defs, a.weight_std, &mut rng)?;
    let x = random_input(&mut rng, input, a.ba);
    ctx.write("net.json", desc.to_json())?;
    ctx.write("weights.mrsw", formats::write_weights(&model)?)?;
    ctx.write("input.mrsa", formats::write_activations(&x, a.ba)?)?;
    println!("{} layers, input {:?}", defs.len(), input);
    Ok(())
}

fn quantize(ctx: &Ctx, a: &QuantizeArgs) -> Result<()> {
    let desc = load_descriptor(&a.net)?;
    let mut q = desc.quantization;
    q.b_w = a.bw.unwrap_or(q.b_w);
    q.b_a = a.ba.unwrap_or(q.b_a);
    q.validate()?;
    let defs = desc.defs()?;
    let model = formats::read_weights(&read(&a.weights)?, desc.input, &defs, q.eps)
        .with_context(|| format!("in {}", a.weights.display()))?;
    let qm = quantize_model(&model, &q)?;
    let max = weight_code_max(q.b_w);
    for (i, l) in qm.layers.iter().enumerate() {
        let h: Vec<String> = l.histogram().iter().map(|c| c.to_string()).collect();
        println!("layer {i} codes {}..{}: {}", -max, max, h.join(" "));
    }
    ctx.write("model.mrsq", formats::write_model(&qm)?)?;
    Ok(())
}

fn layer_stats_csv(codes: &[Vec<i32>], structure: &GroupStructure) -> Result<String> {
    let mut s = String::from("layer,element_sparsity,zero_groupset_ratio,zero_rows\n");
    for (i, (w, l)) in codes.iter().zip(&structure.layers).enumerate() {
        let one = GroupStructure { layers: vec![l.clone()] };
        let st = sparsity_stats(std::slice::from_ref(w), &one)?;
        writeln!(s, "{i},{:.6},{:.6},{:.6}", st.element_sparsity, st.zero_groupset_ratio, st.zero_rows)?;
    }
    let st = sparsity_stats(codes, structure)?;
    writeln!(s, "total,{:.6},{:.6},{:.6}", st.element_sparsity, st.zero_groupset_ratio, st.zero_rows)?;
    Ok(s)
}

fn prune(ctx: &Ctx, a: &PruneArgs) -> Result<()> {
    let mut qm = formats::read_model(&read(&a.model)?).with_context(|| format!("in {}", a.model.display()))?;
    let sp = match &a.net {
        Some(p) => load_descriptor(p)?.sparsity,
        None => SparsityConfig::default(),
    };
    let defs = qm.defs();
    let mut codes: Vec<Vec<i32>> = qm.layers.iter_mut().map(|l| std::mem::take(&mut l.codes)).collect();
    let (alpha, n, mask) = if let Some(path) = &a.mask {
        let mf = formats::read_mask(&read(path)?).with_context(|| format!("in {}", path.display()))?;
        if a.alpha.is_some_and(|v| v != mf.alpha) || a.n.is_some_and(|v| v != mf.n) {
            bail!(MarsError::Config("--alpha/--n disagree with the mask file".into()));
        }
        let structure = GroupStructure::new(&shapes_of(&defs), mf.alpha, mf.n)?;
        apply_mask(&mut codes, &structure, &mf.mask)?;
        (mf.alpha, mf.n, mf.mask)
    } else {
        let (alpha, n) = (a.alpha.unwrap_or(sp.alpha), a.n.unwrap_or(sp.n));
        let structure = GroupStructure::new(&shapes_of(&defs), alpha, n)?;
        let mask = match (a.target, a.element_budget) {
            (_, Some(b)) => prune_to_element_budget(&mut codes, &structure, b)?,
            (t, None) => prune_to_target(&mut codes, &structure, t.unwrap_or(sp.target_zero_ratio))?,
        };
        (alpha, n, mask)
    };
    let structure = GroupStructure::new(&shapes_of(&defs), alpha, n)?;
    let csv = layer_stats_csv(&codes, &structure)?;
    let st = sparsity_stats(&codes, &structure)?;
    println!(
        "element sparsity {:.4}, zero group-set ratio {:.4} ({} of {} sets pruned)",
        st.element_sparsity,
        st.zero_groupset_ratio,
        mask.pruned_count(),
        structure.set_count()
    );
    for (l, c) in qm.layers.iter_mut().zip(codes) {
        l.codes = c;
    }
    ctx.write("pruned.mrsq", formats::write_model(&qm)?)?;
    ctx.write("mask.mrsm", formats::write_mask(&MaskFile { alpha, n, mask })?)?;
    ctx.write("sparsity.csv", csv)?;
    Ok(())
}

fn shape_label(l: &MappedLayer) -> String {
    let s = mapping_spec(&l.def);
    format!("{}x{}x{}x{}", s.kernel_h, s.kernel_w, s.in_ch, s.out_ch)
}

/// Storage of one mapped layer; a dense mapping stores no index.
fn layer_storage(l: &MappedLayer) -> StorageReport {
    let mut r = storage_of(&l.sets, l.b_w);
    if l.dense {
        r.index_bits = 0.0;
        r.compression_rate = r.original_bits / r.weight_bits;
    }
    r
}

/// Per-layer storage table in the column order of the published one.
pub fn storage_csv(net: &MappedNetwork) -> (String, Vec<usize>) {
    let mut s = String::from("layer,shape,original_mb,zero_groupset_ratio,index_kb,weight_kb,compression_rate\n");
    let mut expanding = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        let r = layer_storage(l);
        if r.compression_rate < 1.0 {
            expanding.push(i);
        }
        writeln!(
            s,
            "{i},{},{:.4},{:.6},{:.4},{:.4},{:.4}",
            shape_label(l),
            r.original_mb(),
            l.sets.zero_groupset_ratio(),
            r.index_kb(),
            r.weight_kb(),
            r.compression_rate
        )
        .unwrap();
    }
    (s, expanding)
}

pub fn map_model(qm: &QuantizedModel, cores: usize, dense: bool) -> mars_core::Result<MappedNetwork> {
    let layers = qm
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if dense {
                MappedLayer::dense(l, cores)
            } else {
                MappedLayer::new(l, cores)
            }
            .map_err(at_layer(i))
        })
        .collect::<mars_core::Result<_>>()?;
    Ok(MappedNetwork {
        input_dims: qm.input_dims,
        b_w: qm.b_w,
        b_a: qm.b_a,
        layers,
    })
}

fn map(ctx: &Ctx, a: &MapArgs) -> Result<()> {
    let qm = formats::read_model(&read(&a.model)?).with_context(|| format!("in {}", a.model.display()))?;
    let net = map_model(&qm, ctx.sim.cores, a.dense)?;
    let (csv, expanding) = storage_csv(&net);
    for i in expanding {
        eprintln!("warning: layer {i} is larger with index codes than without (compression rate < 1)");
    }
    ctx.write(
        "image.mrsi",
        formats::write_image(&Image {
            cores: ctx.sim.cores,
            net,
        })?,
    )?;
    ctx.write("storage.csv", csv)?;
    Ok(())
}

fn simulate_cmd(ctx: &Ctx, a: &SimulateArgs) -> Result<()> {
    let img = formats::read_image(&read(&a.image)?).with_context(|| format!("in {}", a.image.display()))?;
    let (x, bits) = formats::read_activations(&read(&a.input)?).with_context(|| format!("in {}", a.input.display()))?;
    if bits != img.net.b_a {
        bail!(MarsError::Shape(format!("input has {bits}-bit codes, image expects {}", img.net.b_a)));
    }
    let mut cfg = ctx.sim;
    cfg.cores = img.cores;
    if let Some(m) = a.mode {
        cfg.mode = match m {
            Mode::Behavioral => ActivationMode::Behavioral,
            Mode::BitSerial => ActivationMode::BitSerial,
        };
    }
    let (out, rep) = simulate(&img.net, &x, &cfg, a.baseline)?;
    ctx.write("output.mrsa", formats::write_activations(&out, img.net.b_a)?)?;
    ctx.write("report.json", serde_json::to_string_pretty(&rep)? + "\n")?;
    ctx.write("report.csv", rep.to_csv())?;
    if a.trace {
        let bytes: Vec<u8> = shunter_trace(&rep).map(|g| g.to_byte()).collect();
        let check = verify_trace(shunter_trace(&rep));
        ctx.write("trace.bin", bytes)?;
        println!(
            "trace: {} system cycles, {} violations",
            check.system_cycles,
            check.violations()
        );
    }
    let t = &rep.total;
    print!("core cycles {}, macro accesses {}", t.counters.core_cycles, t.counters.macro_accesses);
    if let Some(s) = t.speedup_vs_dense {
        print!(", speedup vs dense {s:.3}");
    }
    println!();
    Ok(())
}

fn reference(ctx: &Ctx, a: &ReferenceArgs) -> Result<()> {
    let qm = formats::read_model(&read(&a.model)?).with_context(|| format!("in {}", a.model.display()))?;
    if let Some(p) = &a.net {
        let desc = load_descriptor(p)?;
        if desc.input != qm.input_dims || desc.defs()? != qm.defs() {
            bail!(MarsError::Shape("model topology differs from the descriptor".into()));
        }
    }
    let (x, bits) = formats::read_activations(&read(&a.input)?).with_context(|| format!("in {}", a.input.display()))?;
    if bits != qm.b_a {
        bail!(MarsError::Shape(format!("input has {bits}-bit codes, model expects {}", qm.b_a)));
    }
    let out = forward_quantized(&qm, &x)?;
    ctx.write("reference.mrsa", formats::write_activations(&out, qm.b_a)?)?;
    Ok(())
}
