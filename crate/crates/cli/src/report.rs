//! `mars report`: plot-ready data tables.

use std::fmt::Write as _;

use anyhow::Result;
use mars_core::mapper::{compression_report, StorageReport};
use mars_core::model::LayerDef;
use mars_core::sim::{map_network, simulate};
use mars_core::synth::{layer_sweep, pruned_vgg16, random_input};
use mars_core::tensor::ConvSpec;
use mars_core::MarsError;
use serde::Serialize;

use crate::commands::Ctx;
use crate::{ReportArgs, ReportKind};

/// One published storage row for an 8-bit VGG16 layer on CIFAR-10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedRow {
    /// `[kh, kw, in, out]`.
    pub shape: [usize; 4],
    pub original_mb: f64,
    pub zero_groupset_ratio: f64,
    pub index_kb: f64,
    pub weight_kb: f64,
    pub compression_rate: f64,
}

const fn row(shape: [usize; 4], original_mb: f64, ratio: f64, index_kb: f64, weight_kb: f64, rate: f64) -> PublishedRow {
    PublishedRow {
        shape,
        original_mb,
        zero_groupset_ratio: ratio,
        index_kb,
        weight_kb,
        compression_rate: rate,
    }
}

pub const PUBLISHED_STORAGE: [PublishedRow; 7] = [
    row([3, 3, 64, 64], 0.28, 0.05, 2.14, 273.60, 1.04),
    row([3, 3, 64, 128], 0.56, 0.50, 2.25, 288.00, 1.98),
    row([3, 3, 128, 128], 1.13, 0.566, 3.91, 488.97, 2.29),
    row([3, 3, 128, 256], 2.25, 0.616, 6.91, 884.74, 2.58),
    row([3, 3, 256, 256], 4.50, 0.932, 2.46, 313.34, 14.59),
    row([3, 3, 256, 512], 9.00, 0.978, 1.58, 202.75, 45.10),
    row([3, 3, 512, 512], 18.00, 0.987, 1.87, 239.62, 73.33),
];

pub fn published_storage(r: &PublishedRow) -> mars_core::Result<StorageReport> {
    let [k, _, i, o] = r.shape;
    compression_report(&ConvSpec::square(k, i, o, 1, 1), 8, r.zero_groupset_ratio)
}

/// Computed next to published storage, with relative deviations.
pub fn table4_csv() -> mars_core::Result<String> {
    let mut s = String::from(
        "shape,zero_groupset_ratio,original_mb,index_kb,weight_kb,compression_rate,\
         published_index_kb,published_weight_kb,published_compression_rate,index_dev,weight_dev,rate_dev\n",
    );
    for r in &PUBLISHED_STORAGE {
        let c = published_storage(r)?;
        let dev = |a: f64, b: f64| (a - b) / b;
        let [kh, kw, i, o] = r.shape;
        writeln!(
            s,
            "{kh}x{kw}x{i}x{o},{},{:.4},{:.4},{:.4},{:.4},{},{},{},{:.5},{:.5},{:.5}",
            r.zero_groupset_ratio,
            c.original_mb(),
            c.index_kb(),
            c.weight_kb(),
            c.compression_rate,
            r.index_kb,
            r.weight_kb,
            r.compression_rate,
            dev(c.index_kb(), r.index_kb),
            dev(c.weight_kb(), r.weight_kb),
            dev(c.compression_rate, r.compression_rate),
        )
        .unwrap();
    }
    Ok(s)
}

pub fn run(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    match a.kind {
        ReportKind::Table4 => {
            ctx.write("table4.csv", table4_csv()?)?;
        }
        ReportKind::Vgg16 => {
            let mut rng = ctx.rng();
            let q = pruned_vgg16(&mut rng)?;
            let net = map_network(&q, ctx.sim.cores)?;
            let x = random_input(&mut rng, q.input_dims, q.b_a);
            let (_, rep) = simulate(&net, &x, &ctx.sim, true)?;
            ctx.write("vgg16.json", serde_json::to_string_pretty(&rep)? + "\n")?;
            ctx.write("vgg16.csv", rep.to_csv())?;
            println!("speedup vs dense {:.3}", rep.total.speedup_vs_dense.unwrap_or(f64::NAN));
        }
        ReportKind::Sweep => {
            let [kh, kw, i, o] = <[usize; 4]>::try_from(a.shape.as_slice())
                .map_err(|_| MarsError::Config("--shape takes KH,KW,IN,OUT".into()))?;
            let def = LayerDef::conv(ConvSpec {
                kernel_h: kh,
                kernel_w: kw,
                in_ch: i,
                out_ch: o,
                stride: 1,
                pad: kh / 2,
            });
            let pts = layer_sweep(&mut ctx.rng(), &def, [i, a.size, a.size], &a.ratios, &ctx.sim)?;
            let mut s = String::from(
                "zero_groupset_ratio,core_cycles,dense_core_cycles,speedup,macro_access_ratio,fm_access_reduction\n",
            );
            for p in &pts {
                writeln!(
                    s,
                    "{:.6},{},{},{:.6},{:.6},{:.6}",
                    p.zero_groupset_ratio, p.core_cycles, p.dense_core_cycles, p.speedup, p.macro_access_ratio, p.fm_access_reduction
                )?;
            }
            ctx.write("sweep.csv", s)?;
            ctx.write("sweep.json", serde_json::to_string_pretty(&pts)? + "\n")?;
        }
    }
    Ok(())
}
