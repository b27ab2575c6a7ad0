//! Little-endian binary artifacts: float weights (MRSW), quantized models
//! (MRSQ), pruning masks (MRSM), mapped images (MRSI) and activation
//! tensors (MRSA).

use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use mars_core::cim_macro::{WeightGroup, GROUP_LEN};
use mars_core::mapper::{decode_index, mapping_spec, GroupSet, LayerGroupSets, MapGeometry, ReloadEntry, KERNELS_PER_SLAB};
use mars_core::model::{infer_dims, Layer, LayerDef, LayerKind, NetworkModel, PoolSpec};
use mars_core::prune::Mask;
use mars_core::quant::{weight_code_max, QuantizedLayer, QuantizedModel};
use mars_core::sim::{MappedLayer, MappedNetwork};
use mars_core::tensor::{BnParams, ConvSpec, Tensor};
use mars_core::{MarsError, Result};

pub const VERSION: u16 = 1;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MRSW";
pub const MODEL_MAGIC: &[u8; 4] = b"MRSQ";
pub const MASK_MAGIC: &[u8; 4] = b"MRSM";
pub const IMAGE_MAGIC: &[u8; 4] = b"MRSI";
pub const ACTIVATION_MAGIC: &[u8; 4] = b"MRSA";

fn fmt_err(what: &str) -> impl Fn(std::io::Error) -> MarsError + '_ {
    move |e| MarsError::Format(format!("{what}: {e}"))
}

fn bad(msg: impl Into<String>) -> MarsError {
    MarsError::Format(msg.into())
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<(Self, usize)> {
        let mut r = Reader {
            cur: Cursor::new(bytes),
            what,
        };
        let mut m = [0u8; 4];
        r.cur.read_exact(&mut m).map_err(fmt_err(what))?;
        if &m != magic {
            return Err(bad(format!(
                "{what}: bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(bad(format!("{what}: unsupported version {version}")));
        }
        let count = r.u16()? as usize;
        Ok((r, count))
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(fmt_err(self.what))
    }
    fn u16(&mut self) -> Result<u16> {
        self.cur.read_u16::<LE>().map_err(fmt_err(self.what))
    }
    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(fmt_err(self.what))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn i32(&mut self) -> Result<i32> {
        self.cur.read_i32::<LE>().map_err(fmt_err(self.what))
    }
    fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LE>().map_err(fmt_err(self.what))
    }
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let left = self.cur.get_ref().len() - self.cur.position() as usize;
        if n > left {
            return Err(bad(format!("{}: truncated, need {n} bytes, {left} left", self.what)));
        }
        let mut v = vec![0u8; n];
        self.cur.read_exact(&mut v).map_err(fmt_err(self.what))?;
        Ok(v)
    }
    fn dims3(&mut self) -> Result<[usize; 3]> {
        Ok([self.usize()?, self.usize()?, self.usize()?])
    }
    fn finish(self) -> Result<()> {
        let left = self.cur.get_ref().len() - self.cur.position() as usize;
        if left != 0 {
            return Err(bad(format!("{}: {left} trailing bytes", self.what)));
        }
        Ok(())
    }

    fn def(&mut self) -> Result<LayerDef> {
        let kind = match self.u8()? {
            0 => LayerKind::Conv,
            1 => LayerKind::Fc,
            k => return Err(bad(format!("{}: unknown layer kind {k}", self.what))),
        };
        let spec = ConvSpec {
            kernel_h: self.usize()?,
            kernel_w: self.usize()?,
            in_ch: self.usize()?,
            out_ch: self.usize()?,
            stride: self.usize()?,
            pad: self.usize()?,
        };
        let has_bn = self.u8()? != 0;
        let relu = self.u8()? != 0;
        let (window, stride) = (self.usize()?, self.usize()?);
        Ok(LayerDef {
            kind,
            spec,
            has_bn,
            relu,
            pool: (window > 0).then_some(PoolSpec { window, stride }),
        })
    }

    fn bits(&mut self) -> Result<u32> {
        match self.u8()? {
            b @ (4 | 8) => Ok(b as u32),
            b => Err(bad(format!("{}: bit-width {b} not in {{4, 8}}", self.what))),
        }
    }
}

fn header(magic: &[u8; 4], count: usize) -> Result<Vec<u8>> {
    let count = u16::try_from(count).map_err(|_| bad(format!("{count} entries exceed the u16 count field")))?;
    let mut w = magic.to_vec();
    w.write_u16::<LE>(VERSION).unwrap();
    w.write_u16::<LE>(count).unwrap();
    Ok(w)
}

fn put_u32(w: &mut Vec<u8>, v: usize) {
    w.write_u32::<LE>(v as u32).unwrap();
}

fn put_def(w: &mut Vec<u8>, def: &LayerDef) {
    w.push(match def.kind {
        LayerKind::Conv => 0,
        LayerKind::Fc => 1,
    });
    let s = def.spec;
    for v in [s.kernel_h, s.kernel_w, s.in_ch, s.out_ch, s.stride, s.pad] {
        put_u32(w, v);
    }
    w.push(def.has_bn as u8);
    w.push(def.relu as u8);
    let p = def.pool.unwrap_or(PoolSpec { window: 0, stride: 0 });
    put_u32(w, p.window);
    put_u32(w, p.stride);
}

// ---- MRSW -------------------------------------------------------------

fn put_tensor(w: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    w.push(dims.len() as u8);
    for &d in dims {
        put_u32(w, d);
    }
    for &v in data {
        w.write_f32::<LE>(v as f32).unwrap();
    }
}

fn layer_tensor_dims(def: &LayerDef) -> Vec<usize> {
    match def.kind {
        LayerKind::Conv => def.spec.weight_dims(),
        LayerKind::Fc => vec![def.spec.out_ch, def.spec.in_ch],
    }
}

/// Weights, bias, then gamma/beta/mu/sigma2 for batch-normed layers.
pub fn write_weights(model: &NetworkModel) -> Result<Vec<u8>> {
    let count: usize = model.layers.iter().map(|l| if l.def.has_bn { 6 } else { 2 }).sum();
    let mut w = header(WEIGHTS_MAGIC, count)?;
    for l in &model.layers {
        put_tensor(&mut w, &layer_tensor_dims(&l.def), l.weights.data());
        put_tensor(&mut w, &[l.bias.len()], &l.bias);
        if let Some(bn) = &l.bn {
            for v in [&bn.gamma, &bn.beta, &bn.mu, &bn.sigma2] {
                put_tensor(&mut w, &[v.len()], v);
            }
        }
    }
    Ok(w)
}

/// Reads a weight file against a topology; `eps` goes into every BN layer.
pub fn read_weights(bytes: &[u8], input: [usize; 3], defs: &[LayerDef], eps: f64) -> Result<NetworkModel> {
    let (mut r, count) = Reader::new(bytes, WEIGHTS_MAGIC, "weight file")?;
    let expected: usize = defs.iter().map(|d| if d.has_bn { 6 } else { 2 }).sum();
    if count != expected {
        return Err(bad(format!("weight file has {count} tensors, topology needs {expected}")));
    }
    let mut tensor = |want: &[usize]| -> Result<Vec<f64>> {
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if dims != want {
            return Err(MarsError::Shape(format!("weight tensor dims {dims:?}, expected {want:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.bytes(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    };
    let mut layers = Vec::with_capacity(defs.len());
    for def in defs {
        let out = def.spec.out_ch;
        let weights = Tensor::new(def.spec.weight_dims(), tensor(&layer_tensor_dims(def))?)?;
        let bias = tensor(&[out])?;
        let bn = if def.has_bn {
            Some(BnParams {
                gamma: tensor(&[out])?,
                beta: tensor(&[out])?,
                mu: tensor(&[out])?,
                sigma2: tensor(&[out])?,
                eps,
            })
        } else {
            None
        };
        layers.push(Layer {
            def: *def,
            weights,
            bias,
            bn,
        });
    }
    r.finish()?;
    let model = NetworkModel {
        input_dims: input,
        layers,
    };
    model.validate()?;
    Ok(model)
}

// ---- MRSQ -------------------------------------------------------------

fn put_layer_params(w: &mut Vec<u8>, def: &LayerDef, scale: f64, bias: &[i32]) {
    put_def(w, def);
    w.write_f64::<LE>(scale).unwrap();
    for &b in bias {
        w.write_i32::<LE>(b).unwrap();
    }
}

pub fn write_model(model: &QuantizedModel) -> Result<Vec<u8>> {
    let mut w = header(MODEL_MAGIC, model.layers.len())?;
    for d in model.input_dims {
        put_u32(&mut w, d);
    }
    w.push(model.b_w as u8);
    w.push(model.b_a as u8);
    for l in &model.layers {
        put_layer_params(&mut w, &l.def, l.scale, &l.bias_codes);
        w.extend(l.codes.iter().map(|&c| c as i8 as u8));
    }
    Ok(w)
}

fn check_codes(codes: &[i32], b_w: u32, what: &str) -> Result<()> {
    let max = weight_code_max(b_w);
    match codes.iter().find(|c| c.abs() > max) {
        Some(c) => Err(bad(format!("{what}: weight code {c} outside [-{max}, {max}]"))),
        None => Ok(()),
    }
}

pub fn read_model(bytes: &[u8]) -> Result<QuantizedModel> {
    let (mut r, count) = Reader::new(bytes, MODEL_MAGIC, "model file")?;
    let input_dims = r.dims3()?;
    let b_w = r.bits()?;
    let b_a = r.bits()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let def = r.def()?;
        let scale = r.f64()?;
        let bias_codes = (0..def.spec.out_ch).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
        let codes: Vec<i32> = r.bytes(def.spec.weight_count())?.into_iter().map(|b| b as i8 as i32).collect();
        check_codes(&codes, b_w, "model file")?;
        layers.push(QuantizedLayer {
            def,
            codes,
            bias_codes,
            scale,
            b_w,
        });
    }
    r.finish()?;
    let defs: Vec<LayerDef> = layers.iter().map(|l| l.def).collect();
    infer_dims(input_dims, &defs)?;
    Ok(QuantizedModel {
        input_dims,
        b_w,
        b_a,
        layers,
    })
}

// ---- MRSM -------------------------------------------------------------

/// A mask plus the group granularity it was made at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskFile {
    pub alpha: usize,
    pub n: usize,
    pub mask: Mask,
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// One bit per group-set, set when kept, LSB first.
pub fn write_mask(m: &MaskFile) -> Result<Vec<u8>> {
    let mut w = header(MASK_MAGIC, m.mask.layers.len())?;
    put_u32(&mut w, m.alpha);
    put_u32(&mut w, m.n);
    for layer in &m.mask.layers {
        put_u32(&mut w, layer.len());
        w.extend(pack_bits(layer));
    }
    Ok(w)
}

pub fn read_mask(bytes: &[u8]) -> Result<MaskFile> {
    let (mut r, count) = Reader::new(bytes, MASK_MAGIC, "mask file")?;
    let alpha = r.usize()?;
    let n = r.usize()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let sets = r.usize()?;
        let packed = r.bytes(sets.div_ceil(8))?;
        layers.push((0..sets).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect());
    }
    r.finish()?;
    Ok(MaskFile {
        alpha,
        n,
        mask: Mask { layers },
    })
}

// ---- MRSI -------------------------------------------------------------

fn pack_codes(codes: impl Iterator<Item = i32>, b_w: u32) -> Vec<u8> {
    let mut out = Vec::new();
    let (mut acc, mut nbits) = (0u32, 0u32);
    let mask = (1u32 << b_w) - 1;
    for c in codes {
        acc |= (c as u32 & mask) << nbits;
        nbits += b_w;
        while nbits >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            nbits -= 8;
        }
    }
    if nbits > 0 {
        out.push(acc as u8);
    }
    out
}

fn unpack_codes(bytes: &[u8], n: usize, b_w: u32) -> Vec<i32> {
    let shift = 32 - b_w;
    (0..n)
        .map(|i| {
            let bit = i * b_w as usize;
            let word = bytes[bit / 8] as u32 | bytes.get(bit / 8 + 1).map_or(0, |&b| (b as u32) << 8);
            let raw = (word >> (bit % 8)) & ((1 << b_w) - 1);
            ((raw << shift) as i32) >> shift
        })
        .collect()
}

/// Mapped network plus the core count it was mapped for.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub cores: usize,
    pub net: MappedNetwork,
}

const SET_WEIGHTS: usize = KERNELS_PER_SLAB * GROUP_LEN;

pub fn write_image(img: &Image) -> Result<Vec<u8>> {
    let net = &img.net;
    let mut w = header(IMAGE_MAGIC, net.layers.len())?;
    for d in net.input_dims {
        put_u32(&mut w, d);
    }
    w.push(net.b_w as u8);
    w.push(net.b_a as u8);
    w.push(img.cores as u8);
    for l in &net.layers {
        put_layer_params(&mut w, &l.def, l.scale, &l.bias_codes);
        w.push(l.dense as u8);
        put_u32(&mut w, l.sets.slab_counts.len());
        for &c in &l.sets.slab_counts {
            put_u32(&mut w, c);
        }
        let schedule = l.mapping.schedule();
        put_u32(&mut w, schedule.len());
        for e in schedule {
            w.push(e.core as u8);
            w.write_u16::<LE>(e.batch as u16).unwrap();
            w.write_u16::<LE>(e.groupsets as u16).unwrap();
        }
        put_u32(&mut w, l.sets.stored());
        for &word in &l.sets.index {
            w.write_u16::<LE>(word).unwrap();
        }
        w.extend(pack_codes(
            l.sets.sets.iter().flat_map(|s| s.groups.iter().flat_map(|g| g.0)),
            l.b_w,
        ));
    }
    Ok(w)
}

fn group_set(slab: usize, spatial: u8, chunk: u8, first: bool, codes: &[i32]) -> GroupSet {
    GroupSet {
        slab,
        spatial,
        chunk,
        is_first_of_kernel: first,
        groups: std::array::from_fn(|k| WeightGroup(std::array::from_fn(|i| codes[k * GROUP_LEN + i]))),
    }
}

/// Positions of the stored group-sets, checked against the index contract.
fn sparse_positions(geom: &MapGeometry, slab_counts: &[usize], index: &[u16]) -> Result<Vec<(usize, u8, u8, bool)>> {
    let mut out = Vec::with_capacity(index.len());
    let mut words = index.iter();
    for (slab, &count) in slab_counts.iter().enumerate() {
        let mut prev: Option<(u8, u8)> = None;
        for j in 0..count {
            let f = decode_index(*words.next().ok_or_else(|| bad("image: index list too short"))?)?;
            let (kr, kc) = MapGeometry::tap(f.spatial);
            if f.first != (j == 0) || f.count as usize != count {
                return Err(bad(format!("image: slab {slab} code {j} has inconsistent first/count fields")));
            }
            if kr >= geom.kernel_h || kc >= geom.kernel_w || f.chunk as usize >= geom.chunks() {
                return Err(bad(format!("image: slab {slab} code {j} points outside the kernel")));
            }
            if prev.is_some_and(|p| p >= (f.spatial, f.chunk)) {
                return Err(bad(format!("image: slab {slab} codes are not in canonical order")));
            }
            prev = Some((f.spatial, f.chunk));
            out.push((slab, f.spatial, f.chunk, j == 0));
        }
    }
    Ok(out)
}

fn dense_positions(geom: &MapGeometry) -> Vec<(usize, u8, u8, bool)> {
    let mut out = Vec::with_capacity(geom.total_sets());
    for slab in 0..geom.slabs() {
        for kr in 0..geom.kernel_h {
            for kc in 0..geom.kernel_w {
                for chunk in 0..geom.chunks() {
                    let first = kr == 0 && kc == 0 && chunk == 0;
                    out.push((slab, geom.spatial_code(kr, kc), chunk as u8, first));
                }
            }
        }
    }
    out
}

/// Reads an image, rebuilds its group-sets from the index, re-derives the
/// core placement and checks it against the stored batch table.
pub fn read_image(bytes: &[u8]) -> Result<Image> {
    let (mut r, count) = Reader::new(bytes, IMAGE_MAGIC, "image file")?;
    let input_dims = r.dims3()?;
    let b_w = r.bits()?;
    let b_a = r.bits()?;
    let cores = r.u8()? as usize;
    let mut layers = Vec::with_capacity(count);
    for li in 0..count {
        let def = r.def()?;
        let scale = r.f64()?;
        let bias_codes = (0..def.spec.out_ch).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
        let dense = r.u8()? != 0;
        let geom = MapGeometry::new(&mapping_spec(&def))?;
        let n_slabs = r.usize()?;
        if n_slabs != geom.slabs() {
            return Err(bad(format!("image layer {li}: {n_slabs} slabs, shape has {}", geom.slabs())));
        }
        let slab_counts = (0..n_slabs).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n_batches = r.usize()?;
        let mut table = Vec::with_capacity(n_batches);
        for _ in 0..n_batches {
            table.push(ReloadEntry {
                core: r.u8()? as usize,
                batch: r.u16()? as usize,
                groupsets: r.u16()? as usize,
            });
        }
        let stored = r.usize()?;
        if stored != slab_counts.iter().sum::<usize>() {
            return Err(bad(format!("image layer {li}: stored count disagrees with slab counts")));
        }
        let index = if dense {
            Vec::new()
        } else {
            (0..stored).map(|_| r.u16()).collect::<Result<Vec<_>>>()?
        };
        let positions = if dense {
            if slab_counts.iter().any(|&c| c != geom.sets_per_slab()) {
                return Err(bad(format!("image layer {li}: dense layer with partial slabs")));
            }
            dense_positions(&geom)
        } else {
            sparse_positions(&geom, &slab_counts, &index).map_err(mars_core::error::at_layer(li))?
        };
        let packed = r.bytes((stored * SET_WEIGHTS * b_w as usize).div_ceil(8))?;
        let codes = unpack_codes(&packed, stored * SET_WEIGHTS, b_w);
        check_codes(&codes, b_w, "image file")?;
        let sets = positions
            .iter()
            .zip(codes.chunks_exact(SET_WEIGHTS))
            .map(|(&(slab, sp, ch, first), c)| group_set(slab, sp, ch, first, c))
            .collect();
        let stub = QuantizedLayer {
            def,
            codes: Vec::new(),
            bias_codes,
            scale,
            b_w,
        };
        let sets = LayerGroupSets {
            geometry: geom,
            slab_counts,
            sets,
            index,
        };
        let layer = MappedLayer::from_sets(&stub, sets, cores, dense).map_err(mars_core::error::at_layer(li))?;
        if layer.mapping.schedule() != table {
            return Err(bad(format!("image layer {li}: batch table disagrees with the slab placement")));
        }
        layers.push(layer);
    }
    r.finish()?;
    let defs: Vec<LayerDef> = layers.iter().map(|l| l.def).collect();
    infer_dims(input_dims, &defs)?;
    Ok(Image {
        cores,
        net: MappedNetwork {
            input_dims,
            b_w,
            b_a,
            layers,
        },
    })
}

// ---- MRSA -------------------------------------------------------------

/// Activation codes, one byte each.
pub fn write_activations(t: &Tensor<i64>, bits: u32) -> Result<Vec<u8>> {
    let max = (1i64 << bits) - 1;
    if bits == 0 || bits > 8 || t.data().iter().any(|&v| !(0..=max).contains(&v)) {
        return Err(bad(format!("activation codes do not fit {bits} bits")));
    }
    let mut w = header(ACTIVATION_MAGIC, 1)?;
    w.push(bits as u8);
    w.push(t.dims().len() as u8);
    for &d in t.dims() {
        put_u32(&mut w, d);
    }
    w.extend(t.data().iter().map(|&v| v as u8));
    Ok(w)
}

pub fn read_activations(bytes: &[u8]) -> Result<(Tensor<i64>, u32)> {
    let (mut r, count) = Reader::new(bytes, ACTIVATION_MAGIC, "activation file")?;
    if count != 1 {
        return Err(bad(format!("activation file holds {count} tensors, expected 1")));
    }
    let bits = r.u8()? as u32;
    if bits == 0 || bits > 8 {
        return Err(bad(format!("activation file: bit-width {bits}")));
    }
    let rank = r.u8()? as usize;
    let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let data: Vec<i64> = r.bytes(n)?.into_iter().map(|b| b as i64).collect();
    r.finish()?;
    if data.iter().any(|&v| v >= 1 << bits) {
        return Err(bad(format!("activation file: code exceeds {bits} bits")));
    }
    Ok((Tensor::new(dims, data)?, bits))
}
