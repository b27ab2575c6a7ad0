//! CIM-aware structured sparsity: group-set structure over conv weights,
//! the group-lasso penalty and its subgradient, and magnitude pruning at
//! group-set granularity.
//!
//! A group-set collects, for one slab of `n` consecutive kernels, the `alpha`
//! consecutive input channels of one channel chunk at one spatial tap. With
//! `alpha = n = 16` it is exactly the unit the macros store and skip.

use serde::{Deserialize, Serialize};

use crate::error::{MarsError, Result};
use crate::model::LayerDef;

/// Group-set width and height of the hardware.
pub const HW_GROUP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsityConfig {
    /// Weights per group along the input-channel axis.
    pub alpha: usize,
    /// Kernels per jointly pruned group-set.
    pub n: usize,
    /// Weight of the plain L2 term.
    pub lambda: f64,
    /// Weight of the group-lasso term.
    pub lambda_g: f64,
    pub target_zero_ratio: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        SparsityConfig {
            alpha: HW_GROUP,
            n: HW_GROUP,
            lambda: 0.0,
            lambda_g: 0.0,
            target_zero_ratio: 0.0,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 || self.n == 0 {
            return Err(MarsError::Config("alpha and n must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda_g >= 0.0) {
            return Err(MarsError::Config("regularization weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.target_zero_ratio) {
            return Err(MarsError::Config("target zero ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Identifies one group-set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupSetId {
    pub layer: usize,
    pub slab: usize,
    pub spatial: usize,
    pub chunk: usize,
}

/// Group-set partition of one layer's `[out_ch, in_ch, kh, kw]` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroups {
    pub shape: [usize; 4],
    pub alpha: usize,
    pub n: usize,
    pub slabs: usize,
    pub chunks: usize,
}

impl LayerGroups {
    fn new(shape: [usize; 4], alpha: usize, n: usize) -> Self {
        LayerGroups {
            shape,
            alpha,
            n,
            slabs: shape[0].div_ceil(n),
            chunks: shape[1].div_ceil(alpha),
        }
    }

    pub fn taps(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sets_per_slab(&self) -> usize {
        self.taps() * self.chunks
    }

    pub fn set_count(&self) -> usize {
        self.slabs * self.sets_per_slab()
    }

    pub fn weight_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// `(slab, spatial, chunk)` of the `i`-th set in canonical order.
    pub fn position(&self, i: usize) -> (usize, usize, usize) {
        let per_slab = self.sets_per_slab();
        let slab = i / per_slab;
        let rem = i % per_slab;
        (slab, rem / self.chunks, rem % self.chunks)
    }

    pub fn set_index(&self, slab: usize, spatial: usize, chunk: usize) -> usize {
        (slab * self.taps() + spatial) * self.chunks + chunk
    }

    /// Flat weight indices belonging to set `i`.
    pub fn indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (slab, spatial, chunk) = self.position(i);
        let [o, c, kh, kw] = self.shape;
        let (kr, kc) = (spatial / kw, spatial % kw);
        let k_range = slab * self.n..((slab + 1) * self.n).min(o);
        let c_range = chunk * self.alpha..((chunk + 1) * self.alpha).min(c);
        k_range.flat_map(move |k| {
            c_range
                .clone()
                .map(move |ci| ((k * c + ci) * kh + kr) * kw + kc)
        })
    }

    /// Set index owning flat weight index `idx`.
    pub fn set_of(&self, idx: usize) -> usize {
        let [_, c, kh, kw] = self.shape;
        let kc = idx % kw;
        let kr = (idx / kw) % kh;
        let ci = (idx / (kw * kh)) % c;
        let k = idx / (kw * kh * c);
        self.set_index(k / self.n, kr * kw + kc, ci / self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStructure {
    pub layers: Vec<LayerGroups>,
}

impl GroupStructure {
    /// Strict structure: each of `in_ch`/`out_ch` must be a multiple of
    /// `alpha`/`n`, or smaller than it (a single zero-padded group).
    pub fn new(shapes: &[[usize; 4]], alpha: usize, n: usize) -> Result<Self> {
        if alpha == 0 || n == 0 {
            return Err(MarsError::Config("alpha and n must be >= 1".into()));
        }
        for (i, s) in shapes.iter().enumerate() {
            let ok = |dim: usize, g: usize| dim < g || dim.is_multiple_of(g);
            if !ok(s[0], n) || !ok(s[1], alpha) {
                return Err(MarsError::Config(format!(
                    "layer {i}: shape {}x{}x{}x{} not divisible into groups of alpha={alpha}, n={n}",
                    s[2], s[3], s[1], s[0]
                )));
            }
        }
        Ok(Self::lenient(shapes, alpha, n))
    }

    /// Structure allowing a partial last group on either axis.
    pub fn lenient(shapes: &[[usize; 4]], alpha: usize, n: usize) -> Self {
        GroupStructure {
            layers: shapes.iter().map(|&s| LayerGroups::new(s, alpha, n)).collect(),
        }
    }

    pub fn for_layers(defs: &[LayerDef], alpha: usize, n: usize) -> Result<Self> {
        Self::new(&shapes_of(defs), alpha, n)
    }

    /// The 16x16 group-sets the macros skip.
    pub fn hardware(shapes: &[[usize; 4]]) -> Self {
        Self::lenient(shapes, HW_GROUP, HW_GROUP)
    }

    pub fn set_count(&self) -> usize {
        self.layers.iter().map(|l| l.set_count()).sum()
    }

    fn check<T>(&self, weights: &[impl AsRef<[T]>]) -> Result<()> {
        if weights.len() != self.layers.len() {
            return Err(MarsError::Shape(format!(
                "structure has {} layers, model has {}",
                self.layers.len(),
                weights.len()
            )));
        }
        for (i, (w, l)) in weights.iter().zip(&self.layers).enumerate() {
            if w.as_ref().len() != l.weight_count() {
                return Err(MarsError::Shape(format!("layer {i}: weight count mismatch")));
            }
        }
        Ok(())
    }
}

pub fn shapes_of(defs: &[LayerDef]) -> Vec<[usize; 4]> {
    defs.iter()
        .map(|d| [d.spec.out_ch, d.spec.in_ch, d.spec.kernel_h, d.spec.kernel_w])
        .collect()
}

/// Keep/prune flags per group-set, layer by layer, in canonical set order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub layers: Vec<Vec<bool>>,
}

impl Mask {
    pub fn all_kept(structure: &GroupStructure) -> Self {
        Mask {
            layers: structure.layers.iter().map(|l| vec![true; l.set_count()]).collect(),
        }
    }

    pub fn pruned_count(&self) -> usize {
        self.layers.iter().flatten().filter(|&&k| !k).count()
    }
}

fn group_norm<T: Copy + Into<f64>>(w: &[T], layer: &LayerGroups, set: usize) -> f64 {
    layer
        .indices(set)
        .map(|i| {
            let v: f64 = w[i].into();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// `sum over layers and group-sets of ||w_g||_2`.
pub fn group_lasso_penalty<W: AsRef<[f64]>>(weights: &[W], structure: &GroupStructure) -> Result<f64> {
    structure.check(weights)?;
    Ok(weights
        .iter()
        .zip(&structure.layers)
        .map(|(w, l)| (0..l.set_count()).map(|s| group_norm(w.as_ref(), l, s)).sum::<f64>())
        .sum())
}

/// `w / ||w||_2`, or zeros for an all-zero group.
pub fn group_lasso_subgrad(group: &[f64]) -> Vec<f64> {
    let norm = group.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; group.len()]
    } else {
        group.iter().map(|v| v / norm).collect()
    }
}

/// Gradient of the group-lasso sum with respect to every weight of a layer.
pub fn group_lasso_layer_grad(w: &[f64], layer: &LayerGroups) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    for s in 0..layer.set_count() {
        let idx: Vec<usize> = layer.indices(s).collect();
        let vals: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
        for (i, d) in idx.into_iter().zip(group_lasso_subgrad(&vals)) {
            g[i] = d;
        }
    }
    g
}

/// All group-sets ordered by ascending L2 norm; ties keep canonical
/// (layer, slab, spatial, chunk) order.
fn sets_by_norm<T: Copy + Into<f64>>(weights: &[impl AsRef<[T]>], structure: &GroupStructure) -> Vec<(f64, usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = weights
        .iter()
        .zip(&structure.layers)
        .enumerate()
        .flat_map(|(li, (w, l))| (0..l.set_count()).map(move |s| (group_norm(w.as_ref(), l, s), li, s)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all
}

fn zero_set<T: Copy + Default>(w: &mut [T], layer: &LayerGroups, set: usize) {
    for i in layer.indices(set) {
        w[i] = T::default();
    }
}

/// Zeroes whole group-sets, smallest norm first, until the fraction of
/// pruned sets first reaches `target`.
pub fn prune_to_target<T>(weights: &mut [Vec<T>], structure: &GroupStructure, target: f64) -> Result<Mask>
where
    T: Copy + Default + Into<f64>,
{
    if !(0.0..=1.0).contains(&target) {
        return Err(MarsError::Config(format!("target {target} outside [0, 1]")));
    }
    structure.check(weights)?;
    let total = structure.set_count();
    let k = ((target * total as f64) - 1e-9).ceil().max(0.0) as usize;
    let order = sets_by_norm(weights, structure);
    let mut mask = Mask::all_kept(structure);
    for &(_, li, s) in order.iter().take(k.min(total)) {
        zero_set(&mut weights[li], &structure.layers[li], s);
        mask.layers[li][s] = false;
    }
    Ok(mask)
}

/// Zeroes whole group-sets, smallest norm first, as long as the element
/// sparsity of the whole model stays within `max_element_sparsity`.
pub fn prune_to_element_budget<T>(weights: &mut [Vec<T>], structure: &GroupStructure, max_element_sparsity: f64) -> Result<Mask>
where
    T: Copy + Default + Into<f64>,
{
    if !(0.0..=1.0).contains(&max_element_sparsity) {
        return Err(MarsError::Config(format!("budget {max_element_sparsity} outside [0, 1]")));
    }
    structure.check(weights)?;
    let total: usize = weights.iter().map(|w| w.len()).sum();
    let budget = (max_element_sparsity * total as f64 + 1e-9).floor() as usize;
    let mut zeros: usize = weights
        .iter()
        .flat_map(|w| w.iter())
        .filter(|&&v| Into::<f64>::into(v) == 0.0)
        .count();
    let order = sets_by_norm(weights, structure);
    let mut mask = Mask::all_kept(structure);
    for (_, li, s) in order {
        let layer = &structure.layers[li];
        let extra = layer
            .indices(s)
            .filter(|&i| Into::<f64>::into(weights[li][i]) != 0.0)
            .count();
        if zeros + extra > budget {
            break;
        }
        zeros += extra;
        zero_set(&mut weights[li], layer, s);
        mask.layers[li][s] = false;
    }
    Ok(mask)
}

/// Zeroes every group-set the mask marks as pruned.
pub fn apply_mask<T: Copy + Default>(weights: &mut [Vec<T>], structure: &GroupStructure, mask: &Mask) -> Result<()> {
    if mask.layers.len() != structure.layers.len()
        || mask.layers.iter().zip(&structure.layers).any(|(m, l)| m.len() != l.set_count())
    {
        return Err(MarsError::Shape("mask does not match group structure".into()));
    }
    for ((w, l), m) in weights.iter_mut().zip(&structure.layers).zip(&mask.layers) {
        for (s, &keep) in m.iter().enumerate() {
            if !keep {
                zero_set(w, l, s);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    /// Zero weights over all weights.
    pub element_sparsity: f64,
    /// All-zero group-sets over all group-sets, at the configured granularity.
    pub zero_groupset_ratio: f64,
    /// All-zero 16x16 hardware group-sets over all of them.
    pub zero_rows: f64,
}

fn zero_set_ratio<T: Copy + Into<f64>>(weights: &[impl AsRef<[T]>], structure: &GroupStructure) -> f64 {
    let total = structure.set_count();
    if total == 0 {
        return 0.0;
    }
    let zero: usize = weights
        .iter()
        .zip(&structure.layers)
        .map(|(w, l)| {
            (0..l.set_count())
                .filter(|&s| l.indices(s).all(|i| Into::<f64>::into(w.as_ref()[i]) == 0.0))
                .count()
        })
        .sum();
    zero as f64 / total as f64
}

pub fn sparsity_stats<T: Copy + Into<f64>>(weights: &[impl AsRef<[T]>], structure: &GroupStructure) -> Result<SparsityStats> {
    structure.check(weights)?;
    let total: usize = weights.iter().map(|w| w.as_ref().len()).sum();
    let zeros = weights
        .iter()
        .flat_map(|w| w.as_ref().iter())
        .filter(|&&v| Into::<f64>::into(v) == 0.0)
        .count();
    let hw = GroupStructure::hardware(&structure.layers.iter().map(|l| l.shape).collect::<Vec<_>>());
    Ok(SparsityStats {
        element_sparsity: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        zero_groupset_ratio: zero_set_ratio(weights, structure),
        zero_rows: zero_set_ratio(weights, &hw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(shape: [usize; 4], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sets_partition_weights() {
        let shape = [32, 48, 3, 3];
        let s = GroupStructure::new(&[shape], 16, 16).unwrap();
        let l = &s.layers[0];
        assert_eq!(l.sets_per_slab(), 9 * 3);
        assert_eq!(l.set_count(), 2 * 27);
        let mut seen = vec![0u8; l.weight_count()];
        for set in 0..l.set_count() {
            let idx: Vec<usize> = l.indices(set).collect();
            assert_eq!(idx.len(), 256);
            for i in idx {
                seen[i] += 1;
                assert_eq!(l.set_of(i), set);
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn strict_structure_rejects_indivisible() {
        assert!(GroupStructure::new(&[[16, 24, 3, 3]], 16, 16).is_err());
        assert!(GroupStructure::new(&[[16, 3, 3, 3]], 16, 16).is_ok());
    }

    #[test]
    fn penalty_examples() {
        let s = GroupStructure::new(&[[1, 2, 1, 1]], 2, 1).unwrap();
        assert_eq!(group_lasso_penalty(&[vec![3.0, 4.0]], &s).unwrap(), 5.0);
        assert_eq!(group_lasso_penalty(&[vec![0.0, 0.0]], &s).unwrap(), 0.0);

        let s = GroupStructure::new(&[[1, 8, 1, 1]], 4, 1).unwrap();
        let w = vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        assert_eq!(group_lasso_penalty(&[w], &s).unwrap(), 3.0);
    }

    #[test]
    fn subgrad_examples() {
        assert_eq!(group_lasso_subgrad(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(group_lasso_subgrad(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn subgrad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = GroupStructure::new(&[[16, 16, 1, 1]], 16, 16).unwrap();
        for _ in 0..20 {
            let w: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = group_lasso_subgrad(&w);
            for _ in 0..5 {
                let i = rng.random_range(0..256);
                let h = 1e-6;
                let mut p = w.clone();
                p[i] += h;
                let mut m = w.clone();
                m[i] -= h;
                let fd = (group_lasso_penalty(&[p], &s).unwrap() - group_lasso_penalty(&[m], &s).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(fd.abs()) + 1e-9);
            }
        }
    }

    #[test]
    fn prune_examples() {
        // four group-sets of one weight each
        let s = GroupStructure::new(&[[1, 4, 1, 1]], 1, 1).unwrap();
        let mut w = vec![vec![0.1, 5.0, -0.2, 7.0]];
        let mask = prune_to_target(&mut w, &s, 0.5).unwrap();
        assert_eq!(w[0], vec![0.0, 5.0, 0.0, 7.0]);
        assert_eq!(mask.layers[0], vec![false, true, false, true]);
        let st = sparsity_stats(&w, &s).unwrap();
        assert_eq!(st.zero_groupset_ratio, 0.5);

        let mut w = vec![random_layer([16, 16, 3, 3], 1)];
        let orig = w.clone();
        let mask = prune_to_target(&mut w, &GroupStructure::new(&[[16, 16, 3, 3]], 16, 16).unwrap(), 0.0).unwrap();
        assert_eq!(w, orig);
        assert_eq!(mask.pruned_count(), 0);

        let s = GroupStructure::new(&[[16, 16, 3, 3]], 16, 16).unwrap();
        prune_to_target(&mut w, &s, 1.0).unwrap();
        assert!(w[0].iter().all(|&v| v == 0.0));
        let st = sparsity_stats(&w, &s).unwrap();
        assert_eq!((st.element_sparsity, st.zero_groupset_ratio, st.zero_rows), (1.0, 1.0, 1.0));
    }

    #[test]
    fn dense_stats_are_zero() {
        let shape = [32, 32, 3, 3];
        let w = vec![random_layer(shape, 9)];
        let st = sparsity_stats(&w, &GroupStructure::new(&[shape], 16, 16).unwrap()).unwrap();
        assert_eq!((st.element_sparsity, st.zero_groupset_ratio, st.zero_rows), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ties_break_in_canonical_order() {
        let s = GroupStructure::new(&[[1, 4, 1, 1]], 1, 1).unwrap();
        let mut w = vec![vec![1.0, 1.0, 1.0, 1.0]];
        let mask = prune_to_target(&mut w, &s, 0.5).unwrap();
        assert_eq!(mask.layers[0], vec![false, false, true, true]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prune_is_whole_set_and_hits_target(seed in 0u64..1000, target in 0.0f64..=1.0) {
            let shapes = [[32, 16, 3, 3], [16, 32, 1, 1]];
            let s = GroupStructure::new(&shapes, 16, 16).unwrap();
            let orig = vec![random_layer(shapes[0], seed), random_layer(shapes[1], seed + 1)];
            let mut w = orig.clone();
            let mask = prune_to_target(&mut w, &s, target).unwrap();
            let again = prune_to_target(&mut orig.clone(), &s, target).unwrap();
            prop_assert_eq!(&mask, &again);
            for (li, l) in s.layers.iter().enumerate() {
                for set in 0..l.set_count() {
                    let zero = l.indices(set).all(|i| w[li][i] == 0.0);
                    let same = l.indices(set).all(|i| w[li][i] == orig[li][i]);
                    prop_assert!(zero || same);
                    prop_assert_eq!(!mask.layers[li][set], zero);
                }
            }
            let ratio = sparsity_stats(&w, &s).unwrap().zero_groupset_ratio;
            prop_assert!(ratio >= target - 1e-12);
            prop_assert!(ratio - target < 1.0 / s.set_count() as f64);
        }

        #[test]
        fn penalty_is_absolutely_homogeneous(seed in 0u64..1000, c in -5.0f64..5.0) {
            let shape = [16, 32, 3, 3];
            let s = GroupStructure::new(&[shape], 16, 16).unwrap();
            let w = random_layer(shape, seed);
            let scaled: Vec<f64> = w.iter().map(|v| c * v).collect();
            let a = group_lasso_penalty(&[scaled], &s).unwrap();
            let b = c.abs() * group_lasso_penalty(&[w], &s).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300));
        }

        #[test]
        fn coarser_n_never_zeroes_more(seed in 0u64..1000, budget in 0.0f64..=1.0) {
            let shape = [64, 32, 3, 3];
            let w = random_layer(shape, seed);
            let mut ratios = Vec::new();
            for n in [16, 32] {
                let s = GroupStructure::new(&[shape], 16, n).unwrap();
                let mut pruned = vec![w.clone()];
                prune_to_element_budget(&mut pruned, &s, budget).unwrap();
                let st = sparsity_stats(&pruned, &s).unwrap();
                prop_assert!(st.element_sparsity <= budget + 1e-12);
                ratios.push((st.zero_groupset_ratio, st.zero_rows));
            }
            prop_assert!(ratios[1].0 <= ratios[0].0 + 1e-12);
            prop_assert!(ratios[1].1 <= ratios[0].1 + 1e-12);
        }
    }
}
