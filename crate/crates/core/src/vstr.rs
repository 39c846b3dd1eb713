//! View-specific texture reformation.
//!
//! Content features are standardized per channel, fused with ω-weighted
//! semantic features, and matched patch-to-patch by cosine similarity. The
//! winning *original* source patches are then scattered over the target grid
//! and averaged where they overlap, so every output value comes from the
//! source feature.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, channel_stats, ConvGeometry, FeatureMap, Kernel4D};

/// Guard for standard deviations and patch norms.
pub const EPS: f64 = 1e-8;

/// Per-channel `(x - mean) / max(std, EPS)`.
pub fn standardize<T: Scalar>(feature: &FeatureMap<T>) -> FeatureMap<T> {
    let eps = T::from_f64_lossy(EPS);
    let mut out = feature.clone();
    for (c, stats) in channel_stats(feature).into_iter().enumerate() {
        let std = stats.std.max(eps);
        out.channel_mut(c).iter_mut().for_each(|v| *v = (*v - stats.mean) / std);
    }
    out
}

/// How semantic guidance is combined with standardized content features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    /// `[content ∥ ω·semantic_feature]`.
    Concat,
    /// `content + ω·semantic_feature` (equal channel counts).
    Add,
    /// `[content ∥ ω·rgb]` with the RGB semantic map resampled to the
    /// feature grid; the baseline the embedding-space variants improve on.
    Downsample,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::Add => "add",
            FusionKind::Downsample => "downsample",
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "add" => Ok(FusionKind::Add),
            "downsample" => Ok(FusionKind::Downsample),
            other => Err(format!("unknown fusion `{other}` (expected concat, add or downsample)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionMode<T> {
    pub kind: FusionKind,
    /// Semantic weight ω ≥ 0.
    pub omega: T,
}

impl<T: Scalar> FusionMode<T> {
    pub fn new(kind: FusionKind, omega: T) -> Self {
        Self { kind, omega }
    }
}

pub fn fuse_semantics<T: Scalar>(
    feature_std: &FeatureMap<T>,
    semantic: &FeatureMap<T>,
    mode: FusionMode<T>,
) -> Result<FeatureMap<T>> {
    let spatial = |a: &FeatureMap<T>, b: &FeatureMap<T>| (a.height(), a.width()) == (b.height(), b.width());
    if !spatial(feature_std, semantic) {
        return Err(Error::shape("fuse_semantics", feature_std.shape_str(), semantic.shape_str()));
    }
    match mode.kind {
        FusionKind::Concat => feature_std.concat_channels(&semantic.scaled(mode.omega)),
        FusionKind::Downsample => {
            if semantic.channels() != 3 {
                return Err(Error::shape("fuse_semantics", "3-channel resampled semantic map", semantic.shape_str()));
            }
            feature_std.concat_channels(&semantic.scaled(mode.omega))
        }
        FusionKind::Add => {
            if !feature_std.same_dims(semantic) {
                return Err(Error::shape("fuse_semantics", feature_std.shape_str(), semantic.shape_str()));
            }
            let mut out = feature_std.clone();
            for (o, &s) in out.data_mut().iter_mut().zip(semantic.data()) {
                *o += mode.omega * s;
            }
            Ok(out)
        }
    }
}

/// Largest patch that fits both fused features: `min(H_s, W_s, H_t, W_t) - 1`.
pub fn global_patch_size<T: Scalar>(fs: &FeatureMap<T>, ft: &FeatureMap<T>) -> Result<usize> {
    let dims = [fs.height(), fs.width(), ft.height(), ft.width()];
    let min = *dims.iter().min().expect("four dims");
    if min < 2 {
        return Err(Error::DegenerateFeature(format!(
            "global patch size needs all dims >= 2, got source {}x{} and target {}x{}",
            dims[0], dims[1], dims[2], dims[3]
        )));
    }
    Ok(min - 1)
}

/// Every `p x p` window of a feature taken on a stride-`s` origin grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBank<T> {
    patch_size: usize,
    stride: usize,
    grid: (usize, usize),
    patches: Kernel4D<T>,
}

impl<T: Scalar> PatchBank<T> {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Origin grid `(rows, cols)`; patch `i` sits at row `i / cols`, column `i % cols`.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn count(&self) -> usize {
        self.patches.out_channels()
    }

    pub fn channels(&self) -> usize {
        self.patches.in_channels()
    }

    /// Patches as a filter bank with one output channel per patch.
    pub fn patches(&self) -> &Kernel4D<T> {
        &self.patches
    }

    /// Top-left corner of patch `i` in feature coordinates.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i / self.grid.1) * self.stride, (i % self.grid.1) * self.stride)
    }
}

pub fn extract_patches<T: Scalar>(feature: &FeatureMap<T>, p: usize, s: usize) -> Result<PatchBank<T>> {
    if p == 0 || s == 0 {
        return Err(Error::invalid("extract_patches", "patch size and stride must be at least 1"));
    }
    let (c, h, w) = feature.dims();
    if p > h || p > w {
        return Err(Error::shape("extract_patches", format!("feature at least {p}x{p}"), feature.shape_str()));
    }
    let grid = ((h - p) / s + 1, (w - p) / s + 1);
    let count = grid.0 * grid.1;
    let mut data = Vec::with_capacity(count * c * p * p);
    for r in 0..grid.0 {
        for col in 0..grid.1 {
            let (y0, x0) = (r * s, col * s);
            for ch in 0..c {
                let plane = feature.channel(ch);
                for y in y0..y0 + p {
                    data.extend_from_slice(&plane[y * w + x0..y * w + x0 + p]);
                }
            }
        }
    }
    Ok(PatchBank {
        patch_size: p,
        stride: s,
        grid,
        patches: Kernel4D::new(count, c, p, p, data, None)?,
    })
}

/// Best source patch per target grid position. Stored as indices; the
/// one-hot form is available through [`MatchMap::to_one_hot`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchMap {
    n_patches: usize,
    rows: usize,
    cols: usize,
    indices: Vec<usize>,
}

impl MatchMap {
    pub fn new(n_patches: usize, rows: usize, cols: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != rows * cols {
            return Err(Error::shape("MatchMap::new", format!("{rows}x{cols} indices"), indices.len()));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= n_patches) {
            return Err(Error::invalid("MatchMap::new", format!("index {bad} out of {n_patches} patches")));
        }
        Ok(Self {
            n_patches,
            rows,
            cols,
            indices,
        })
    }

    /// Reads a one-hot map, rejecting positions that are not exactly one-hot.
    pub fn from_one_hot<T: Scalar>(one_hot: &FeatureMap<T>) -> Result<Self> {
        let (n, rows, cols) = one_hot.dims();
        let plane = rows * cols;
        let mut indices = vec![usize::MAX; plane];
        for c in 0..n {
            for (j, &v) in one_hot.channel(c).iter().enumerate() {
                if v == T::one() && indices[j] == usize::MAX {
                    indices[j] = c;
                } else if v != T::zero() {
                    return Err(Error::invalid("MatchMap::from_one_hot", format!("position {j} is not one-hot")));
                }
            }
        }
        if let Some(j) = indices.iter().position(|&i| i == usize::MAX) {
            return Err(Error::invalid("MatchMap::from_one_hot", format!("position {j} has no selected patch")));
        }
        Self::new(n, rows, cols, indices)
    }

    pub fn to_one_hot<T: Scalar>(&self) -> FeatureMap<T> {
        let mut out = FeatureMap::zeros(self.n_patches, self.rows, self.cols);
        let plane = self.rows * self.cols;
        for (j, &i) in self.indices.iter().enumerate() {
            out.data_mut()[i * plane + j] = T::one();
        }
        out
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Selected patch indices in row-major grid order.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        self.indices[row * self.cols + col]
    }
}

/// Scores every target window against the L2-normalized fused source patches
/// with one strided convolution and keeps the argmax per position.
///
/// Zero-norm patches never win; ties go to the lowest patch index; if every
/// patch has zero norm, patch 0 is selected everywhere.
pub fn sgtw_match<T: Scalar>(fused_source: &PatchBank<T>, fused_target: &FeatureMap<T>) -> Result<MatchMap> {
    let bank = fused_source.patches();
    if fused_target.channels() != bank.in_channels() {
        return Err(Error::shape(
            "sgtw_match",
            format!("target with {} channels", bank.in_channels()),
            fused_target.shape_str(),
        ));
    }
    let p = fused_source.patch_size;
    let geo = ConvGeometry::new(fused_target.dims(), p, p, fused_source.stride)
        .ok_or_else(|| Error::shape("sgtw_match", format!("target at least {p}x{p}"), fused_target.shape_str()))?;

    let n_s = bank.out_channels();
    let k = bank.filter_len();
    let mut filters = vec![T::zero(); n_s * k];
    let mut usable = vec![false; n_s];
    for i in 0..n_s {
        let patch = bank.filter(i);
        let norm = patch.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if norm > EPS {
            usable[i] = true;
            let inv = T::from_f64_lossy(norm);
            for (f, &v) in filters[i * k..(i + 1) * k].iter_mut().zip(patch) {
                *f = v / inv;
            }
        }
    }

    let per_chunk = tensor::conv_row_chunks(&geo, fused_target.data(), &filters, n_s, |rows, scores| {
        let n = rows.len() * geo.out_w;
        let mut best = vec![T::neg_infinity(); n];
        let mut arg = vec![0usize; n];
        for (i, row) in scores.chunks_exact(n).enumerate() {
            if !usable[i] {
                continue;
            }
            for ((b, a), &v) in best.iter_mut().zip(arg.iter_mut()).zip(row) {
                if v > *b {
                    *b = v;
                    *a = i;
                }
            }
        }
        arg
    });
    MatchMap::new(n_s, geo.out_h, geo.out_w, per_chunk.concat())
}

/// Scatters the selected original patches over the target grid and divides
/// by the per-pixel overlap count.
pub fn sgtw_reassemble<T: Scalar>(original_source: &PatchBank<T>, matches: &MatchMap) -> Result<FeatureMap<T>> {
    if matches.n_patches != original_source.count() {
        return Err(Error::shape(
            "sgtw_reassemble",
            format!("match map over {} patches", original_source.count()),
            format!("{} channels", matches.n_patches),
        ));
    }
    let (p, s, c) = (original_source.patch_size, original_source.stride, original_source.channels());
    let (rows, cols) = matches.grid();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("sgtw_reassemble", "empty match grid"));
    }
    let (h, w) = ((rows - 1) * s + p, (cols - 1) * s + p);
    let plane = h * w;
    let mut sums = vec![0.0f64; c * plane];
    let mut counts = vec![0u32; plane];
    for r in 0..rows {
        for col in 0..cols {
            let patch = original_source.patches.filter(matches.index(r, col));
            let (y0, x0) = (r * s, col * s);
            for ch in 0..c {
                let src = &patch[ch * p * p..(ch + 1) * p * p];
                for dy in 0..p {
                    let dst = &mut sums[ch * plane + (y0 + dy) * w + x0..][..p];
                    for (d, &v) in dst.iter_mut().zip(&src[dy * p..(dy + 1) * p]) {
                        *d += v.to_f64_lossy();
                    }
                }
            }
            for dy in 0..p {
                counts[(y0 + dy) * w + x0..][..p].iter_mut().for_each(|n| *n += 1);
            }
        }
    }
    let data = original_source.patches.data();
    let lo = data.iter().copied().fold(T::infinity(), T::min);
    let hi = data.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        for j in 0..plane {
            let n = counts[j];
            out.push(if n == 0 {
                T::zero()
            } else {
                // Rounding may not push a mean outside its source range.
                T::from_f64_lossy(sums[ch * plane + j] / n as f64).max(lo).min(hi)
            });
        }
    }
    FeatureMap::new(c, h, w, out)
}

/// Result of one reformation pass.
#[derive(Debug, Clone)]
pub struct VstrOutput<T> {
    pub feature: FeatureMap<T>,
    pub matches: MatchMap,
}

/// Full reformation: standardize, fuse, match fused patches, reassemble
/// original source patches.
#[allow(clippy::too_many_arguments)]
pub fn vstr_with_matches<T: Scalar>(
    source_style: &FeatureMap<T>,
    temp_target: &FeatureMap<T>,
    source_sem: &FeatureMap<T>,
    target_sem: &FeatureMap<T>,
    p: usize,
    s: usize,
    mode: FusionMode<T>,
) -> Result<VstrOutput<T>> {
    let fused_source = fuse_semantics(&standardize(source_style), source_sem, mode)?;
    let fused_target = fuse_semantics(&standardize(temp_target), target_sem, mode)?;
    let original = extract_patches(source_style, p, s)?;
    let matches = sgtw_match(&extract_patches(&fused_source, p, s)?, &fused_target)?;
    let feature = sgtw_reassemble(&original, &matches)?;
    Ok(VstrOutput { feature, matches })
}

pub fn vstr<T: Scalar>(
    source_style: &FeatureMap<T>,
    temp_target: &FeatureMap<T>,
    source_sem: &FeatureMap<T>,
    target_sem: &FeatureMap<T>,
    p: usize,
    s: usize,
    mode: FusionMode<T>,
) -> Result<FeatureMap<T>> {
    vstr_with_matches(source_style, temp_target, source_sem, target_sem, p, s, mode).map(|o| o.feature)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> FeatureMap<f32> {
        FeatureMap::from_fn(c, h, w, |c, y, x| ((c * 31 + y * 7 + x * 13) % 17) as f32 - 8.0)
    }

    #[test]
    fn standardize_examples() {
        let x = FeatureMap::new(2, 1, 2, vec![1.0f32, 3.0, 4.0, 4.0]).unwrap();
        assert_eq!(standardize(&x).data(), &[-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fusion_examples() {
        let f = ramp(4, 3, 3);
        let sem = ramp(4, 3, 3).map(|v| v * 0.5 + 1.0);
        let add0 = fuse_semantics(&f, &sem, FusionMode::new(FusionKind::Add, 0.0)).unwrap();
        assert_eq!(add0, f);
        let cat = fuse_semantics(&f, &sem, FusionMode::new(FusionKind::Concat, 50.0)).unwrap();
        assert_eq!(cat.channels(), 8);
        assert_eq!(&cat.data()[36..], sem.scaled(50.0).data());
        let zero = FeatureMap::zeros(4, 3, 3);
        let add = fuse_semantics(&zero, &sem, FusionMode::new(FusionKind::Add, 2.0)).unwrap();
        assert_eq!(add, sem.scaled(2.0));
        assert!(fuse_semantics(&f, &ramp(3, 3, 3), FusionMode::new(FusionKind::Add, 1.0)).is_err());
        assert!(fuse_semantics(&f, &ramp(4, 3, 3), FusionMode::new(FusionKind::Downsample, 1.0)).is_err());
        assert_eq!(
            fuse_semantics(&f, &ramp(3, 3, 3), FusionMode::new(FusionKind::Downsample, 1.0)).unwrap().channels(),
            7
        );
        assert!(fuse_semantics(&f, &ramp(4, 2, 3), FusionMode::new(FusionKind::Concat, 1.0)).is_err());
    }

    #[test]
    fn patch_size_rule() {
        let z = |h, w| FeatureMap::<f32>::zeros(1, h, w);
        assert_eq!(global_patch_size(&z(4, 6), &z(5, 7)).unwrap(), 3);
        assert_eq!(global_patch_size(&z(9, 9), &z(9, 9)).unwrap(), 8);
        assert_eq!(global_patch_size(&z(2, 2), &z(9, 9)).unwrap(), 1);
        assert!(matches!(global_patch_size(&z(1, 5), &z(9, 9)), Err(Error::DegenerateFeature(_))));
    }

    #[test]
    fn extraction_examples() {
        let f = ramp(1, 3, 3);
        let bank = extract_patches(&f, 3, 1).unwrap();
        assert_eq!(bank.count(), 1);
        assert_eq!(bank.patches().data(), f.data());
        assert_eq!(extract_patches(&ramp(1, 4, 4), 3, 1).unwrap().count(), 4);
        let strided = extract_patches(&ramp(2, 7, 5), 2, 2).unwrap();
        assert_eq!(strided.grid(), (3, 2));
        assert_eq!(strided.origin(5), (4, 2));
        assert!(extract_patches(&f, 4, 1).is_err());
        assert!(extract_patches(&f, 2, 0).is_err());
    }

    #[test]
    fn orthogonal_patches_select_second() {
        // two 1x1 "patches" along orthogonal channel axes
        let source = FeatureMap::new(2, 1, 2, vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let bank = extract_patches(&source, 1, 1).unwrap();
        let target = FeatureMap::new(2, 2, 2, vec![0.0f32, 0.0, 0.0, 0.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
        let m = sgtw_match(&bank, &target).unwrap();
        assert_eq!(m.indices(), &[1, 1, 1, 1]);
    }

    #[test]
    fn zero_norm_patches_never_win() {
        let source = FeatureMap::new(1, 1, 3, vec![0.0f32, -1.0, 2.0]).unwrap();
        let bank = extract_patches(&source, 1, 1).unwrap();
        let target = FeatureMap::new(1, 1, 2, vec![0.0f32, -5.0]).unwrap();
        // position 0 ties between the two usable patches (score 0) -> lowest usable index 1
        assert_eq!(sgtw_match(&bank, &target).unwrap().indices(), &[1, 1]);
        let blank = extract_patches(&FeatureMap::<f32>::zeros(1, 2, 2), 1, 1).unwrap();
        assert_eq!(sgtw_match(&blank, &target).unwrap().indices(), &[0, 0]);
    }

    #[test]
    fn one_hot_round_trip_and_validation() {
        let m = MatchMap::new(3, 2, 2, vec![2, 0, 1, 2]).unwrap();
        let hot = m.to_one_hot::<f32>();
        assert_eq!(MatchMap::from_one_hot(&hot).unwrap(), m);
        let mut twice = hot.clone();
        twice.set(0, 0, 0, 1.0);
        assert!(MatchMap::from_one_hot(&twice).is_err());
        assert!(MatchMap::from_one_hot(&FeatureMap::<f32>::zeros(3, 1, 1)).is_err());
        assert!(MatchMap::new(3, 1, 1, vec![3]).is_err());
    }

    #[test]
    fn non_overlapping_identity_tiles_losslessly() {
        let f = ramp(3, 6, 9);
        let bank = extract_patches(&f, 3, 3).unwrap();
        let (r, c) = bank.grid();
        let m = MatchMap::new(bank.count(), r, c, (0..bank.count()).collect()).unwrap();
        assert_eq!(sgtw_reassemble(&bank, &m).unwrap(), f);
    }

    #[test]
    fn single_patch_bank_tiles() {
        let f = ramp(2, 2, 2);
        let bank = extract_patches(&f, 2, 2).unwrap();
        let m = MatchMap::new(1, 2, 3, vec![0; 6]).unwrap();
        let out = sgtw_reassemble(&bank, &m).unwrap();
        assert_eq!(out.dims(), (2, 4, 6));
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(out.at(1, y, x), f.at(1, y % 2, x % 2));
            }
        }
        assert!(sgtw_reassemble(&bank, &MatchMap::new(2, 1, 1, vec![0]).unwrap()).is_err());
    }

    #[test]
    fn vstr_self_transfer_is_identity() {
        let f = ramp(4, 6, 6).map(|v| v * v * 0.1 + v);
        let sem = ramp(4, 6, 6).map(|v| v.abs());
        let mode = FusionMode::new(FusionKind::Concat, 50.0f32);
        let out = vstr_with_matches(&f, &f, &sem, &sem, 3, 3, mode).unwrap();
        assert_eq!(out.feature, f);
        assert_eq!(out.matches.indices(), &[0, 1, 2, 3]);
    }
}
