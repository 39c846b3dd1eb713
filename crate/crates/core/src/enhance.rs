//! First-order statistics matching of target features to source features.

use crate::error::{Error, Result};
use crate::imaging::LabelGrid;
use crate::scalar::Scalar;
use crate::tensor::{channel_stats, slice_stats, ChannelStats, FeatureMap};
use crate::vstr::EPS;

/// Where moments are gathered and matched.
#[derive(Debug, Clone, Copy)]
pub enum EnhancementScope<'a> {
    /// One set of statistics per channel over the whole map.
    Global,
    /// Statistics per channel and per label. Grids must match the feature
    /// resolution and share label ids; target labels absent from the source
    /// fall back to the global source statistics.
    PerLabel {
        source: &'a LabelGrid,
        target: &'a LabelGrid,
    },
}

#[inline]
fn rematch<T: Scalar>(v: T, from: ChannelStats<T>, to: ChannelStats<T>, eps: T) -> T {
    to.std * ((v - from.mean) / from.std.max(eps)) + to.mean
}

fn check_grid<T: Scalar>(grid: &LabelGrid, feature: &FeatureMap<T>) -> Result<()> {
    if (grid.height(), grid.width()) != (feature.height(), feature.width()) {
        return Err(Error::shape(
            "se",
            format!("label grid of {}x{}", feature.height(), feature.width()),
            format!("{}x{}", grid.height(), grid.width()),
        ));
    }
    Ok(())
}

/// `σ_s · (t − μ_t) / max(σ_t, ε) + μ_s` per channel (and per label region).
pub fn se<T: Scalar>(source: &FeatureMap<T>, target: &FeatureMap<T>, scope: EnhancementScope<'_>) -> Result<FeatureMap<T>> {
    if source.channels() != target.channels() {
        return Err(Error::shape("se", format!("{} channels", source.channels()), target.shape_str()));
    }
    let eps = T::from_f64_lossy(EPS);
    let source_stats = channel_stats(source);
    let mut out = target.clone();
    match scope {
        EnhancementScope::Global => {
            for (c, to) in source_stats.into_iter().enumerate() {
                let from = slice_stats(target.channel(c).iter().copied());
                out.channel_mut(c).iter_mut().for_each(|v| *v = rematch(*v, from, to, eps));
            }
        }
        EnhancementScope::PerLabel {
            source: source_grid,
            target: target_grid,
        } => {
            check_grid(source_grid, source)?;
            check_grid(target_grid, target)?;
            let source_pos = source_grid.positions();
            let target_pos = target_grid.positions();
            for (c, global) in source_stats.iter().enumerate() {
                let (src, tgt) = (source.channel(c), target.channel(c));
                let dst = out.channel_mut(c);
                for (label, positions) in target_pos.iter().enumerate() {
                    if positions.is_empty() {
                        continue;
                    }
                    let to = match source_pos.get(label) {
                        Some(p) if !p.is_empty() => slice_stats(p.iter().map(|&i| src[i])),
                        _ => *global,
                    };
                    let from = slice_stats(positions.iter().map(|&i| tgt[i]));
                    for &i in positions {
                        dst[i] = rematch(tgt[i], from, to, eps);
                    }
                }
            }
        }
    }
    Ok(out)
}
