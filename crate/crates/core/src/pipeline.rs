//! The three-stage transfer: global-view alignment at `relu5_1`, local-view
//! refinement at `relu4_1`, and statistics enhancement at `relu3_1`,
//! `relu2_1`, `relu1_1`. Every stage decodes to an image that the next stage
//! re-encodes as its temporary target.

use std::cell::OnceCell;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::codec::{decode, encode, encode_taps};
use crate::enhance::{se, EnhancementScope};
use crate::error::{Error, Result, Stage};
use crate::imaging::{self, denormalize_to_rgb8, parse_semantic_map, LabelGrid};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use crate::vstr::{global_patch_size, vstr_with_matches, FusionKind, FusionMode, MatchMap};
use crate::weights::WeightStore;

pub const GLOBAL_LEVEL: usize = 5;
pub const LOCAL_LEVEL: usize = 4;
pub const ENHANCE_LEVELS: [usize; 3] = [3, 2, 1];

/// Which stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageSet {
    pub global: bool,
    pub local: bool,
    pub enhance: bool,
}

impl StageSet {
    pub const ALL: StageSet = StageSet {
        global: true,
        local: true,
        enhance: true,
    };
    pub const NONE: StageSet = StageSet {
        global: false,
        local: false,
        enhance: false,
    };

    pub fn contains(self, stage: Stage) -> bool {
        match stage {
            Stage::Global => self.global,
            Stage::Local => self.local,
            Stage::Enhance => self.enhance,
        }
    }

    pub fn with(mut self, stage: Stage, on: bool) -> Self {
        match stage {
            Stage::Global => self.global = on,
            Stage::Local => self.local = on,
            Stage::Enhance => self.enhance = on,
        }
        self
    }
}

impl Default for StageSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for StageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = Stage::ALL.iter().filter(|s| self.contains(**s)).map(|s| s.label()).collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// Parses a comma-separated list such as `I,II,III`, `1,3` or `none`.
impl FromStr for StageSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(StageSet::NONE);
        }
        s.split(',').try_fold(StageSet::NONE, |set, item| {
            let stage = match item.trim().to_ascii_uppercase().as_str() {
                "I" | "1" => Stage::Global,
                "II" | "2" => Stage::Local,
                "III" | "3" => Stage::Enhance,
                other => return Err(format!("unknown stage `{other}` (expected I, II or III)")),
            };
            Ok(set.with(stage, true))
        })
    }
}

/// Region over which the enhancement stage gathers statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScopeKind {
    #[default]
    Global,
    PerLabel,
}

impl fmt::Display for ScopeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScopeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(ScopeKind::Global),
            "per-label" => Ok(ScopeKind::PerLabel),
            other => Err(format!("unknown scope `{other}` (expected global or per-label)")),
        }
    }
}

impl ScopeKind {
    pub fn name(self) -> &'static str {
        match self {
            ScopeKind::Global => "global",
            ScopeKind::PerLabel => "per-label",
        }
    }
}

/// Every tuning knob of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig<T> {
    /// Semantic weight of the global stage.
    pub omega1: T,
    /// Semantic weight of the local stage.
    pub omega2: T,
    pub fusion: FusionKind,
    /// Patch size of the local stage.
    pub p_stage2: usize,
    /// Patch stride of the local stage. The global stage always uses 1.
    pub stride: usize,
    pub stages: StageSet,
    /// Feature interpolation per stage: `blend·F_out + (1 − blend)·F_in`.
    pub blend: [T; 3],
    pub se_scope: ScopeKind,
    /// Replaces the computed global patch size when set.
    pub patch_size_override: Option<usize>,
    /// Color snapping radius for per-label enhancement.
    pub semantic_tolerance: f64,
}

impl<T: Scalar> Default for TransferConfig<T> {
    fn default() -> Self {
        let one = T::one();
        Self {
            omega1: T::from_f64_lossy(50.0),
            omega2: T::from_f64_lossy(50.0),
            fusion: FusionKind::Concat,
            p_stage2: 3,
            stride: 1,
            stages: StageSet::ALL,
            blend: [one, one, one],
            se_scope: ScopeKind::Global,
            patch_size_override: None,
            semantic_tolerance: imaging::DEFAULT_SEMANTIC_TOLERANCE,
        }
    }
}

impl<T: Scalar> TransferConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, w) in [("omega1", self.omega1), ("omega2", self.omega2)] {
            if !(w.is_finite() && w >= T::zero()) {
                return bad(format!("{name} must be a finite non-negative number, got {w}"));
            }
        }
        for (i, b) in self.blend.iter().enumerate() {
            if !(*b >= T::zero() && *b <= T::one()) {
                return bad(format!("blend{} must lie in [0, 1], got {b}", i + 1));
            }
        }
        if self.p_stage2 == 0 {
            return bad("patch size must be at least 1".into());
        }
        if self.stride == 0 || self.stride > self.p_stage2 {
            return bad(format!("stride must lie in [1, patch size {}], got {}", self.p_stage2, self.stride));
        }
        if self.patch_size_override == Some(0) {
            return bad("global patch size override must be at least 1".into());
        }
        if !(self.semantic_tolerance.is_finite() && self.semantic_tolerance >= 0.0) {
            return bad(format!("semantic tolerance must be non-negative, got {}", self.semantic_tolerance));
        }
        Ok(())
    }

    pub fn blend_for(&self, stage: Stage) -> T {
        self.blend[stage as usize]
    }
}

/// Intermediate images and per-stage wall time of one run.
#[derive(Debug, Clone, Default)]
pub struct StageTrace<T> {
    /// Output of the global stage.
    pub t5: Option<FeatureMap<T>>,
    /// Output of the local stage.
    pub t4: Option<FeatureMap<T>>,
    /// Enhancement output after `relu3_1`.
    pub t3: Option<FeatureMap<T>>,
    /// Enhancement output after `relu2_1`.
    pub t2: Option<FeatureMap<T>>,
    /// Enhancement output after `relu1_1`.
    pub t1: Option<FeatureMap<T>>,
    pub timings: Vec<(Stage, Duration)>,
    pub matches: Vec<(Stage, MatchMap)>,
}

impl<T> StageTrace<T> {
    pub fn total_time(&self) -> Duration {
        self.timings.iter().map(|(_, d)| *d).sum()
    }

    pub fn timing(&self, stage: Stage) -> Option<Duration> {
        self.timings.iter().find(|(s, _)| *s == stage).map(|(_, d)| *d)
    }

    pub fn matches_for(&self, stage: Stage) -> Option<&MatchMap> {
        self.matches.iter().find(|(s, _)| *s == stage).map(|(_, m)| m)
    }
}

/// Lazily computed encoder taps of one input image.
struct Taps<'a, T> {
    image: &'a FeatureMap<T>,
    max_level: usize,
    cell: OnceCell<Vec<FeatureMap<T>>>,
}

impl<'a, T: Scalar> Taps<'a, T> {
    fn new(image: &'a FeatureMap<T>, max_level: usize) -> Self {
        Self {
            image,
            max_level,
            cell: OnceCell::new(),
        }
    }

    fn get(&self, level: usize, weights: &WeightStore<T>) -> Result<Option<&FeatureMap<T>>> {
        if level > self.max_level {
            return Ok(None);
        }
        if self.cell.get().is_none() {
            let taps = encode_taps(self.image, self.max_level, weights)?;
            let _ = self.cell.set(taps);
        }
        Ok(self.cell.get().map(|t| &t[level - 1]))
    }

    fn is_image(&self, other: &FeatureMap<T>) -> bool {
        std::ptr::eq(self.image, other) || self.image == other
    }
}

/// Shared state of one transfer: inputs, config and cached encodings.
struct Session<'a, T> {
    cfg: &'a TransferConfig<T>,
    weights: &'a WeightStore<T>,
    s_sty: Taps<'a, T>,
    s_sem: Taps<'a, T>,
    t_sem: Taps<'a, T>,
    labels: OnceCell<(LabelGrid, LabelGrid)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    fn new(
        s_sty: &'a FeatureMap<T>,
        s_sem: &'a FeatureMap<T>,
        t_sem: &'a FeatureMap<T>,
        cfg: &'a TransferConfig<T>,
        weights: &'a WeightStore<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        for (name, img) in [("source style", s_sty), ("source semantic", s_sem), ("target semantic", t_sem)] {
            if img.channels() != 3 {
                return Err(Error::shape("transfer", format!("3-channel {name} image"), img.shape_str()));
            }
        }
        if !s_sty.same_dims(s_sem) {
            return Err(Error::shape("transfer", format!("source semantic map of {}", s_sty.shape_str()), s_sem.shape_str()));
        }
        let st = cfg.stages;
        let vstr_level = if st.global {
            GLOBAL_LEVEL
        } else if st.local {
            LOCAL_LEVEL
        } else {
            0
        };
        let style_level = if vstr_level > 0 {
            vstr_level
        } else if st.enhance {
            ENHANCE_LEVELS[0]
        } else {
            0
        };
        let sem_level = if cfg.fusion == FusionKind::Downsample { 0 } else { vstr_level };
        // The target semantic image is also the first temporary target.
        let t_level = sem_level.max(vstr_level);
        Ok(Self {
            cfg,
            weights,
            s_sty: Taps::new(s_sty, style_level),
            s_sem: Taps::new(s_sem, sem_level),
            t_sem: Taps::new(t_sem, t_level),
            labels: OnceCell::new(),
        })
    }

    fn style(&self, level: usize) -> Result<&FeatureMap<T>> {
        Ok(self.s_sty.get(level, self.weights)?.expect("style taps cover every enabled stage"))
    }

    /// Encodes the temporary target, reusing the target semantic encoding
    /// when the temporary target is that image.
    fn encode_temp(&self, temp: &FeatureMap<T>, level: usize) -> Result<FeatureMap<T>> {
        if self.t_sem.is_image(temp) {
            if let Some(f) = self.t_sem.get(level, self.weights)? {
                return Ok(f.clone());
            }
        }
        encode(temp, level, self.weights)
    }

    fn semantics(&self, level: usize, fs: &FeatureMap<T>, ft: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        if self.cfg.fusion == FusionKind::Downsample {
            let rgb_s = imaging::to_unit_rgb(self.s_sem.image)?;
            let rgb_t = imaging::to_unit_rgb(self.t_sem.image)?;
            return Ok((
                imaging::resize_nearest(&rgb_s, fs.height(), fs.width()),
                imaging::resize_nearest(&rgb_t, ft.height(), ft.width()),
            ));
        }
        let s = self.s_sem.get(level, self.weights)?.expect("semantic taps cover enabled stages");
        let t = self.t_sem.get(level, self.weights)?.expect("semantic taps cover enabled stages");
        Ok((s.clone(), t.clone()))
    }

    fn reform(&self, stage: Stage, temp: &FeatureMap<T>) -> Result<(FeatureMap<T>, MatchMap)> {
        let (level, omega, stride) = match stage {
            Stage::Global => (GLOBAL_LEVEL, self.cfg.omega1, 1),
            Stage::Local => (LOCAL_LEVEL, self.cfg.omega2, self.cfg.stride),
            Stage::Enhance => unreachable!("enhancement does not reform patches"),
        };
        let fs = self.style(level)?;
        let ft = self.encode_temp(temp, level)?;
        let (sem_s, sem_t) = self.semantics(level, fs, &ft)?;
        let p = match stage {
            Stage::Global => match self.cfg.patch_size_override {
                Some(p) => p,
                None => global_patch_size(fs, &ft)?,
            },
            _ => self.cfg.p_stage2,
        };
        let out = vstr_with_matches(fs, &ft, &sem_s, &sem_t, p, stride, FusionMode::new(self.cfg.fusion, omega))?;
        if !out.feature.same_dims(&ft) {
            return Err(Error::InvalidConfig(format!(
                "patch size {p} with stride {stride} does not tile the {}x{} feature grid",
                ft.height(),
                ft.width()
            )));
        }
        let feature = blend(out.feature, &ft, self.cfg.blend_for(stage))?;
        Ok((decode(&feature, level, self.weights)?, out.matches))
    }

    fn label_grids(&self) -> Result<&(LabelGrid, LabelGrid)> {
        if self.labels.get().is_none() {
            let tol = self.cfg.semantic_tolerance;
            let s = parse_semantic_map(&denormalize_to_rgb8(self.s_sem.image)?, tol)?;
            let t = parse_semantic_map(&denormalize_to_rgb8(self.t_sem.image)?, tol)?;
            let _ = self.labels.set(s.joint_labels(&t));
        }
        Ok(self.labels.get().expect("initialized above"))
    }

    /// Runs SE at relu3_1, relu2_1, relu1_1; returns the image after each.
    fn enhance(&self, temp: &FeatureMap<T>, levels: &[usize]) -> Result<Vec<FeatureMap<T>>> {
        let mut current = temp.clone();
        let mut outputs = Vec::with_capacity(levels.len());
        for &level in levels {
            let s = self.style(level)?;
            let t = encode(&current, level, self.weights)?;
            let enhanced = match self.cfg.se_scope {
                ScopeKind::Global => se(s, &t, EnhancementScope::Global)?,
                ScopeKind::PerLabel => {
                    let (gs, gt) = self.label_grids()?;
                    let (gs, gt) = (gs.resize_nearest(s.height(), s.width()), gt.resize_nearest(t.height(), t.width()));
                    se(s, &t, EnhancementScope::PerLabel { source: &gs, target: &gt })?
                }
            };
            let feature = blend(enhanced, &t, self.cfg.blend_for(Stage::Enhance))?;
            current = decode(&feature, level, self.weights)?;
            outputs.push(current.clone());
        }
        Ok(outputs)
    }
}

fn blend<T: Scalar>(out: FeatureMap<T>, input: &FeatureMap<T>, weight: T) -> Result<FeatureMap<T>> {
    if weight == T::one() {
        Ok(out)
    } else {
        out.lerp(input, weight)
    }
}

/// Global view structure alignment: reformation at `relu5_1` with the
/// largest patch that fits (or the configured override), decoded by the
/// level-5 decoder. Returns `init` unchanged when the stage is disabled.
pub fn stage1_global_align<T: Scalar>(
    s_sty: &FeatureMap<T>,
    s_sem: &FeatureMap<T>,
    t_sem: &FeatureMap<T>,
    init: &FeatureMap<T>,
    cfg: &TransferConfig<T>,
    weights: &WeightStore<T>,
) -> Result<FeatureMap<T>> {
    if !cfg.stages.global {
        return Ok(init.clone());
    }
    let only = TransferConfig {
        stages: StageSet::NONE.with(Stage::Global, true),
        ..cfg.clone()
    };
    let session = Session::new(s_sty, s_sem, t_sem, &only, weights).map_err(|e| e.in_stage(Stage::Global))?;
    session.reform(Stage::Global, init).map(|(img, _)| img).map_err(|e| e.in_stage(Stage::Global))
}

/// Local view refinement: reformation at `relu4_1` with `cfg.p_stage2`.
pub fn stage2_local_refine<T: Scalar>(
    s_sty: &FeatureMap<T>,
    s_sem: &FeatureMap<T>,
    t_sem: &FeatureMap<T>,
    temp: &FeatureMap<T>,
    cfg: &TransferConfig<T>,
    weights: &WeightStore<T>,
) -> Result<FeatureMap<T>> {
    if !cfg.stages.local {
        return Ok(temp.clone());
    }
    let only = TransferConfig {
        stages: StageSet::NONE.with(Stage::Local, true),
        ..cfg.clone()
    };
    let session = Session::new(s_sty, s_sem, t_sem, &only, weights).map_err(|e| e.in_stage(Stage::Local))?;
    session.reform(Stage::Local, temp).map(|(img, _)| img).map_err(|e| e.in_stage(Stage::Local))
}

/// Holistic enhancement at `relu3_1`, `relu2_1`, `relu1_1` in turn.
///
/// `semantics` supplies `(source, target)` semantic images and is required
/// only for [`ScopeKind::PerLabel`].
pub fn stage3_enhance<T: Scalar>(
    s_sty: &FeatureMap<T>,
    temp: &FeatureMap<T>,
    semantics: Option<(&FeatureMap<T>, &FeatureMap<T>)>,
    cfg: &TransferConfig<T>,
    weights: &WeightStore<T>,
) -> Result<FeatureMap<T>> {
    if !cfg.stages.enhance {
        return Ok(temp.clone());
    }
    let (s_sem, t_sem) = match (semantics, cfg.se_scope) {
        (Some(pair), _) => pair,
        (None, ScopeKind::Global) => (s_sty, temp),
        (None, ScopeKind::PerLabel) => {
            return Err(Error::InvalidConfig("per-label enhancement needs semantic maps".into()).in_stage(Stage::Enhance))
        }
    };
    let only = TransferConfig {
        stages: StageSet::NONE.with(Stage::Enhance, true),
        ..cfg.clone()
    };
    let run = || -> Result<FeatureMap<T>> {
        let session = Session::new(s_sty, s_sem, t_sem, &only, weights)?;
        Ok(session.enhance(temp, &ENHANCE_LEVELS)?.pop().expect("three levels"))
    };
    run().map_err(|e| e.in_stage(Stage::Enhance))
}

/// Runs the enabled stages in order I → II → III starting from the target
/// semantic image, and returns the final image with its trace.
pub fn run_transfer<T: Scalar>(
    s_sty: &FeatureMap<T>,
    s_sem: &FeatureMap<T>,
    t_sem: &FeatureMap<T>,
    cfg: &TransferConfig<T>,
    weights: &WeightStore<T>,
) -> Result<(FeatureMap<T>, StageTrace<T>)> {
    let session = Session::new(s_sty, s_sem, t_sem, cfg, weights)?;
    let mut trace = StageTrace {
        t5: None,
        t4: None,
        t3: None,
        t2: None,
        t1: None,
        timings: Vec::new(),
        matches: Vec::new(),
    };
    let mut temp: Option<FeatureMap<T>> = None;
    for stage in [Stage::Global, Stage::Local] {
        if !cfg.stages.contains(stage) {
            continue;
        }
        let start = Instant::now();
        let input = temp.as_ref().unwrap_or(t_sem);
        let (img, matches) = session.reform(stage, input).map_err(|e| e.in_stage(stage))?;
        trace.timings.push((stage, start.elapsed()));
        trace.matches.push((stage, matches));
        match stage {
            Stage::Global => trace.t5 = Some(img.clone()),
            _ => trace.t4 = Some(img.clone()),
        }
        temp = Some(img);
    }
    if cfg.stages.enhance {
        let start = Instant::now();
        let input = temp.as_ref().unwrap_or(t_sem);
        let mut outs = session
            .enhance(input, &ENHANCE_LEVELS)
            .map_err(|e| e.in_stage(Stage::Enhance))?
            .into_iter();
        trace.timings.push((Stage::Enhance, start.elapsed()));
        trace.t3 = outs.next();
        trace.t2 = outs.next();
        trace.t1 = outs.next();
        temp = trace.t1.clone();
    }
    let out = temp.unwrap_or_else(|| t_sem.clone());
    Ok((out, trace))
}
