//! PNG in, PNG out: the one code path shared by the CLI and the service, so
//! both produce byte-identical images for the same request.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use texture_reformer::error::Stage;
use texture_reformer::imaging::{align_dims, decode_png, encode_png};
use texture_reformer::{run_transfer, Error, FeatureMap32, FusionKind, ScopeKind, StageSet, TransferConfig32, WeightStore32};

/// Inputs are cropped centrally to a multiple of this before encoding.
pub const ALIGN: usize = 16;

/// Optional knobs layered over [`TransferConfig32::default`]. Both the CLI
/// flags and the JSON `config` object land here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigOverrides {
    pub omega1: Option<f32>,
    pub omega2: Option<f32>,
    #[serde(with = "display_fromstr")]
    pub fusion: Option<FusionKind>,
    /// Local-stage patch size.
    pub patch_size: Option<usize>,
    /// Global-stage patch size; computed from the feature size when absent.
    pub patch_size_global: Option<usize>,
    pub stride: Option<usize>,
    #[serde(with = "display_fromstr")]
    pub stages: Option<StageSet>,
    pub blend1: Option<f32>,
    pub blend2: Option<f32>,
    #[serde(with = "display_fromstr")]
    pub se_scope: Option<ScopeKind>,
}

impl ConfigOverrides {
    /// Every field set to the engine default (the global patch size stays
    /// unset because it is derived per input).
    pub fn defaults() -> Self {
        let d = TransferConfig32::default();
        Self {
            omega1: Some(d.omega1),
            omega2: Some(d.omega2),
            fusion: Some(d.fusion),
            patch_size: Some(d.p_stage2),
            patch_size_global: d.patch_size_override,
            stride: Some(d.stride),
            stages: Some(d.stages),
            blend1: Some(d.blend[0]),
            blend2: Some(d.blend[1]),
            se_scope: Some(d.se_scope),
        }
    }

    /// Applies the overrides to the defaults and validates the result.
    pub fn to_config(&self) -> Result<TransferConfig32, Error> {
        let mut cfg = TransferConfig32::default();
        if let Some(v) = self.omega1 {
            cfg.omega1 = v;
        }
        if let Some(v) = self.omega2 {
            cfg.omega2 = v;
        }
        if let Some(v) = self.fusion {
            cfg.fusion = v;
        }
        if let Some(v) = self.patch_size {
            cfg.p_stage2 = v;
        }
        if let Some(v) = self.patch_size_global {
            cfg.patch_size_override = Some(v);
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.stages {
            cfg.stages = v;
        }
        if let Some(v) = self.blend1 {
            cfg.blend[0] = v;
        }
        if let Some(v) = self.blend2 {
            cfg.blend[1] = v;
        }
        if let Some(v) = self.se_scope {
            cfg.se_scope = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

mod display_fromstr {
    use super::*;

    pub fn serialize<T: fmt::Display, S: Serializer>(value: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => s.collect_str(v),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<Option<T>, D::Error>
    where
        T: FromStr<Err = String>,
        D: Deserializer<'de>,
    {
        Option::<String>::deserialize(d)?
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Encoded PNGs of the three inputs.
#[derive(Debug, Clone, Copy)]
pub struct PngInputs<'a> {
    pub source_style: &'a [u8],
    pub source_sem: &'a [u8],
    pub target_sem: &'a [u8],
}

#[derive(Debug, Clone)]
pub struct TransferOutput {
    pub image: Vec<u8>,
    /// `(name, png)` for each available intermediate among t5, t4, t3, t2.
    pub trace: Vec<(&'static str, Vec<u8>)>,
    /// Wall time per executed stage, in seconds.
    pub timings: Vec<(Stage, f64)>,
}

impl TransferOutput {
    pub fn total_seconds(&self) -> f64 {
        self.timings.iter().map(|(_, t)| t).sum()
    }
}

/// Failure classes; they map to process exit codes and HTTP statuses.
#[derive(Debug)]
pub enum RunError {
    /// Unreadable or undecodable input, or an unwritable output.
    Input(String),
    /// A configuration the engine refuses before running any stage.
    Config(String),
    /// A failure inside a stage.
    Engine { stage: Option<Stage>, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 1,
            RunError::Input(_) => 2,
            RunError::Engine { .. } => 3,
        }
    }

    fn from_engine(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => RunError::Config(m),
            e => RunError::Engine {
                stage: e.stage(),
                message: e.to_string(),
            },
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Input(m) => write!(f, "input: {m}"),
            RunError::Config(m) => write!(f, "invalid configuration: {m}"),
            RunError::Engine { message, .. } => write!(f, "transfer failed: {message}"),
        }
    }
}

impl std::error::Error for RunError {}

fn decode_input(name: &str, bytes: &[u8]) -> Result<FeatureMap32, RunError> {
    let image = decode_png::<f32>(bytes).map_err(|e| RunError::Input(format!("{name}: {e}")))?;
    align_dims(&image, ALIGN).map_err(|e| RunError::Input(format!("{name}: {e}")))
}

/// Decodes, aligns, runs the enabled stages and re-encodes the results.
pub fn transfer_png(
    inputs: PngInputs<'_>,
    overrides: &ConfigOverrides,
    weights: &WeightStore32,
    with_trace: bool,
) -> Result<TransferOutput, RunError> {
    let cfg = overrides.to_config().map_err(RunError::from_engine)?;
    let s_sty = decode_input("source style", inputs.source_style)?;
    let s_sem = decode_input("source semantic map", inputs.source_sem)?;
    let t_sem = decode_input("target semantic map", inputs.target_sem)?;
    let (out, trace) = run_transfer(&s_sty, &s_sem, &t_sem, &cfg, weights).map_err(RunError::from_engine)?;

    let encode = |img: &FeatureMap32| encode_png(img).map_err(|e| RunError::Input(format!("encoding output: {e}")));
    let mut trace_pngs = Vec::new();
    if with_trace {
        for (name, img) in [("t5", &trace.t5), ("t4", &trace.t4), ("t3", &trace.t3), ("t2", &trace.t2)] {
            if let Some(img) = img {
                trace_pngs.push((name, encode(img)?));
            }
        }
    }
    Ok(TransferOutput {
        image: encode(&out)?,
        trace: trace_pngs,
        timings: trace.timings.iter().map(|(s, d)| (*s, d.as_secs_f64())).collect(),
    })
}
