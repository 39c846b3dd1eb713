//! Interactive texture transfer over VGG features.
//!
//! Given a stylized source image, its semantic map and a target semantic
//! map, the engine synthesizes the stylized target in three cascaded stages:
//! a global-view patch reformation at `relu5_1`, a local-view reformation at
//! `relu4_1`, and first-order statistics enhancement at `relu3_1`, `relu2_1`
//! and `relu1_1`. Each stage decodes back to an image before the next.
//!
//! All numeric code is generic over [`Scalar`] (`f32` and `f64`); the
//! aliases below pin the production precision.

pub mod codec;
pub mod enhance;
pub mod error;
pub mod imaging;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod vstr;
pub mod weights;

pub use codec::{decode, encode, encode_taps, reconstruction_loss, CodecLevel};
pub use enhance::{se, EnhancementScope};
pub use error::{Error, Result, Stage};
pub use imaging::{LabelGrid, SemanticMap};
pub use pipeline::{run_transfer, ScopeKind, StageSet, StageTrace, TransferConfig};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Kernel4D, Padding};
pub use vstr::{FusionKind, FusionMode, MatchMap, PatchBank};
pub use weights::WeightStore;

pub type FeatureMap32 = FeatureMap<f32>;
pub type FeatureMap64 = FeatureMap<f64>;
pub type Kernel4D32 = Kernel4D<f32>;
pub type Kernel4D64 = Kernel4D<f64>;
pub type WeightStore32 = WeightStore<f32>;
pub type WeightStore64 = WeightStore<f64>;
pub type TransferConfig32 = TransferConfig<f32>;
pub type TransferConfig64 = TransferConfig<f64>;
