//! VGG-19 encoder slices up to `reluX_1` and their mirrored decoders.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, FeatureMap, Padding};
use crate::weights::WeightStore;

pub const MIN_LEVEL: usize = 1;
pub const MAX_LEVEL: usize = 5;

/// One 3x3 convolution of the architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    /// Layer name without the `.weight`/`.bias` suffix.
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    /// Whether a ReLU follows this convolution.
    pub relu: bool,
}

impl ConvSpec {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv(ConvSpec),
    /// 2x2 max pooling, stride 2.
    Pool,
    /// Nearest-neighbour x2 upsampling.
    Upsample,
}

/// VGG-19 feature prefix up to conv5_1: `(name, in, out)` or a pool marker.
const VGG19_PREFIX: &[Option<(&str, usize, usize)>] = &[
    Some(("conv1_1", 3, 64)),
    Some(("conv1_2", 64, 64)),
    None,
    Some(("conv2_1", 64, 128)),
    Some(("conv2_2", 128, 128)),
    None,
    Some(("conv3_1", 128, 256)),
    Some(("conv3_2", 256, 256)),
    Some(("conv3_3", 256, 256)),
    Some(("conv3_4", 256, 256)),
    None,
    Some(("conv4_1", 256, 512)),
    Some(("conv4_2", 512, 512)),
    Some(("conv4_3", 512, 512)),
    Some(("conv4_4", 512, 512)),
    None,
    Some(("conv5_1", 512, 512)),
];

/// Encoder and decoder layer lists for one `reluX_1` cut point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecLevel {
    level: usize,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
}

impl CodecLevel {
    pub fn new(level: usize) -> Result<Self> {
        check_level(level)?;
        let cut = VGG19_PREFIX
            .iter()
            .position(|l| matches!(l, Some((n, _, _)) if *n == format!("conv{level}_1")))
            .expect("every level has a convX_1");
        let prefix = &VGG19_PREFIX[..=cut];
        let encoder = prefix
            .iter()
            .map(|l| match l {
                Some((name, cin, cout)) => Layer::Conv(ConvSpec {
                    name: format!("enc.{name}"),
                    cin: *cin,
                    cout: *cout,
                    kernel: 3,
                    relu: true,
                }),
                None => Layer::Pool,
            })
            .collect();
        let n_convs = prefix.iter().filter(|l| l.is_some()).count();
        let mut index = 0;
        let decoder = prefix
            .iter()
            .rev()
            .map(|l| match l {
                Some((_, cin, cout)) => {
                    let spec = ConvSpec {
                        name: format!("dec{level}.conv{index}"),
                        cin: *cout,
                        cout: *cin,
                        kernel: 3,
                        relu: index + 1 < n_convs,
                    };
                    index += 1;
                    Layer::Conv(spec)
                }
                None => Layer::Upsample,
            })
            .collect();
        Ok(Self { level, encoder, decoder })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn encoder(&self) -> &[Layer] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[Layer] {
        &self.decoder
    }

    /// Channels of the `reluX_1` feature.
    pub fn channels(&self) -> usize {
        feature_channels(self.level)
    }

    /// Spatial downsampling of the `reluX_1` feature relative to the image.
    pub fn downsampling(&self) -> usize {
        downsampling(self.level)
    }
}

pub fn feature_channels(level: usize) -> usize {
    [64, 128, 256, 512, 512][level.clamp(MIN_LEVEL, MAX_LEVEL) - 1]
}

pub fn downsampling(level: usize) -> usize {
    1 << (level.clamp(MIN_LEVEL, MAX_LEVEL) - 1)
}

fn check_level(level: usize) -> Result<()> {
    if (MIN_LEVEL..=MAX_LEVEL).contains(&level) {
        Ok(())
    } else {
        Err(Error::invalid("codec", format!("level {level} outside 1..=5")))
    }
}

fn levels() -> &'static [CodecLevel] {
    static LEVELS: OnceLock<Vec<CodecLevel>> = OnceLock::new();
    LEVELS.get_or_init(|| (MIN_LEVEL..=MAX_LEVEL).map(|l| CodecLevel::new(l).expect("valid level")).collect())
}

pub(crate) fn level_spec(level: usize) -> Result<&'static CodecLevel> {
    check_level(level)?;
    Ok(&levels()[level - 1])
}

/// Every convolution a complete weight file must provide: the level-5
/// encoder (a superset of the others) followed by decoders 1 through 5.
pub fn architecture() -> impl Iterator<Item = &'static ConvSpec> {
    let enc = levels()[MAX_LEVEL - 1].encoder.iter();
    let decs = levels().iter().flat_map(|l| l.decoder.iter());
    enc.chain(decs).filter_map(|l| match l {
        Layer::Conv(c) => Some(c),
        _ => None,
    })
}

fn apply_conv<T: Scalar>(x: &FeatureMap<T>, spec: &ConvSpec, weights: &WeightStore<T>) -> Result<FeatureMap<T>> {
    let kernel = weights.conv(spec)?;
    let mut y = tensor::conv2d(x, kernel, 1, Padding::Reflect(spec.kernel / 2))?;
    if spec.relu {
        tensor::relu_in_place(&mut y);
    }
    Ok(y)
}

fn check_image<T: Scalar>(image: &FeatureMap<T>, level: usize) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape("encode", "3-channel image", image.shape_str()));
    }
    let m = downsampling(level);
    if image.height() == 0 || image.width() == 0 || !image.height().is_multiple_of(m) || !image.width().is_multiple_of(m) {
        return Err(Error::shape(
            "encode",
            format!("non-empty height and width divisible by {m} for level {level}"),
            image.shape_str(),
        ));
    }
    Ok(())
}

/// `reluX_1` features for X = 1..=`max_level`, from a single forward pass.
pub fn encode_taps<T: Scalar>(image: &FeatureMap<T>, max_level: usize, weights: &WeightStore<T>) -> Result<Vec<FeatureMap<T>>> {
    let spec = level_spec(max_level)?;
    check_image(image, max_level)?;
    let mut taps = Vec::with_capacity(max_level);
    let mut x = image.clone();
    for layer in spec.encoder() {
        x = match layer {
            Layer::Conv(c) => {
                let y = apply_conv(&x, c, weights)?;
                if c.name.ends_with("_1") {
                    taps.push(y.clone());
                }
                y
            }
            Layer::Pool => tensor::max_pool2d(&x, 2, 2)?,
            Layer::Upsample => unreachable!("encoders never upsample"),
        };
    }
    debug_assert_eq!(taps.len(), max_level);
    Ok(taps)
}

/// Image (3 x H x W, normalized) to `reluX_1` features.
pub fn encode<T: Scalar>(image: &FeatureMap<T>, level: usize, weights: &WeightStore<T>) -> Result<FeatureMap<T>> {
    Ok(encode_taps(image, level, weights)?.pop().expect("at least one tap"))
}

/// `reluX_1` features back to a 3-channel image. No output clamping.
pub fn decode<T: Scalar>(feature: &FeatureMap<T>, level: usize, weights: &WeightStore<T>) -> Result<FeatureMap<T>> {
    let spec = level_spec(level)?;
    if feature.channels() != spec.channels() {
        return Err(Error::shape(
            "decode",
            format!("{} channels for level {level}", spec.channels()),
            feature.shape_str(),
        ));
    }
    let mut x = feature.clone();
    for layer in spec.decoder() {
        x = match layer {
            Layer::Conv(c) => apply_conv(&x, c, weights)?,
            Layer::Upsample => tensor::upsample_nearest(&x, 2)?,
            Layer::Pool => unreachable!("decoders never pool"),
        };
    }
    Ok(x)
}

fn mean_squared_error<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / n
}

/// Decoder training objective used as a diagnostic: per-element mean squared
/// pixel error plus `lambda` times the mean squared `reluX_1` feature error.
pub fn reconstruction_loss<T: Scalar>(
    original: &FeatureMap<T>,
    reconstructed: &FeatureMap<T>,
    level: usize,
    weights: &WeightStore<T>,
    lambda: T,
) -> Result<T> {
    if !original.same_dims(reconstructed) {
        return Err(Error::shape("reconstruction_loss", original.shape_str(), reconstructed.shape_str()));
    }
    let pixel = mean_squared_error(original, reconstructed);
    let feature = if lambda == T::zero() {
        0.0
    } else {
        mean_squared_error(&encode(original, level, weights)?, &encode(reconstructed, level, weights)?)
    };
    Ok(T::from_f64_lossy(pixel + lambda.to_f64_lossy() * feature))
}

/// Default weight of the feature term.
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[cfg(test)]
mod tests {
    use super::*;

    fn convs(layers: &[Layer]) -> Vec<&ConvSpec> {
        layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn decoder_mirrors_encoder() {
        for level in 1..=5 {
            let spec = CodecLevel::new(level).unwrap();
            let enc = convs(spec.encoder());
            let dec = convs(spec.decoder());
            assert_eq!(enc.len(), dec.len());
            for (e, d) in enc.iter().rev().zip(&dec) {
                assert_eq!((e.cin, e.cout), (d.cout, d.cin));
            }
            assert!(dec[..dec.len() - 1].iter().all(|c| c.relu));
            assert!(!dec.last().unwrap().relu);
            assert_eq!(dec.last().unwrap().cout, 3);
            let pools = spec.encoder().iter().filter(|l| **l == Layer::Pool).count();
            let ups = spec.decoder().iter().filter(|l| **l == Layer::Upsample).count();
            assert_eq!(pools, level - 1);
            assert_eq!(ups, pools);
            assert_eq!(enc.last().unwrap().cout, spec.channels());
        }
    }

    #[test]
    fn architecture_names() {
        let names: Vec<_> = architecture().map(|c| c.name.as_str()).collect();
        assert_eq!(names.len(), 13 + 1 + 3 + 5 + 9 + 13);
        assert!(names.contains(&"enc.conv3_4"));
        assert!(names.contains(&"dec5.conv12"));
        assert!(!names.contains(&"dec5.conv13"));
        assert!(level_spec(0).is_err() && level_spec(6).is_err());
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        let w = WeightStore::<f32>::random(0);
        let img = FeatureMap::zeros(3, 12, 16);
        assert!(encode(&img, 3, &w).is_ok());
        assert!(encode(&img, 4, &w).is_err());
        assert!(encode(&FeatureMap::zeros(1, 16, 16), 1, &w).is_err());
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let w = WeightStore::<f32>::random(0);
        assert!(decode(&FeatureMap::zeros(128, 4, 4), 1, &w).is_err());
    }

    #[test]
    fn loss_examples() {
        let w = WeightStore::<f32>::random(5);
        let a = FeatureMap::from_fn(3, 8, 8, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f32 / 7.0);
        let b = a.map(|v| v * 0.5);
        assert_eq!(reconstruction_loss(&a, &a, 2, &w, 1.0).unwrap(), 0.0);
        let mse = a.data().iter().map(|v| (v * 0.5) as f64 * (v * 0.5) as f64).sum::<f64>() / a.data().len() as f64;
        let plain = reconstruction_loss(&a, &b, 2, &w, 0.0).unwrap();
        assert!((plain as f64 - mse).abs() < 1e-7);
        assert!(reconstruction_loss(&a, &b, 2, &w, 1.0).unwrap() > plain);
        assert!(reconstruction_loss(&a, &FeatureMap::zeros(3, 8, 16), 2, &w, 1.0).is_err());
    }
}
