//! PNG I/O, ImageNet-style normalization, semantic-map parsing and the
//! resampling helpers the pipeline needs between feature levels.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Default color snapping radius (Euclidean, unit-range RGB).
pub const DEFAULT_SEMANTIC_TOLERANCE: f64 = 16.0 / 255.0;
pub const MAX_LABELS: usize = 64;

/// 8-bit RGB to a normalized `3 x H x W` feature.
pub fn normalize_rgb8<T: Scalar>(img: &RgbImage) -> FeatureMap<T> {
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    FeatureMap::from_fn(3, h as usize, w as usize, |c, y, x| {
        let v = raw[(y * w as usize + x) * 3 + c] as f64 / 255.0;
        T::from_f64_lossy((v - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
    })
}

/// Normalized feature back to unit-range RGB (no clamping).
pub fn to_unit_rgb<T: Scalar>(image: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    check_rgb(image, "to_unit_rgb")?;
    let mut out = image.clone();
    for c in 0..3 {
        let (m, s) = (T::from_f64_lossy(IMAGENET_MEAN[c]), T::from_f64_lossy(IMAGENET_STD[c]));
        out.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(out)
}

/// De-normalizes, clamps to `[0, 1]` and quantizes to 8 bits.
pub fn denormalize_to_rgb8<T: Scalar>(image: &FeatureMap<T>) -> Result<RgbImage> {
    check_rgb(image, "denormalize_to_rgb8")?;
    let (_, h, w) = image.dims();
    let mut raw = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.at(c, y, x).to_f64_lossy() * IMAGENET_STD[c] + IMAGENET_MEAN[c];
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                raw.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for image"))
}

fn check_rgb<T: Scalar>(image: &FeatureMap<T>, op: &'static str) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape(op, "3-channel image", image.shape_str()));
    }
    Ok(())
}

fn into_rgb8(img: DynamicImage) -> Result<RgbImage> {
    match img.color() {
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::Rgb16 | ColorType::Rgba16 | ColorType::Rgb32F | ColorType::Rgba32F => {
            Ok(img.into_rgb8())
        }
        other => Err(Error::NotRgb(format!("{other:?}"))),
    }
}

pub fn decode_rgb8(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    into_rgb8(img)
}

pub fn load_rgb8(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb8(&bytes).map_err(|e| match e {
        Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// Reads a PNG as a normalized `3 x H x W` feature.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureMap<T>> {
    load_rgb8(path).map(|img| normalize_rgb8(&img))
}

pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<FeatureMap<T>> {
    decode_rgb8(bytes).map(|img| normalize_rgb8(&img))
}

pub fn encode_rgb8_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn encode_png<T: Scalar>(image: &FeatureMap<T>) -> Result<Vec<u8>> {
    encode_rgb8_png(&denormalize_to_rgb8(image)?)
}

/// Writes a normalized feature as an 8-bit PNG.
pub fn save_image<T: Scalar>(image: &FeatureMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Center-crops to the largest dims divisible by `multiple` (a power of two
/// up to 16). Offsets are `floor((dim mod multiple) / 2)`.
pub fn align_dims<T: Scalar>(image: &FeatureMap<T>, multiple: usize) -> Result<FeatureMap<T>> {
    if !multiple.is_power_of_two() || multiple > 16 {
        return Err(Error::invalid("align_dims", format!("multiple {multiple} is not a power of two <= 16")));
    }
    let (_, h, w) = image.dims();
    if h < multiple || w < multiple {
        return Err(Error::shape("align_dims", format!("image at least {multiple}x{multiple}"), image.shape_str()));
    }
    let (dh, dw) = (h % multiple, w % multiple);
    if dh == 0 && dw == 0 {
        return Ok(image.clone());
    }
    image.crop(dh / 2, dw / 2, h - dh, w - dw)
}

#[inline]
fn nearest_src(i: usize, from: usize, to: usize) -> usize {
    (i * from / to).min(from - 1)
}

/// Nearest-neighbour resampling to `height x width`.
pub fn resize_nearest<T: Scalar>(image: &FeatureMap<T>, height: usize, width: usize) -> FeatureMap<T> {
    let (c, h, w) = image.dims();
    FeatureMap::from_fn(c, height, width, |ch, y, x| image.at(ch, nearest_src(y, h, height), nearest_src(x, w, width)))
}

/// Per-pixel label ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("LabelGrid::new", format!("{height}x{width}"), labels.len()));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = nearest_src(y, self.height, height);
            for x in 0..width {
                labels.push(self.labels[sy * self.width + nearest_src(x, self.width, width)]);
            }
        }
        Self { height, width, labels }
    }

    /// Positions of each label id, indexed by label.
    pub fn positions(&self) -> Vec<Vec<usize>> {
        let n = self.labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut out = vec![Vec::new(); n];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }
}

/// Label image plus palette. Palette order is lexicographic RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    grid: LabelGrid,
    palette: Vec<[u8; 3]>,
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 255.0;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn nearest_color(palette: &[[u8; 3]], c: [u8; 3]) -> (usize, f64) {
    palette
        .iter()
        .enumerate()
        .map(|(i, &p)| (i, color_distance(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Clusters the colors of a painted label image.
///
/// Colors are visited from most to least frequent; each one either joins the
/// nearest existing cluster center within `tolerance` (unit-range Euclidean
/// RGB) or starts a new cluster. Pixels are then assigned to their nearest
/// center.
pub fn parse_semantic_map(img: &RgbImage, tolerance: f64) -> Result<SemanticMap> {
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    for p in img.pixels() {
        *counts.entry(p.0).or_default() += 1;
    }
    let mut colors: Vec<([u8; 3], usize)> = counts.into_iter().collect();
    colors.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut centers: Vec<[u8; 3]> = Vec::new();
    for &(color, _) in &colors {
        let (_, d) = nearest_color(&centers, color);
        if d > tolerance {
            centers.push(color);
            if centers.len() > MAX_LABELS {
                return Err(Error::TooManyLabels(count_clusters(&colors, tolerance)));
            }
        }
    }
    if centers.is_empty() {
        return Err(Error::invalid("parse_semantic_map", "empty image"));
    }
    centers.sort_unstable();
    let lookup: HashMap<[u8; 3], u16> = colors
        .iter()
        .map(|&(c, _)| (c, nearest_color(&centers, c).0 as u16))
        .collect();
    let labels = img.pixels().map(|p| lookup[&p.0]).collect();
    Ok(SemanticMap {
        grid: LabelGrid::new(img.height() as usize, img.width() as usize, labels)?,
        palette: centers,
    })
}

fn count_clusters(colors: &[([u8; 3], usize)], tolerance: f64) -> usize {
    let mut centers: Vec<[u8; 3]> = Vec::new();
    for &(color, _) in colors {
        if nearest_color(&centers, color).1 > tolerance {
            centers.push(color);
        }
    }
    centers.len()
}

impl SemanticMap {
    pub fn palette(&self) -> &[[u8; 3]] {
        &self.palette
    }

    pub fn label_count(&self) -> usize {
        self.palette.len()
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.grid
    }

    pub fn mask(&self, label: u16) -> Vec<bool> {
        self.grid.labels.iter().map(|&l| l == label).collect()
    }

    /// Paints every pixel with its palette color.
    pub fn render(&self) -> RgbImage {
        let raw = self.grid.labels.iter().flat_map(|&l| self.palette[l as usize]).collect();
        RgbImage::from_raw(self.grid.width as u32, self.grid.height as u32, raw).expect("buffer sized for image")
    }

    /// Re-labels against a shared palette so equal colors get equal ids in
    /// both maps. Returns `(self, other)` grids.
    pub fn joint_labels(&self, other: &SemanticMap) -> (LabelGrid, LabelGrid) {
        let mut palette: Vec<[u8; 3]> = self.palette.iter().chain(&other.palette).copied().collect();
        palette.sort_unstable();
        palette.dedup();
        let relabel = |m: &SemanticMap| {
            let ids: Vec<u16> = m
                .palette
                .iter()
                .map(|c| palette.binary_search(c).expect("color in union") as u16)
                .collect();
            LabelGrid {
                height: m.grid.height,
                width: m.grid.width,
                labels: m.grid.labels.iter().map(|&l| ids[l as usize]).collect(),
            }
        };
        (relabel(self), relabel(other))
    }
}

/// Mean structural similarity over RGB channels in unit range (11x11
/// Gaussian window, sigma 1.5, valid region only).
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::shape("ssim", format!("{:?}", a.dimensions()), format!("{:?}", b.dimensions())));
    }
    const WIN: usize = 11;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < WIN || h < WIN {
        return Err(Error::invalid("ssim", format!("images must be at least {WIN}x{WIN}")));
    }
    let kernel: Vec<f64> = {
        let g: Vec<f64> = (0..WIN)
            .map(|i| {
                let d = i as f64 - (WIN / 2) as f64;
                (-d * d / (2.0 * 1.5 * 1.5)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    };
    let blur = |plane: &[f64]| -> Vec<f64> {
        let ow = w - WIN + 1;
        let oh = h - WIN + 1;
        let mut tmp = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                tmp[y * ow + x] = (0..WIN).map(|k| kernel[k] * plane[y * w + x + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..WIN).map(|k| kernel[k] * tmp[(y + k) * ow + x]).sum();
            }
        }
        out
    };
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.pixels().map(|p| p.0[c] as f64 / 255.0).collect();
        let pb: Vec<f64> = b.pixels().map(|p| p.0[c] as f64 / 255.0).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (ma, mb) = (blur(&pa), blur(&pb));
        let (saa, sbb, sab) = (blur(&prod(&pa, &pa)), blur(&prod(&pb, &pb)), blur(&prod(&pa, &pb)));
        let n = ma.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (mx, my) = (ma[i], mb[i]);
                let (vx, vy, cxy) = (saa[i] - mx * mx, sbb[i] - my * my, sab[i] - mx * my);
                ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn white_normalizes_to_unit_before_standardization() {
        let img = RgbImage::from_pixel(2, 2, Rgb([255, 255, 255]));
        let f: FeatureMap<f64> = normalize_rgb8(&img);
        let unit = to_unit_rgb(&f).unwrap();
        assert!(unit.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hand_computed_normalization() {
        let img = RgbImage::from_raw(2, 1, vec![0, 128, 255, 10, 20, 30]).unwrap();
        let f: FeatureMap<f64> = normalize_rgb8(&img);
        assert!((f.at(0, 0, 0) - (0.0 - 0.485) / 0.229).abs() < 1e-12);
        assert!((f.at(1, 0, 0) - (128.0 / 255.0 - 0.456) / 0.224).abs() < 1e-12);
        assert!((f.at(2, 0, 1) - (30.0 / 255.0 - 0.406) / 0.225).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_is_mean_gray_and_clamps() {
        let img = denormalize_to_rgb8(&FeatureMap::<f32>::zeros(3, 1, 1)).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [124, 116, 104]);
        let hot = denormalize_to_rgb8(&FeatureMap::<f32>::filled(3, 1, 1, 1e3)).unwrap();
        assert_eq!(hot.get_pixel(0, 0).0, [255, 255, 255]);
    }

    #[test]
    fn quantization_round_trip_is_exact() {
        let raw: Vec<u8> = (0..=255u8).flat_map(|v| [v, 255 - v, v / 2]).collect();
        let img = RgbImage::from_raw(16, 16, raw).unwrap();
        let f32_back = denormalize_to_rgb8(&normalize_rgb8::<f32>(&img)).unwrap();
        assert_eq!(f32_back, img);
        let png = encode_rgb8_png(&img).unwrap();
        assert_eq!(decode_rgb8(&png).unwrap(), img);
    }

    #[test]
    fn grayscale_is_rejected() {
        let gray = image::GrayImage::from_pixel(2, 2, image::Luma([9]));
        let mut buf = Cursor::new(Vec::new());
        gray.write_to(&mut buf, ImageFormat::Png).unwrap();
        assert!(matches!(decode_rgb8(buf.get_ref()), Err(Error::NotRgb(_))));
        assert!(matches!(decode_rgb8(b"not a png"), Err(Error::Image(_))));
    }

    #[test]
    fn align_examples() {
        let f = FeatureMap::<f32>::from_fn(3, 515, 513, |c, y, x| (c + y * 1000 + x) as f32);
        let a = align_dims(&f, 16).unwrap();
        assert_eq!(a.dims(), (3, 512, 512));
        assert_eq!(a.at(0, 0, 0), f.at(0, 1, 0));
        let g = FeatureMap::<f32>::zeros(3, 32, 48);
        assert_eq!(align_dims(&g, 16).unwrap(), g);
        assert!(align_dims(&g, 12).is_err());
        assert!(align_dims(&g, 32).is_err());
        assert!(align_dims(&FeatureMap::<f32>::zeros(3, 8, 40), 16).is_err());
    }

    #[test]
    fn two_color_map_exact_masks() {
        let mut img = RgbImage::from_pixel(4, 3, Rgb([200, 10, 10]));
        img.put_pixel(1, 1, Rgb([0, 0, 255]));
        let m = parse_semantic_map(&img, 0.0).unwrap();
        assert_eq!(m.palette(), &[[0, 0, 255], [200, 10, 10]]);
        assert_eq!(m.mask(0).iter().filter(|&&b| b).count(), 1);
        assert!(m.mask(0)[4 + 1]);
        assert_eq!(m.render(), img);
        let uniform = parse_semantic_map(&RgbImage::from_pixel(3, 3, Rgb([1, 2, 3])), DEFAULT_SEMANTIC_TOLERANCE).unwrap();
        assert_eq!(uniform.label_count(), 1);
    }

    #[test]
    fn too_many_labels() {
        let raw: Vec<u8> = (0..100u32).flat_map(|i| [(i * 2) as u8, 0, 0]).collect();
        let img = RgbImage::from_raw(10, 10, raw).unwrap();
        assert!(matches!(parse_semantic_map(&img, 0.0), Err(Error::TooManyLabels(100))));
        // a generous tolerance merges the ramp
        assert!(parse_semantic_map(&img, 0.5).unwrap().label_count() < 64);
    }

    #[test]
    fn joint_labels_share_ids_by_color() {
        let mut a = RgbImage::from_pixel(2, 1, Rgb([9, 9, 9]));
        a.put_pixel(1, 0, Rgb([200, 0, 0]));
        let b = RgbImage::from_pixel(2, 1, Rgb([200, 0, 0]));
        let (ma, mb) = (parse_semantic_map(&a, 0.0).unwrap(), parse_semantic_map(&b, 0.0).unwrap());
        let (ga, gb) = ma.joint_labels(&mb);
        assert_eq!(ga.labels(), &[0, 1]);
        assert_eq!(gb.labels(), &[1, 1]);
    }

    #[test]
    fn resize_and_ssim() {
        let f = FeatureMap::<f32>::from_fn(1, 2, 2, |_, y, x| (y * 2 + x) as f32);
        let up = resize_nearest(&f, 4, 4);
        assert_eq!(up.at(0, 3, 1), 2.0);
        let down = resize_nearest(&up, 2, 2);
        assert_eq!(down, f);
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 16) as u8, (y * 16) as u8, 7]));
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let inv = RgbImage::from_fn(16, 16, |x, y| Rgb([255 - (x * 16) as u8, (y * 16) as u8, 7]));
        assert!(ssim(&img, &inv).unwrap() < 0.9);
    }
}
