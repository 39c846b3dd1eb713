//! Independent naive-loop reference implementations and fixture generators
//! shared by the integration tests. Everything here computes in f64 and
//! deliberately avoids the library's own kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texture_reformer::{FeatureMap, Kernel4D, Padding, Scalar};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map<T: Scalar>(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> FeatureMap<T> {
    FeatureMap::from_fn(c, h, w, |_, _, _| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

pub fn random_kernel<T: Scalar>(rng: &mut impl Rng, o: usize, i: usize, kh: usize, kw: usize, bias: bool) -> Kernel4D<T> {
    let k = Kernel4D::from_fn(o, i, kh, kw, |_, _, _, _| T::from_f64_lossy(rng.gen_range(-1.0..1.0)));
    if bias {
        k.with_bias((0..o).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect())
            .unwrap()
    } else {
        k
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Value of `x` at a possibly out-of-range position under `padding`.
fn padded_at<T: Scalar>(x: &FeatureMap<T>, c: usize, y: isize, xx: isize, padding: Padding) -> f64 {
    let (h, w) = (x.height() as isize, x.width() as isize);
    let inside = (0..h).contains(&y) && (0..w).contains(&xx);
    match padding {
        _ if inside => x.at(c, y as usize, xx as usize).to_f64_lossy(),
        Padding::Valid | Padding::Zero(_) => 0.0,
        Padding::Reflect(_) => x
            .at(c, reflect(y, x.height()), reflect(xx, x.width()))
            .to_f64_lossy(),
    }
}

pub fn padding_amount(padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Zero(p) | Padding::Reflect(p) => p,
    }
}

/// Cross-correlation written as six nested loops.
pub fn conv2d_oracle<T: Scalar>(x: &FeatureMap<T>, k: &Kernel4D<T>, stride: usize, padding: Padding) -> Vec<f64> {
    let (o, i, kh, kw) = k.dims();
    let pad = padding_amount(padding);
    let out_h = (x.height() + 2 * pad - kh) / stride + 1;
    let out_w = (x.width() + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * out_h * out_w];
    for f in 0..o {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = k.bias().map_or(0.0, |b| b[f].to_f64_lossy());
                for c in 0..i {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let y = (oy * stride + dy) as isize - pad as isize;
                            let xx = (ox * stride + dx) as isize - pad as isize;
                            acc += k.at(f, c, dy, dx).to_f64_lossy() * padded_at(x, c, y, xx, padding);
                        }
                    }
                }
                out[(f * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    out
}

/// Transposed convolution as an explicit scatter of weighted filters.
pub fn conv_transpose2d_oracle<T: Scalar>(y: &FeatureMap<T>, k: &Kernel4D<T>, stride: usize) -> (usize, usize, Vec<f64>) {
    let (o, i, kh, kw) = k.dims();
    assert_eq!(o, y.channels());
    let out_h = (y.height() - 1) * stride + kh;
    let out_w = (y.width() - 1) * stride + kw;
    let mut out = vec![0.0; i * out_h * out_w];
    for f in 0..o {
        for r in 0..y.height() {
            for c in 0..y.width() {
                let v = y.at(f, r, c).to_f64_lossy();
                for ch in 0..i {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            out[(ch * out_h + r * stride + dy) * out_w + c * stride + dx] += v * k.at(f, ch, dy, dx).to_f64_lossy();
                        }
                    }
                }
            }
        }
    }
    (out_h, out_w, out)
}

pub fn max_pool_oracle<T: Scalar>(x: &FeatureMap<T>, size: usize, stride: usize) -> Vec<f64> {
    let out_h = (x.height() - size) / stride + 1;
    let out_w = (x.width() - size) / stride + 1;
    let mut out = Vec::new();
    for c in 0..x.channels() {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..size {
                    for dx in 0..size {
                        m = m.max(x.at(c, oy * stride + dy, ox * stride + dx).to_f64_lossy());
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Population mean and standard deviation of each channel.
pub fn stats_oracle<T: Scalar>(x: &FeatureMap<T>) -> Vec<(f64, f64)> {
    (0..x.channels())
        .map(|c| {
            let v: Vec<f64> = x.channel(c).iter().map(|t| t.to_f64_lossy()).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Largest elementwise error relative to the reference's magnitude.
pub fn max_rel_err<T: Scalar>(got: &[T], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    got.iter()
        .zip(want)
        .map(|(g, w)| (g.to_f64_lossy() - w).abs() / scale)
        .fold(0.0, f64::max)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy()).sum()
}

/// Cosine-similarity argmax over the `p x p` windows of `source` for every
/// stride-`s` window of `target`, skipping zero-norm source windows and
/// breaking ties toward the lowest index.
pub fn cosine_argmax_oracle<T: Scalar>(source: &FeatureMap<T>, target: &FeatureMap<T>, p: usize, s: usize) -> (usize, usize, Vec<usize>) {
    let window = |m: &FeatureMap<T>, y0: usize, x0: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(m.channels() * p * p);
        for c in 0..m.channels() {
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    v.push(m.at(c, y, x).to_f64_lossy());
                }
            }
        }
        v
    };
    let grid = |m: &FeatureMap<T>| ((m.height() - p) / s + 1, (m.width() - p) / s + 1);
    let (sr, sc) = grid(source);
    let patches: Vec<Vec<f64>> = (0..sr * sc).map(|i| window(source, (i / sc) * s, (i % sc) * s)).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (tr, tc) = grid(target);
    let mut out = Vec::with_capacity(tr * tc);
    for r in 0..tr {
        for c in 0..tc {
            let t = window(target, r * s, c * s);
            let tn = norm(&t);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (i, patch) in patches.iter().enumerate() {
                let pn = norm(patch);
                if pn <= 1e-8 {
                    continue;
                }
                let cos = if tn > 0.0 {
                    patch.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / (pn * tn)
                } else {
                    0.0
                };
                if cos > best.0 {
                    best = (cos, i);
                }
            }
            out.push(best.1);
        }
    }
    (tr, tc, out)
}

/// A colorful stripe-and-checker texture in normalized form.
pub fn textured<T: Scalar>(size: usize, seed: u64) -> FeatureMap<T> {
    let mut r = rng(seed);
    let (fx, fy, phase) = (r.gen_range(0.2..0.6), r.gen_range(0.2..0.6), r.gen_range(0.0..6.0));
    let img = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let (x, y) = (x as f64, y as f64);
        let wave = ((fx * x + phase).sin() * (fy * y).cos() + 1.0) * 0.5;
        let check = if ((x as usize / 8) + (y as usize / 8)).is_multiple_of(2) { 0.8 } else { 0.2 };
        let noise: f64 = r.gen_range(0.0..0.15);
        image::Rgb([
            (255.0 * (0.6 * wave + 0.25 * check + noise).min(1.0)) as u8,
            (255.0 * (0.3 + 0.5 * check * wave).min(1.0)) as u8,
            (255.0 * (1.0 - wave * 0.7 + noise).min(1.0)) as u8,
        ])
    });
    texture_reformer::imaging::normalize_rgb8(&img)
}

/// A two-label painted map: `vertical` splits left/right, otherwise a disc.
pub fn two_label_map<T: Scalar>(size: usize, vertical: bool) -> FeatureMap<T> {
    let (a, b) = (image::Rgb([230, 40, 40]), image::Rgb([40, 60, 220]));
    let c = size as f64 / 2.0;
    let img = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let inside = if vertical {
            (x as usize) < size / 2
        } else {
            (x as f64 - c).powi(2) + (y as f64 - c).powi(2) < (size as f64 / 3.0).powi(2)
        };
        if inside {
            a
        } else {
            b
        }
    });
    texture_reformer::imaging::normalize_rgb8(&img)
}
