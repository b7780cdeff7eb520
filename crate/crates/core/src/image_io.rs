//! Query-image preprocessing and anomaly-map output.
//!
//! Resizing uses separable bicubic convolution with the Keys kernel at
//! `a = -0.5` (Catmull-Rom). Output pixel `o` samples source coordinate
//! `(o + 0.5) * in / out - 0.5`; taps outside the image clamp to the edge.
//! Resized values are clamped to `[0, 1]` before channel normalization.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scorer::AnomalyMap;
use crate::tensor::Tensor;

/// A preprocessed image, channels first: `[3, size, size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub pixels: Tensor,
    /// Height and width of the decoded source image.
    pub original_height: usize,
    pub original_width: usize,
}

impl ImageTensor {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// 8-bit RGB pixels, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "RGB buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        RgbImage { width, height, data }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Writes a binary PPM (P6).
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Decodes PNG or PPM bytes. Grayscale and alpha variants are expanded or
/// dropped to RGB; 16-bit and floating-point images are rejected.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    use image::DynamicImage;
    let img = image::load_from_memory(bytes).map_err(|e| Error::Input(format!("decode: {e}")))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
            img.to_rgb8()
        }
        other => {
            return Err(Error::Input(format!(
                "unsupported pixel format {:?}; expected 8-bit RGB",
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    RgbImage::new(w as usize, h as usize, rgb.into_raw())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb(&bytes).map_err(|e| match e {
        Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Loads a ground-truth mask; any nonzero luma marks a defect pixel.
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Input(format!("{}: decode: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw().into_iter().map(|v| v > 0).collect()))
}

pub fn preprocess(bytes: &[u8], config: &ModelConfig) -> Result<ImageTensor> {
    preprocess_rgb(&decode_rgb(bytes)?, config)
}

pub fn preprocess_file(path: &Path, config: &ModelConfig) -> Result<ImageTensor> {
    preprocess_rgb(&load_rgb(path)?, config)
}

/// Resizes to `image_size²`, scales to `[0, 1]`, then normalizes each
/// channel with the configured mean and std.
pub fn preprocess_rgb(img: &RgbImage, config: &ModelConfig) -> Result<ImageTensor> {
    let s = config.image_size;
    let mut planes = Vec::with_capacity(3 * s * s);
    for ch in 0..3 {
        let plane: Vec<f32> = img.data[ch..].iter().step_by(3).map(|&v| v as f32 / 255.0).collect();
        let resized = if img.width == s && img.height == s {
            plane
        } else {
            resize_bicubic(&plane, img.height, img.width, s, s)
        };
        let (mean, std) = (config.image_mean[ch], config.image_std[ch]);
        planes.extend(resized.into_iter().map(|v| (v.clamp(0.0, 1.0) - mean) / std));
    }
    Ok(ImageTensor {
        pixels: Tensor::new(vec![3, s, s], planes)?,
        original_height: img.height,
        original_width: img.width,
    })
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Precomputed 4-tap filters along one axis.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let pos = base as i64 - 1 + k as i64;
                idx[k] = pos.clamp(0, in_len as i64 - 1) as usize;
                w[k] = cubic_weight(t - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resize of a single-channel plane.
pub fn resize_bicubic(src: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let xt = axis_taps(in_w, out_w);
    let yt = axis_taps(in_h, out_h);
    let mut horiz = vec![0f64; in_h * out_w];
    for y in 0..in_h {
        let row = &src[y * in_w..(y + 1) * in_w];
        for (x, (idx, w)) in xt.iter().enumerate() {
            horiz[y * out_w + x] = (0..4).map(|k| row[idx[k]] as f64 * w[k]).sum();
        }
    }
    let mut out = vec![0f32; out_h * out_w];
    for (y, (idx, w)) in yt.iter().enumerate() {
        for x in 0..out_w {
            let v: f64 = (0..4).map(|k| horiz[idx[k] * out_w + x] * w[k]).sum();
            out[y * out_w + x] = v as f32;
        }
    }
    out
}

/// Writes the map as a 16-bit binary PGM (`P5`, maxval 65535, big-endian
/// samples), each value `round(score * 65535)`.
pub fn render_map(map: &AnomalyMap, path: &Path) -> Result<()> {
    let bytes = encode_pgm16(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm16(map: &AnomalyMap) -> Result<Vec<u8>> {
    check_unit_range(map)?;
    let (h, w) = (map.height(), map.width());
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in map.scores.data() {
        let q = (v as f64 * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Writes `u32 height`, `u32 width` (little-endian) then the scores as
/// little-endian `f32`, row-major.
pub fn write_raw_map(map: &AnomalyMap, path: &Path) -> Result<()> {
    check_unit_range(map)?;
    let mut out = Vec::with_capacity(8 + 4 * map.scores.len());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.scores.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a grid written by [`write_raw_map`] as an `[h, w]` tensor.
pub fn read_raw_map(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            needed: 8 - bytes.len() as u64,
        });
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let need = 8 + 4 * h * w;
    if bytes.len() != need {
        return Err(Error::SizeMismatch {
            name: path.display().to_string(),
            offset: 8,
            expected: (need - 8) as u64,
            actual: (bytes.len() - 8) as u64,
        });
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![h, w], data)
}

fn check_unit_range(map: &AnomalyMap) -> Result<()> {
    match map.scores.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Input(format!(
            "map value {} at index {i} lies outside [0, 1]",
            map.scores.data()[i]
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize) -> ModelConfig {
        ModelConfig {
            image_size: size,
            patch_size: size,
            ..ModelConfig::tiny()
        }
    }

    fn png_bytes(img: &RgbImage) -> Vec<u8> {
        let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone()).unwrap();
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn identity_resize_is_plain_scaling() {
        let mut img = RgbImage::filled(4, 4, [0, 0, 0]);
        for y in 0..4 {
            for x in 0..4 {
                img.put(x, y, [(x * 60) as u8, (y * 50) as u8, 255]);
            }
        }
        let t = preprocess(&png_bytes(&img), &cfg(4)).unwrap();
        assert_eq!(t.pixels.shape(), &[3, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(t.pixels.data()[y * 4 + x], (x * 60) as f32 / 255.0);
                assert_eq!(t.pixels.data()[16 + y * 4 + x], (y * 50) as f32 / 255.0);
            }
        }
    }

    #[test]
    fn constant_gray_stays_constant() {
        let img = RgbImage::filled(7, 5, [128, 128, 128]);
        let c = ModelConfig {
            image_size: 6,
            patch_size: 3,
            image_mean: [0.5, 0.4, 0.3],
            image_std: [0.2, 0.3, 0.4],
            ..ModelConfig::tiny()
        };
        let t = preprocess_rgb(&img, &c).unwrap();
        for ch in 0..3 {
            let plane = &t.pixels.data()[ch * 36..(ch + 1) * 36];
            let want = (128.0 / 255.0 - c.image_mean[ch]) / c.image_std[ch];
            assert!(plane.iter().all(|v| (v - want).abs() < 1e-6), "channel {ch}");
        }
        assert_eq!((t.original_height, t.original_width), (5, 7));
    }

    #[test]
    fn ppm_decodes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = RgbImage::filled(3, 2, [10, 20, 30]);
        img.save_ppm(&p).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), img);
    }

    #[test]
    fn rejects_garbage_and_sixteen_bit() {
        assert!(matches!(decode_rgb(b"not an image"), Err(Error::Input(_))));
        let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(1, 1, vec![1u16, 2, 3]).unwrap();
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png).unwrap();
        assert!(matches!(decode_rgb(&out.into_inner()), Err(Error::Input(_))));
    }

    /// Direct 4×4-neighbourhood evaluation, written independently of the
    /// separable implementation.
    fn bicubic_oracle(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        fn kernel(x: f64) -> f64 {
            let x = x.abs();
            if x < 1.0 {
                1.5 * x * x * x - 2.5 * x * x + 1.0
            } else if x < 2.0 {
                -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
            } else {
                0.0
            }
        }
        let mut out = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                let mut acc = 0.0;
                for j in (sy.floor() as i64 - 1)..=(sy.floor() as i64 + 2) {
                    for i in (sx.floor() as i64 - 1)..=(sx.floor() as i64 + 2) {
                        let yy = j.clamp(0, h as i64 - 1) as usize;
                        let xx = i.clamp(0, w as i64 - 1) as usize;
                        acc += src[yy * w + xx] as f64 * kernel(sy - j as f64) * kernel(sx - i as f64);
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn checkerboard_downscale_matches_oracle() {
        let (h, w) = (16, 16);
        let src: Vec<f32> = (0..h * w)
            .map(|i| if ((i / w) / 2 + (i % w) / 2) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let got = resize_bicubic(&src, h, w, 8, 8);
        let want = bicubic_oracle(&src, h, w, 8, 8);
        for (g, o) in got.iter().zip(&want) {
            assert!((*g as f64 - o).abs() < 1e-4, "{g} vs {o}");
        }
        let up = resize_bicubic(&src, h, w, 21, 27);
        let want = bicubic_oracle(&src, h, w, 21, 27);
        for (g, o) in up.iter().zip(&want) {
            assert!((*g as f64 - o).abs() < 1e-4);
        }
    }

    fn map_of(h: usize, w: usize, v: f32) -> AnomalyMap {
        AnomalyMap {
            scores: Tensor::filled(&[h, w], v),
            grid: (1, 1),
        }
    }

    #[test]
    fn pgm_extremes() {
        let zero = encode_pgm16(&map_of(2, 3, 0.0)).unwrap();
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&zero[..header.len()], header);
        assert!(zero[header.len()..].iter().all(|&b| b == 0));
        let one = encode_pgm16(&map_of(2, 3, 1.0)).unwrap();
        assert!(one[header.len()..].iter().all(|&b| b == 0xFF));
        assert!(encode_pgm16(&map_of(1, 1, 1.5)).is_err());
    }

    #[test]
    fn raw_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        let scores = Tensor::matrix(2, 3, vec![0.0, 0.1, 0.2, 0.3, 1.0 / 3.0, 1.0]).unwrap();
        let map = AnomalyMap { scores: scores.clone(), grid: (1, 1) };
        write_raw_map(&map, &p).unwrap();
        let back = read_raw_map(&p).unwrap();
        assert_eq!(back, scores);
        assert_eq!(fs::metadata(&p).unwrap().len(), 8 + 24);
    }
}
