//! Row-major 2D grids and the PNG encodings used on disk.
//!
//! Scalar images in `[-1, 1]` are stored as 16-bit grayscale with the linear
//! map `-1 -> 0`, `+1 -> 65535`. Label images are stored as 8-bit grayscale
//! carrying raw label values.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// A `width x height` grid, indexed `(u, v)` with `u` the column and `v` the row.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Image2<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Image2<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Image2<U> {
        Image2 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Largest side accepted by [`pad_crop_2d`].
pub const MAX_PAD_CROP_SIDE: usize = 4096;

/// Centered pad (with `fill`) or crop to `(width, height)`.
///
/// Along each axis the content offset is `floor((out - in) / 2)` when padding
/// and the crop start is `floor((in - out) / 2)` when cropping.
pub fn pad_crop_2d<T: Clone>(
    img: &Image2<T>,
    shape: (usize, usize),
    fill: T,
) -> Result<Image2<T>> {
    if img.width > MAX_PAD_CROP_SIDE || img.height > MAX_PAD_CROP_SIDE {
        return Err(Error::InvalidArgument(format!(
            "pad_crop_2d input {}x{} exceeds {MAX_PAD_CROP_SIDE} per side",
            img.width, img.height
        )));
    }
    let (out_w, out_h) = shape;
    let offset = |inp: usize, out: usize| -> isize {
        if out >= inp {
            ((out - inp) / 2) as isize
        } else {
            -(((inp - out) / 2) as isize)
        }
    };
    let du = offset(img.width, out_w);
    let dv = offset(img.height, out_h);
    let mut out = Image2::filled(out_w, out_h, fill);
    for v in 0..out_h {
        let sv = v as isize - dv;
        if sv < 0 || sv >= img.height as isize {
            continue;
        }
        for u in 0..out_w {
            let su = u as isize - du;
            if su < 0 || su >= img.width as isize {
                continue;
            }
            out.set(u, v, img.get(su as usize, sv as usize).clone());
        }
    }
    Ok(out)
}

/// Quantize a value in `[-1, 1]` to 16 bits; values outside the range are clamped.
#[inline]
pub fn quantize_unit(value: f64) -> u16 {
    let v = if value.is_nan() { -1.0 } else { value.clamp(-1.0, 1.0) };
    ((v + 1.0) * 0.5 * 65535.0).round() as u16
}

#[inline]
pub fn dequantize_unit(q: u16) -> f64 {
    q as f64 / 65535.0 * 2.0 - 1.0
}

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn write_gray(path: &Path, width: usize, height: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    encoder.set_compression(png::Compression::Fast);
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))?;
    Ok(())
}

/// Write a `[-1, 1]` image as 16-bit grayscale PNG.
pub fn write_png16(path: &Path, img: &Image2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.data.len() * 2);
    for &v in &img.data {
        bytes.extend_from_slice(&quantize_unit(v).to_be_bytes());
    }
    write_gray(path, img.width, img.height, png::BitDepth::Sixteen, &bytes)
}

/// Write raw 8-bit values as grayscale PNG.
pub fn write_png8(path: &Path, img: &Image2<u8>) -> Result<()> {
    write_gray(path, img.width, img.height, png::BitDepth::Eight, &img.data)
}

/// Decoded grayscale PNG, keeping its native bit depth.
#[derive(Clone, Debug, PartialEq)]
pub enum GrayPng {
    Eight(Image2<u8>),
    Sixteen(Image2<u16>),
}

impl GrayPng {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            GrayPng::Eight(img) => img.shape(),
            GrayPng::Sixteen(img) => img.shape(),
        }
    }
}

/// Read a single-channel PNG at 8 or 16 bits. Palette, RGB and sub-byte
/// depths are rejected.
pub fn read_gray_png(path: &Path) -> Result<GrayPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(image_err(path, format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    match info.bit_depth {
        png::BitDepth::Eight => {
            let mut data = Vec::with_capacity(w * h);
            for row in buf[..info.buffer_size()].chunks(info.line_size) {
                data.extend_from_slice(&row[..w]);
            }
            Ok(GrayPng::Eight(Image2::from_vec(w, h, data)?))
        }
        png::BitDepth::Sixteen => {
            let mut data = Vec::with_capacity(w * h);
            for row in buf[..info.buffer_size()].chunks(info.line_size) {
                data.extend(row[..2 * w].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])));
            }
            Ok(GrayPng::Sixteen(Image2::from_vec(w, h, data)?))
        }
        other => Err(image_err(path, format!("unsupported bit depth {other:?}"))),
    }
}

/// Read a 16-bit PNG written by [`write_png16`] back into `[-1, 1]`.
pub fn read_png16(path: &Path) -> Result<Image2<f64>> {
    match read_gray_png(path)? {
        GrayPng::Sixteen(img) => Ok(img.map(|&q| dequantize_unit(q))),
        GrayPng::Eight(_) => Err(image_err(path, "expected 16-bit grayscale, found 8-bit")),
    }
}

/// Read an 8-bit label PNG.
pub fn read_png8(path: &Path) -> Result<Image2<u8>> {
    match read_gray_png(path)? {
        GrayPng::Eight(img) => Ok(img),
        GrayPng::Sixteen(_) => Err(image_err(path, "expected 8-bit grayscale, found 16-bit")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_crop_identity_at_target_shape() {
        let img = Image2::from_fn(192, 192, |u, v| (u * 7 + v) as i32);
        assert_eq!(pad_crop_2d(&img, (192, 192), -1).unwrap(), img);
    }

    #[test]
    fn pad_100_gives_46_pixel_borders() {
        let img = Image2::filled(100, 100, 1u8);
        let out = pad_crop_2d(&img, (192, 192), 0).unwrap();
        for v in 0..192 {
            for u in 0..192 {
                let inside = (46..146).contains(&u) && (46..146).contains(&v);
                assert_eq!(*out.get(u, v), inside as u8, "({u},{v})");
            }
        }
    }

    #[test]
    fn crop_300_wide_is_symmetric() {
        let img = Image2::from_fn(300, 192, |u, _| u as i32);
        let out = pad_crop_2d(&img, (192, 192), -1).unwrap();
        // (300 - 192) / 2 = 54 dropped on each side
        assert_eq!(*out.get(0, 0), 54);
        assert_eq!(*out.get(191, 10), 245);
        assert_eq!(300 - 1 - 245, 54);
    }

    #[test]
    fn pad_crop_preserves_content_center() {
        let img = Image2::from_fn(101, 57, |u, v| (u, v));
        let out = pad_crop_2d(&img, (192, 192), (9999, 9999)).unwrap();
        let (du, dv) = ((192 - 101) / 2, (192 - 57) / 2);
        assert_eq!(*out.get(50 + du, 28 + dv), (50, 28));
    }

    #[test]
    fn pad_crop_rejects_oversized() {
        let img = Image2::filled(4097, 2, 0u8);
        assert!(pad_crop_2d(&img, (192, 192), 0).is_err());
    }

    #[test]
    fn quantization_endpoints() {
        assert_eq!(quantize_unit(-1.0), 0);
        assert_eq!(quantize_unit(1.0), 65535);
        assert_eq!(quantize_unit(7.0), 65535);
        assert_eq!(dequantize_unit(0), -1.0);
        assert_eq!(dequantize_unit(65535), 1.0);
        for q in [0u16, 1, 12345, 32767, 32768, 65534, 65535] {
            assert_eq!(quantize_unit(dequantize_unit(q)), q);
        }
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image2::from_fn(13, 7, |u, v| (u as f64 - v as f64) / 13.0);
        let p16 = dir.path().join("a.png");
        write_png16(&p16, &img).unwrap();
        let back = read_png16(&p16).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
        let lbl = Image2::from_fn(5, 9, |u, v| ((u + v) % 3) as u8);
        let p8 = dir.path().join("b.png");
        write_png8(&p8, &lbl).unwrap();
        assert_eq!(read_png8(&p8).unwrap(), lbl);
        assert!(read_png16(&p8).is_err());
    }
}
