use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 3;

/// Per-channel statistics used to standardise pixels before patch
/// embedding (the usual CLIP preprocessing constants).
pub const PIXEL_MEAN: [f64; CHANNELS] = [0.48145466, 0.4578275, 0.40821073];
pub const PIXEL_STD: [f64; CHANNELS] = [0.26862954, 0.26130258, 0.27577711];
pub const FRAME_MAGIC: &[u8; 8] = b"VTFIMG01";

/// RGB image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract(format!("frame has zero area ({height}x{width})")));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Contract(format!(
                "frame {height}x{width} needs {} values, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Frame { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.pixels.len() * 4);
        buf.extend_from_slice(FRAME_MAGIC);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for p in &self.pixels {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::CorruptFrame {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 16 || &bytes[..8] != FRAME_MAGIC {
            return Err(bad("missing VTFIMG01 header".into()));
        }
        let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let width = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(CHANNELS * 4))
            .ok_or_else(|| bad("frame dimensions overflow".into()))?;
        let body = &bytes[16..];
        if body.len() != expected {
            return Err(bad(format!(
                "{height}x{width} frame needs {expected} pixel bytes, file has {}",
                body.len()
            )));
        }
        let pixels = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Frame::new(height, width, pixels).map_err(|e| bad(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(frame: &Frame, height: usize, width: usize) -> Result<Frame> {
    if height == 0 || width == 0 {
        return Err(Error::Contract(format!("resize target has zero area ({height}x{width})")));
    }
    if height == frame.height && width == frame.width {
        return Ok(frame.clone());
    }
    let src = |out: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let pos = ((out as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let mut pixels = Vec::with_capacity(height * width * CHANNELS);
    for y in 0..height {
        let (y0, y1, fy) = src(y, height, frame.height);
        for x in 0..width {
            let (x0, x1, fx) = src(x, width, frame.width);
            for c in 0..CHANNELS {
                let top = frame.get(y0, x0, c) * (1.0 - fx) + frame.get(y0, x1, c) * fx;
                let bottom = frame.get(y1, x0, c) * (1.0 - fx) + frame.get(y1, x1, c) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Frame::new(height, width, pixels)
}

/// Size of the content after an aspect-preserving resize whose longer
/// side equals `side`.
pub fn fitted_size(height: usize, width: usize, side: usize) -> (usize, usize) {
    let long = height.max(width) as f64;
    let fit = |n: usize| (((n as f64) * side as f64 / long).round() as usize).clamp(1, side);
    (fit(height), fit(width))
}

/// Resizes so the longer side is `side`, then pads the shorter side with
/// zeros on both ends; an odd leftover pixel goes to the right or bottom.
pub fn pad_to_square(frame: &Frame, side: usize) -> Result<Frame> {
    if side == 0 {
        return Err(Error::Contract("square side must be positive".into()));
    }
    let (h, w) = fitted_size(frame.height, frame.width, side);
    let content = resize_bilinear(frame, h, w)?;
    if h == side && w == side {
        return Ok(content);
    }
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    let mut pixels = vec![0.0f32; side * side * CHANNELS];
    for y in 0..h {
        let dst = ((y + top) * side + left) * CHANNELS;
        let src = y * w * CHANNELS;
        pixels[dst..dst + w * CHANNELS].copy_from_slice(&content.pixels[src..src + w * CHANNELS]);
    }
    Frame::new(side, side, pixels)
}

/// Cuts a square frame into non-overlapping `patch x patch` tiles, row by
/// row; each tile is flattened as (row, column, channel). Output
/// `[(side/patch)^2, patch*patch*3]`.
pub fn patchify<T: Scalar>(frame: &Frame, patch: usize) -> Result<Tensor<T>> {
    let side = frame.height;
    if frame.width != side || patch == 0 || side % patch != 0 {
        return Err(Error::Contract(format!(
            "cannot cut a {}x{} frame into {patch}x{patch} patches",
            frame.height, frame.width
        )));
    }
    let grid = side / patch;
    let row_len = patch * CHANNELS;
    let mut data = Vec::with_capacity(side * side * CHANNELS);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch {
                let start = ((gy * patch + py) * side + gx * patch) * CHANNELS;
                data.extend(frame.pixels[start..start + row_len].iter().map(|&v| T::of(v as f64)));
            }
        }
    }
    Tensor::new([grid * grid, patch * patch * CHANNELS], data)
}

/// Standardises patch values laid out as (row, column, channel).
pub fn standardize<T: Scalar>(patches: &mut Tensor<T>) {
    for (i, v) in patches.data_mut().iter_mut().enumerate() {
        let c = i % CHANNELS;
        *v = T::of((v.f64() - PIXEL_MEAN[c]) / PIXEL_STD[c]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(h: usize, w: usize) -> Frame {
        let pixels = (0..h * w * CHANNELS).map(|i| (i % 97) as f32 / 96.0).collect();
        Frame::new(h, w, pixels).unwrap()
    }

    #[test]
    fn square_input_is_unchanged() {
        let f = gradient(8, 8);
        assert_eq!(pad_to_square(&f, 8).unwrap(), f);
    }

    #[test]
    fn tall_ones_frame_is_centred() {
        let f = Frame::filled(4, 2, 1.0).unwrap();
        let out = pad_to_square(&f, 4).unwrap();
        for y in 0..4 {
            let row: Vec<f32> = (0..4).map(|x| out.get(y, x, 0)).collect();
            assert_eq!(row, vec![0.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn odd_padding_goes_right_and_bottom() {
        let wide = Frame::filled(1, 4, 1.0).unwrap();
        let out = pad_to_square(&wide, 4).unwrap();
        let column: Vec<f32> = (0..4).map(|y| out.get(y, 0, 0)).collect();
        assert_eq!(column, vec![0.0, 1.0, 0.0, 0.0]);
        let tall = Frame::filled(3, 2, 1.0).unwrap();
        let out = pad_to_square(&tall, 3).unwrap();
        assert_eq!((0..3).map(|x| out.get(0, x, 0)).collect::<Vec<_>>(), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_area_is_rejected() {
        assert!(Frame::new(0, 4, vec![]).is_err());
        assert!(Frame::new(2, 2, vec![2.0; 12]).is_err());
    }

    #[test]
    fn patch_layout() {
        let f = gradient(4, 4);
        let p = patchify::<f32>(&f, 2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // second patch starts at column 2 of row 0
        assert_eq!(p.data()[12], f.get(0, 2, 0));
        assert_eq!(p.data()[12 + 6], f.get(1, 2, 0));
        // third patch starts at row 2
        assert_eq!(p.data()[24], f.get(2, 0, 0));
        assert!(patchify::<f32>(&gradient(4, 4), 3).is_err());
    }

    #[test]
    fn frame_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vtf");
        let f = gradient(3, 5);
        f.write(&path).unwrap();
        assert_eq!(Frame::read(&path).unwrap(), f);
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..8], FRAME_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        let err = Frame::from_bytes(&bytes[..bytes.len() - 3], &path).unwrap_err();
        assert!(matches!(err, Error::CorruptFrame { .. }));
        assert!(err.to_string().contains("f.vtf"));
    }

    proptest! {
        #[test]
        fn padding_holds_content_once(h in 1usize..20, w in 1usize..20, side in 4usize..24) {
            let f = gradient(h, w);
            let out = pad_to_square(&f, side).unwrap();
            let (ch, cw) = fitted_size(h, w, side);
            prop_assert!(ch == side || cw == side);
            let content = resize_bilinear(&f, ch, cw).unwrap();
            let (top, left) = ((side - ch) / 2, (side - cw) / 2);
            for y in 0..side {
                for x in 0..side {
                    for c in 0..CHANNELS {
                        let inside = (top..top + ch).contains(&y) && (left..left + cw).contains(&x);
                        let expected = if inside { content.get(y - top, x - left, c) } else { 0.0 };
                        prop_assert_eq!(out.get(y, x, c), expected);
                    }
                }
            }
        }
    }
}
