//! Image decoding, face cropping, resizing and normalization.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// HWC, RGB, row-major image of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty {height}x{width} image")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; height * width * 3] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"P6") {
            Some(Self::Ppm)
        } else if bytes.starts_with(&[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]) {
            Some(Self::Png)
        } else {
            None
        }
    }

    pub fn from_extension(path: &std::path::Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ppm" => Some(Self::Ppm),
            "png" => Some(Self::Png),
            _ => None,
        }
    }
}

/// Decodes binary PPM (P6) or 8-bit RGB/RGBA PNG into `[0, 1]` values.
///
/// The hint is only used when the magic bytes are not recognised.
pub fn decode_image(bytes: &[u8], hint: Option<ImageFormat>) -> Result<ImageTensor> {
    match ImageFormat::sniff(bytes).or(hint) {
        Some(ImageFormat::Ppm) => decode_ppm(bytes),
        Some(ImageFormat::Png) => decode_png(bytes),
        None => Err(Error::UnsupportedFormat("neither P6 PPM nor PNG".into())),
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<String> {
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(_) => break,
                None => return Err(Error::Decode("PPM header ends early".into())),
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if next_token(&mut pos)? != "P6" {
        return Err(Error::Decode("not a P6 PPM".into()));
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = next_token(&mut pos)?;
        tok.parse::<usize>()
            .map_err(|_| Error::Decode(format!("bad PPM {name} {tok:?}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Decode(format!("empty {width}x{height} PPM")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Decode(format!("bad PPM maxval {maxval}")));
    }
    if maxval > 255 {
        return Err(Error::UnsupportedFormat("16-bit PPM".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Decode("PPM header ends early".into()));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Decode(format!(
            "PPM raster has {} bytes, expected {need}",
            raster.len()
        )));
    }
    let scale = 1.0 / maxval as f32;
    let data = raster[..need].iter().map(|&b| f32::from(b) * scale).collect();
    ImageTensor::new(height, width, data)
}

fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(format!("PNG: {e}")))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!("PNG bit depth {depth:?}")));
    }
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::UnsupportedFormat(format!("PNG color type {other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(format!("PNG: {e}")))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(width * height * 3);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..width * channels].chunks_exact(channels) {
            data.extend(px[..3].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    ImageTensor::new(height, width, data)
}

/// Encodes an image with values in `[0, 1]` as binary PPM.
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Face box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Centered square covering `min(height, width)`.
    pub fn center_square(height: usize, width: usize) -> Self {
        let side = height.min(width) as f64;
        Self {
            x: ((width as f64 - side) / 2.0).floor(),
            y: ((height as f64 - side) / 2.0).floor(),
            w: side,
            h: side,
        }
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` chosen by [`crop_region`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Places a span of length `len` centered on `center` inside `[0, limit]`.
fn fit_span(center: f64, len: f64, limit: f64) -> (f64, f64) {
    let len = len.min(limit);
    let mut lo = center - len / 2.0;
    if lo < 0.0 {
        lo = 0.0;
    }
    if lo + len > limit {
        lo = limit - len;
    }
    (lo, lo + len)
}

/// Expands the box by `margin · max(w, h)` per side, clamps it, then grows the
/// shorter side to the longer one (again clamped to the image).
pub fn crop_region(height: usize, width: usize, bbox: &BBox, margin: f64) -> Result<CropRegion> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::Argument(format!("degenerate box {}x{}", bbox.w, bbox.h)));
    }
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::Argument(format!("bad crop margin {margin}")));
    }
    let (iw, ih) = (width as f64, height as f64);
    let m = margin * bbox.w.max(bbox.h);
    let x0 = (bbox.x - m).max(0.0);
    let y0 = (bbox.y - m).max(0.0);
    let x1 = (bbox.x + bbox.w + m).min(iw);
    let y1 = (bbox.y + bbox.h + m).min(ih);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Argument("face box lies outside the image".into()));
    }
    let side = (x1 - x0).max(y1 - y0);
    let (x0, x1) = fit_span((x0 + x1) / 2.0, side, iw);
    let (y0, y1) = fit_span((y0 + y1) / 2.0, side, ih);
    let region = CropRegion {
        x0: x0.round() as usize,
        y0: y0.round() as usize,
        x1: (x1.round() as usize).min(width),
        y1: (y1.round() as usize).min(height),
    };
    if region.x1 <= region.x0 || region.y1 <= region.y0 {
        return Err(Error::Argument("face box rounds to an empty crop".into()));
    }
    Ok(region)
}

pub fn crop_face(img: &ImageTensor, bbox: &BBox, margin: f64) -> Result<ImageTensor> {
    let r = crop_region(img.height, img.width, bbox, margin)?;
    let (w, h) = (r.x1 - r.x0, r.y1 - r.y0);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in r.y0..r.y1 {
        let start = (y * img.width + r.x0) * 3;
        data.extend_from_slice(&img.data[start..start + w * 3]);
    }
    ImageTensor::new(h, w, data)
}

/// Source coordinate and blend weight for one output index.
fn sample_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, (src - lo as f64) as f32)
}

/// Bilinear resize to `side × side` with half-pixel-centered sampling.
pub fn resize_bilinear(img: &ImageTensor, side: usize) -> ImageTensor {
    let cols: Vec<_> = (0..side).map(|x| sample_axis(x, img.width, side)).collect();
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        let (y0, y1, fy) = sample_axis(y, img.height, side);
        for &(x0, x1, fx) in &cols {
            let a = img.pixel(y0, x0);
            let b = img.pixel(y0, x1);
            let c = img.pixel(y1, x0);
            let d = img.pixel(y1, x1);
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                data.push(top + (bottom - top) * fy);
            }
        }
    }
    ImageTensor { height: side, width: side, data }
}

/// Per-channel normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.5; 3], std: [0.5; 3] }
    }
}

pub fn normalize(img: &ImageTensor, norm: &Normalization) -> ImageTensor {
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - norm.mean[i % 3]) / norm.std[i % 3])
        .collect();
    ImageTensor { height: img.height, width: img.width, data }
}

pub fn denormalize(img: &ImageTensor, norm: &Normalization) -> ImageTensor {
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v * norm.std[i % 3] + norm.mean[i % 3])
        .collect();
    ImageTensor { height: img.height, width: img.width, data }
}

/// Everything needed to turn an image file into encoder input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub side: usize,
    pub margin: f64,
    pub normalization: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { side: 384, margin: 0.0, normalization: Normalization::default() }
    }
}

impl PreprocessConfig {
    /// decode → crop (supplied box or center square) → resize → normalize.
    pub fn run(&self, bytes: &[u8], hint: Option<ImageFormat>, bbox: Option<&BBox>) -> Result<ImageTensor> {
        let img = decode_image(bytes, hint)?;
        self.run_decoded(&img, bbox)
    }

    pub fn run_decoded(&self, img: &ImageTensor, bbox: Option<&BBox>) -> Result<ImageTensor> {
        let bbox = bbox.copied().unwrap_or_else(|| BBox::center_square(img.height, img.width));
        let face = crop_face(img, &bbox, self.margin)?;
        let resized = resize_bilinear(&face, self.side);
        let out = normalize(&resized, &self.normalization);
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("normalization produced non-finite values".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_small_ppm() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode_image(&bytes, None).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ppm_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1 # size\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255]);
        let img = decode_image(&bytes, None).unwrap();
        for (v, want) in img.data().iter().zip([0.0, 0.2, 1.0]) {
            assert!((v - want).abs() < 1e-7);
        }
    }

    #[test]
    fn truncated_ppm_fails() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(decode_image(&bytes, None), Err(Error::Decode(_))));
        assert!(matches!(decode_image(b"P6\n2", None), Err(Error::Decode(_))));
    }

    #[test]
    fn sixteen_bit_ppm_unsupported() {
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0; 6]);
        assert!(matches!(decode_image(&bytes, None), Err(Error::UnsupportedFormat(_))));
    }

    fn encode_png(width: u32, height: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, width, height);
            enc.set_color(color);
            enc.set_depth(depth);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(data).unwrap();
        }
        out
    }

    #[test]
    fn gray_png_round_trips() {
        let data = vec![128u8; 8 * 8 * 3];
        let bytes = encode_png(8, 8, png::ColorType::Rgb, png::BitDepth::Eight, &data);
        let img = decode_image(&bytes, None).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
        assert!(img.data().iter().all(|v| (v - 0.5).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn rgba_png_drops_alpha() {
        let data = [255u8, 0, 0, 7, 0, 255, 0, 200];
        let bytes = encode_png(2, 1, png::ColorType::Rgba, png::BitDepth::Eight, &data);
        let img = decode_image(&bytes, None).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn sixteen_bit_png_unsupported() {
        let bytes = encode_png(1, 1, png::ColorType::Rgb, png::BitDepth::Sixteen, &[0; 6]);
        assert!(matches!(decode_image(&bytes, None), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn whole_image_crop_is_identity() {
        let img = ImageTensor::from_fn(5, 5, |y, x, c| (y * 15 + x * 3 + c) as f32);
        let out = crop_face(&img, &BBox::new(0.0, 0.0, 5.0, 5.0), 0.0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn crop_uses_box_as_is_without_margin() {
        let img = ImageTensor::filled(100, 100, 0.3);
        let out = crop_face(&img, &BBox::new(40.0, 40.0, 20.0, 20.0), 0.0).unwrap();
        assert_eq!((out.height(), out.width()), (20, 20));
    }

    #[test]
    fn margin_expands_each_side() {
        // margin 0.5 adds 0.5 * 20 = 10 px per side: 20 -> 40.
        let r = crop_region(100, 100, &BBox::new(40.0, 40.0, 20.0, 20.0), 0.5).unwrap();
        assert_eq!(r, CropRegion { x0: 30, y0: 30, x1: 70, y1: 70 });
        // Near a corner the expansion is clamped, then squared inside the image.
        let r = crop_region(100, 100, &BBox::new(0.0, 0.0, 20.0, 20.0), 0.5).unwrap();
        assert_eq!(r, CropRegion { x0: 0, y0: 0, x1: 30, y1: 30 });
    }

    #[test]
    fn non_square_box_is_squared() {
        let r = crop_region(100, 100, &BBox::new(40.0, 30.0, 20.0, 40.0), 0.0).unwrap();
        assert_eq!(r, CropRegion { x0: 30, y0: 30, x1: 70, y1: 70 });
        // Squaring is clamped by the image.
        let r = crop_region(10, 100, &BBox::new(10.0, 0.0, 40.0, 10.0), 0.0).unwrap();
        assert_eq!(r, CropRegion { x0: 10, y0: 0, x1: 50, y1: 10 });
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let img = ImageTensor::filled(10, 10, 0.0);
        assert!(matches!(crop_face(&img, &BBox::new(1.0, 1.0, 0.0, 3.0), 0.0), Err(Error::Argument(_))));
        assert!(matches!(crop_face(&img, &BBox::new(50.0, 50.0, 3.0, 3.0), 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn center_square_default() {
        assert_eq!(BBox::center_square(10, 20), BBox::new(5.0, 0.0, 10.0, 10.0));
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = ImageTensor::filled(7, 13, 0.25);
        let out = resize_bilinear(&img, 384);
        assert_eq!((out.height(), out.width()), (384, 384));
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-7));

        let img = ImageTensor::from_fn(384, 384, |y, x, c| ((y * 7 + x * 3 + c) % 256) as f32 / 255.0);
        let out = resize_bilinear(&img, 384);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_checkerboard_matches_scalar_oracle() {
        let img = ImageTensor::from_fn(2, 2, |y, x, _| if (x + y) % 2 == 1 { 1.0 } else { 0.0 });
        let out = resize_bilinear(&img, 384);
        // Output pixel (191, 191) samples source (95.75, 95.75) with a
        // 2/384 scale: src = (191.5 * 2 / 384) - 0.5.
        let s = 191.5 * 2.0 / 384.0 - 0.5;
        let f = |y: f64, x: f64| -> f64 {
            let v = |yy: usize, xx: usize| if (xx + yy) % 2 == 1 { 1.0 } else { 0.0 };
            let (fy, fx) = (y, x);
            (1.0 - fy) * (1.0 - fx) * v(0, 0) + (1.0 - fy) * fx * v(0, 1) + fy * (1.0 - fx) * v(1, 0) + fy * fx * v(1, 1)
        };
        let want = f(s, s);
        for c in 0..3 {
            assert!((f64::from(out.get(191, 191, c)) - want).abs() < 1e-6);
        }
        // A corner pixel clamps to the source corner.
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn normalize_defaults() {
        let img = ImageTensor::new(1, 1, vec![0.5, 1.0, 0.0]).unwrap();
        let out = normalize(&img, &Normalization::default());
        assert_eq!(out.data(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn normalize_custom_channels() {
        let norm = Normalization { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };
        let img = ImageTensor::new(1, 2, vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap();
        let out = normalize(&img, &norm);
        for (i, v) in out.data().iter().enumerate() {
            let c = i % 3;
            let want = (img.data()[i] - norm.mean[c]) / norm.std[c];
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn pipeline_preserves_square_image() {
        let img = ImageTensor::from_fn(16, 16, |y, x, c| ((y * 16 + x) * 3 + c) as f32 / 768.0);
        let bytes = encode_ppm(&img);
        let decoded = decode_image(&bytes, None).unwrap();
        let face = crop_face(&decoded, &BBox::new(0.0, 0.0, 16.0, 16.0), 0.0).unwrap();
        let out = resize_bilinear(&face, 16);
        for (a, b) in out.data().iter().zip(decoded.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn normalize_round_trips(vals in prop::collection::vec(0.0f32..=1.0, 3..60), m in 0.1f32..0.9, s in 0.1f32..2.0) {
            let n = vals.len() / 3 * 3;
            let img = ImageTensor::new(1, n / 3, vals[..n].to_vec()).unwrap();
            let norm = Normalization { mean: [m, 0.5, 1.0 - m], std: [s, 1.0, s * 0.5] };
            let back = denormalize(&normalize(&img, &norm), &norm);
            for (a, b) in back.data().iter().zip(img.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn pipeline_output_is_square_and_finite(h in 1usize..40, w in 1usize..40, seed in any::<u32>()) {
            let img = ImageTensor::from_fn(h, w, |y, x, c| ((seed as usize + y * 31 + x * 7 + c) % 256) as f32 / 255.0);
            let cfg = PreprocessConfig { side: 32, ..PreprocessConfig::default() };
            let out = cfg.run_decoded(&img, None).unwrap();
            prop_assert_eq!((out.height(), out.width()), (32, 32));
            prop_assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }
}
