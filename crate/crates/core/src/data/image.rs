//! RGB images in `[0, 1]` and the binary PPM (P6) / PGM (P5) codecs.

use crate::error::{Error, Result};

/// Height × width × 3 image, row-major HWC, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract(format!("image extent {height}x{width} must be positive")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Contract(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
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

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, v: f32) {
        self.data[(row * self.width + col) * 3 + channel] = v.clamp(0.0, 1.0);
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Sub-image `[top, top + h) × [left, left + w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        assert!(top + h <= self.height && left + w <= self.width, "crop outside image bounds");
        let mut data = Vec::with_capacity(h * w * 3);
        for r in top..top + h {
            let start = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Image { height: h, width: w, data }
    }

    /// Bilinear resize with half-pixel centers; the identity when sizes match.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let ys = bilinear_taps(self.height, out_h);
        let xs = bilinear_taps(self.width, out_w);
        let mut data = Vec::with_capacity(out_h * out_w * 3);
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
                    let bottom = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
                    data.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
                }
            }
        }
        Image { height: out_h, width: out_w, data }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                let src = (r * self.width + (self.width - 1 - c)) * 3;
                let dst = (r * self.width + c) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }
}

/// Source taps `(lo, hi, weight_of_hi)` for each output coordinate of a 1-D
/// bilinear resample with half-pixel centers, clamped at the borders.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { what: "ppm", offset, msg: msg.into() }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| format_err(start, format!("{what} does not fit in an integer")))
    }
}

/// Parses the header of a binary PNM file; returns `(width, height, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(0, format!("expected magic {:?}", std::str::from_utf8(magic).unwrap())));
    }
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.number("width")?;
    let height = rd.number("height")?;
    rd.skip_space_and_comments();
    let maxval_at = rd.pos;
    let maxval = rd.number("maxval")?;
    if maxval != 255 {
        return Err(format_err(maxval_at, format!("maxval {maxval} unsupported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(2, format!("degenerate dimensions {width}x{height}")));
    }
    match bytes.get(rd.pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((width, height, rd.pos + 1)),
        _ => Err(format_err(rd.pos, "expected a single whitespace byte before the payload")),
    }
}

/// Decodes a binary PPM (P6, maxval 255) into an [`Image`].
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (width, height, start) = parse_header(bytes, b"P6")?;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| format_err(2, "dimensions overflow"))?;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", payload.len()),
        ));
    }
    let data = payload[..need].iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(Image { height, width, data })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

/// Encodes an 8-bit grayscale PGM (P5).
pub fn encode_pgm(height: usize, width: usize, values: &[u8]) -> Vec<u8> {
    assert_eq!(values.len(), height * width, "pgm payload size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// Decodes an 8-bit PGM (P5); returns `(height, width, values)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (width, height, start) = parse_header(bytes, b"P5")?;
    let need = width.checked_mul(height).ok_or_else(|| format_err(2, "dimensions overflow"))?;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(format_err(bytes.len(), format!("truncated payload: need {need} bytes")));
    }
    Ok((height, width, payload[..need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_white_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!((img.height(), img.width()), (1, 1));
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn black_then_red() {
        let img = decode_ppm(b"P6 2 1 255\n\x00\x00\x00\xff\x00\x00").unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(img.pixel(0, 1), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.get(0, 0, 1), 128.0 / 255.0);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let e = decode_ppm(b"P5\n1 1\n255\n\x00").unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }), "{e}");
        let e = decode_ppm(b"P6\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(matches!(e, Error::Format { offset: 7, .. }), "{e}");
        let e = decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{e}");
        assert!(e.to_string().contains("truncated"));
        assert!(decode_ppm(b"").is_err());
        assert!(decode_ppm(b"P6\n").is_err());
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.0, 0.5]).unwrap();
        assert_eq!(img.resize(2, 2), img);
    }

    #[test]
    fn pgm_round_trip() {
        let bytes = encode_pgm(2, 3, &[0, 1, 2, 3, 4, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 3, vec![0, 1, 2, 3, 4, 255]));
    }

    proptest! {
        #[test]
        fn encode_decode_is_lossless_at_8_bits(bytes in proptest::collection::vec(any::<u8>(), 8 * 4 * 3)) {
            let data: Vec<f32> = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
            let img = Image::new(8, 4, data).unwrap();
            let back = decode_ppm(&encode_ppm(&img)).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn random_values_round_trip_within_quantization(vals in proptest::collection::vec(0.0f32..=1.0, 8 * 4 * 3)) {
            let img = Image::new(8, 4, vals).unwrap();
            let back = decode_ppm(&encode_ppm(&img)).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
