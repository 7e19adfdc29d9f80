//! Binary PPM (`P6`, 8 or 16 bit) and PAM (`P7`, RGB) images as `1×h×w×3` tensors in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm8,
    Ppm16,
    Pam16,
}

impl ImageFormat {
    /// `.pam` files are written as 16-bit PAM, everything else as 8-bit PPM.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pam") => ImageFormat::Pam16,
            _ => ImageFormat::Ppm8,
        }
    }

    fn maxval(self) -> u32 {
        match self {
            ImageFormat::Ppm8 => 255,
            _ => 65535,
        }
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("image header", "unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::format("image header", "non-ASCII token"))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse().map_err(|_| Error::format("image header", format!("expected a number, got `{t}`")))
    }
}

fn decode(pixels: &[u8], h: usize, w: usize, maxval: usize) -> Result<Tensor> {
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("image header", format!("maxval {maxval} out of range")));
    }
    let wide = maxval > 255;
    let need = h * w * 3 * if wide { 2 } else { 1 };
    if pixels.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: pixels.len(),
        });
    }
    let scale = maxval as f32;
    let data = if wide {
        pixels[..need]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f32 / scale)
            .collect()
    } else {
        pixels[..need].iter().map(|&p| p as f32 / scale).collect()
    };
    Tensor::new([1, h, w, 3], data)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut hdr = Header { bytes, pos: 0 };
    match hdr.token()? {
        "P6" => {
            let w = hdr.number()?;
            let h = hdr.number()?;
            let maxval = hdr.number()?;
            // exactly one whitespace byte separates header and raster
            let start = hdr.pos + 1;
            decode(bytes.get(start..).unwrap_or(&[]), h, w, maxval)
        }
        "P7" => {
            let (mut w, mut h, mut depth, mut maxval) = (None, None, None, None);
            loop {
                match hdr.token()? {
                    "WIDTH" => w = Some(hdr.number()?),
                    "HEIGHT" => h = Some(hdr.number()?),
                    "DEPTH" => depth = Some(hdr.number()?),
                    "MAXVAL" => maxval = Some(hdr.number()?),
                    "TUPLTYPE" => {
                        let t = hdr.token()?;
                        if t != "RGB" {
                            return Err(Error::format("image header", format!("tuple type {t} is not RGB")));
                        }
                    }
                    "ENDHDR" => break,
                    other => return Err(Error::format("image header", format!("unknown PAM field `{other}`"))),
                }
            }
            let (Some(w), Some(h), Some(maxval)) = (w, h, maxval) else {
                return Err(Error::format("image header", "PAM header lacks WIDTH, HEIGHT or MAXVAL"));
            };
            if depth != Some(3) {
                return Err(Error::format("image header", "only 3-channel PAM images are supported"));
            }
            decode(bytes.get(hdr.pos + 1..).unwrap_or(&[]), h, w, maxval)
        }
        magic => Err(Error::format("image header", format!("unsupported magic `{magic}`"))),
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}

fn quantize(v: f32, maxval: u32) -> u32 {
    (v.clamp(0.0, 1.0) * maxval as f32).round() as u32
}

pub fn encode_image(image: &Tensor, format: ImageFormat) -> Result<Vec<u8>> {
    let [b, h, w, c] = image.shape();
    if b != 1 || c != 3 {
        return Err(Error::shape(format!("an RGB image must be 1×h×w×3, got {:?}", image.shape())));
    }
    let maxval = format.maxval();
    let mut out = match format {
        ImageFormat::Ppm8 | ImageFormat::Ppm16 => format!("P6\n{w} {h}\n{maxval}\n").into_bytes(),
        ImageFormat::Pam16 => {
            format!("P7\nWIDTH {w}\nHEIGHT {h}\nDEPTH 3\nMAXVAL {maxval}\nTUPLTYPE RGB\nENDHDR\n").into_bytes()
        }
    };
    for &v in image.data() {
        let q = quantize(v, maxval);
        if maxval > 255 {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(image, ImageFormat::for_path(path))?)?;
    Ok(())
}

/// Values as they read back after an 8-bit roundtrip.
pub fn quantize8(image: &Tensor) -> Tensor {
    image.map(|v| quantize(v, 255) as f32 / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::from_fn([1, 3, 5, 3], |[_, y, x, c]| ((y * 5 + x) * 3 + c) as f32 / 44.0)
    }

    #[test]
    fn ppm8_roundtrip_is_quantized() {
        let img = sample();
        let back = decode_image(&encode_image(&img, ImageFormat::Ppm8).unwrap()).unwrap();
        assert_eq!(back, quantize8(&img));
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-7);
        let again = decode_image(&encode_image(&back, ImageFormat::Ppm8).unwrap()).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn wide_formats() {
        let img = sample();
        for f in [ImageFormat::Ppm16, ImageFormat::Pam16] {
            let back = decode_image(&encode_image(&img, f).unwrap()).unwrap();
            assert!(back.max_abs_diff(&img) <= 0.5 / 65535.0 + 1e-7, "{f:?}");
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let bytes = b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff";
        let t = decode_image(bytes).unwrap();
        assert_eq!(t.pixel(0, 0, 0), &[0.0, 128.0 / 255.0, 1.0]);
        assert!(matches!(decode_image(b"P6\n2 2\n255\n\x00"), Err(Error::Truncated { .. })));
        assert!(decode_image(b"P5\n1 1\n255\n\x00").is_err());
    }
}
