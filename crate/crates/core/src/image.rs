//! Binary PPM (P6) / PGM (P5) images and model input preprocessing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};

pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// 8-bit interleaved image with `channels` samples per pixel (3 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    fn magic(&self) -> Result<&'static str> {
        match self.channels {
            3 => Ok("P6"),
            1 => Ok("P5"),
            c => Err(Error::Format(format!("cannot encode {c}-channel image"))),
        }
    }

    /// P6 for three channels, P5 for one.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic()?, self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Header { bytes, pos: 0 };
        let channels = match r.token()? {
            "P6" => 3,
            "P5" => 1,
            m => return Err(Error::Format(format!("unsupported image magic `{m}`"))),
        };
        let width = r.number("width")?;
        let height = r.number("height")?;
        let maxval = r.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit images are supported, maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        if !r.bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::Format("missing whitespace after header".into()));
        }
        let start = r.pos + 1;
        let need = width * height * channels;
        let payload = &bytes[start..];
        if payload.len() < need {
            return Err(Error::Format(format!("truncated payload: {} of {need} bytes", payload.len())));
        }
        Self::new(width, height, channels, payload[..need].to_vec())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn token(&mut self) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("unexpected end of header".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format("non-ASCII header".into()))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Format(format!("bad {what} `{tok}`"))),
        }
    }
}

/// RGB image to a normalized `(1, 3, size, size)` tensor: bilinear resize,
/// scale to [0, 1], per-channel mean/std normalization.
pub fn preprocess(img: &Image, size: usize) -> Result<Tensor> {
    if img.channels != 3 {
        return Err(Error::Format(format!("expected an RGB image, got {} channels", img.channels)));
    }
    let plane = img.width * img.height;
    let raw = Tensor::from_fn([1, 3, img.height, img.width], |i| {
        let (c, p) = (i / plane, i % plane);
        img.data[p * 3 + c] as f32 / 255.0
    });
    let resized = resize_bilinear(&raw, size, size)?;
    let plane = size * size;
    let data = resized
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - MEAN[i / plane]) / STD[i / plane])
        .collect();
    Ok(Tensor::new([1, 3, size, size], data)?)
}

/// Binary mask from `(1, C, H, W)` logits: 255 where any non-background
/// class wins the argmax, 0 otherwise. Ties go to the lower class.
pub fn mask_from_logits(logits: &Tensor) -> Result<Image> {
    let (n, c, h, w) = logits.dims4()?;
    if n != 1 {
        return Err(Error::Invalid(format!("mask needs a single sample, got {n}")));
    }
    let plane = h * w;
    let d = logits.data();
    let mask = (0..plane)
        .map(|p| {
            let best = (1..c).fold(0, |b, ch| if d[ch * plane + p] > d[b * plane + p] { ch } else { b });
            if best == 0 {
                0
            } else {
                255
            }
        })
        .collect();
    Image::new(w, h, 1, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments_parses() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = Image::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 3));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(Image::decode(b"P3\n1 1\n255\n\0\0\0").is_err());
        assert!(Image::decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(Image::decode(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(Image::decode(b"P6\n2").is_err());
        assert!(Image::decode(b"P6\n0 2\n255\n").is_err());
    }

    #[test]
    fn known_normalization() {
        let img = Image::new(2, 2, 3, vec![255, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 255]).unwrap();
        let t = preprocess(&img, 2).unwrap();
        assert!((t.data()[0] - (1.0 - 0.485) / 0.229).abs() < 1e-5);
        assert!((t.data()[0] - 2.2489).abs() < 1e-4);
        assert!((t.data()[1] - (-0.485 / 0.229)).abs() < 1e-5);
        assert!((t.data()[11] - (1.0 - 0.406) / 0.225).abs() < 1e-5);
    }

    #[test]
    fn mask_thresholds_on_argmax() {
        let logits = Tensor::new([1, 2, 1, 3], vec![0.0, 1.0, 0.5, 1.0, 0.0, 0.5]).unwrap();
        assert_eq!(mask_from_logits(&logits).unwrap().data, vec![255, 0, 0]);
    }
}
