//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::crf::{HardLabeling, PartialLabeling, UNLABELED};
use crate::diffcore::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    /// 1 for graymaps, 3 for pixmaps.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Pixmap {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 1, data)
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 3, data)
    }

    fn checked(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} bytes for {width}x{height}x{channels}",
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

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut p = HeaderParser { bytes, pos: 0 };
        let channels = match p.token()? {
            b"P5" => 1,
            b"P6" => 3,
            m => return Err(Error::Parse(format!("unsupported magic {:?}", String::from_utf8_lossy(m)))),
        };
        let width = p.number()?;
        let height = p.number()?;
        let maxval = p.number()?;
        if maxval != 255 {
            return Err(Error::Parse(format!("maxval {maxval}, only 255 is supported")));
        }
        // exactly one whitespace byte before the raster
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => return Err(Error::Parse("missing whitespace after header".into())),
        }
        let need = width * height * channels;
        let raster = &bytes[p.pos..];
        if raster.len() < need {
            return Err(Error::Parse(format!("raster has {} of {need} bytes", raster.len())));
        }
        Self::checked(width, height, channels, raster[..need].to_vec())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip(&mut self) {
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

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse("truncated header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad header number {:?}", String::from_utf8_lossy(t))))
    }
}

/// `[H, W, 3]` image in `[0, 1]` to 8 bits (rounded).
pub fn image_to_pixmap(image: &Tensor) -> Result<Pixmap> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("expected [H, W, 3], got {s:?}")));
    }
    let data = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Pixmap::rgb(s[1], s[0], data)
}

pub fn pixmap_to_image(p: &Pixmap) -> Result<Tensor> {
    Tensor::new(
        vec![p.height, p.width, p.channels],
        p.data.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

pub fn labels_to_pixmap(labels: &HardLabeling) -> Pixmap {
    Pixmap::gray(labels.width(), labels.height(), labels.labels().to_vec()).expect("sizes agree")
}

/// A graymap as a full labeling; 255 is rejected.
pub fn pixmap_to_labels(p: &Pixmap) -> Result<HardLabeling> {
    if p.channels != 1 {
        return Err(Error::Parse("label map must be a graymap".into()));
    }
    if p.data.contains(&UNLABELED) {
        return Err(Error::Parse("label map contains the unlabeled value 255".into()));
    }
    HardLabeling::new(p.height, p.width, p.data.clone())
}

pub fn seeds_to_pixmap(seeds: &PartialLabeling) -> Pixmap {
    Pixmap::gray(seeds.width(), seeds.height(), seeds.to_sentinel()).expect("sizes agree")
}

pub fn pixmap_to_seeds(p: &Pixmap) -> Result<PartialLabeling> {
    if p.channels != 1 {
        return Err(Error::Parse("scribble map must be a graymap".into()));
    }
    PartialLabeling::from_sentinel(p.height, p.width, &p.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let p = Pixmap::rgb(1, 1, vec![1, 2, 3]).unwrap();
        assert_eq!(Pixmap::decode(&p.encode()).unwrap(), p);
        let g = Pixmap::gray(3, 2, vec![0, 1, 2, 255, 4, 5]).unwrap();
        assert_eq!(Pixmap::decode(&g.encode()).unwrap(), g);
    }

    #[test]
    fn header_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1 # dims\n255\n".to_vec();
        bytes.extend([7, 9]);
        let g = Pixmap::decode(&bytes).unwrap();
        assert_eq!(g.data, vec![7, 9]);
    }

    #[test]
    fn malformed() {
        assert!(Pixmap::decode(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(Pixmap::decode(b"P6\n1 1\n255\n\x00").is_err());
        assert!(Pixmap::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(Pixmap::decode(b"P5\n1").is_err());
        let g = Pixmap::gray(1, 1, vec![255]).unwrap();
        assert!(pixmap_to_labels(&g).is_err());
    }
}
