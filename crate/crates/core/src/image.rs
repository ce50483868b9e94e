//! Row-major `h × w × ch` float images and binary PPM/PGM files.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Contract(format!("bad image extents {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Mirror about the vertical axis.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.pixel_mut(r, c).copy_from_slice(self.pixel(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Rounds every value to the nearest multiple of 1/255 in `[0, 1]`, which
    /// is exactly what an 8-bit PPM stores.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = f64::from(to_u8(*v)) / 255.0;
        }
    }

    /// Binary P6 for three channels, P5 for one.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut bytes = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|&v| to_u8(v)));
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_ppm(&bytes).map_err(|e| match e {
            Error::Format { offset, reason } => Error::Format {
                offset,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format {
                    offset: pos as u64,
                    reason: "truncated PPM header".into(),
                });
            }
            fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0].1.as_str() {
            "P6" => 3,
            "P5" => 1,
            _ => {
                return Err(Error::Format {
                    offset: 0,
                    reason: format!("unsupported magic {:?}", fields[0].1),
                })
            }
        };
        let num = |i: usize| -> Result<usize> {
            fields[i].1.parse().map_err(|_| Error::Format {
                offset: fields[i].0 as u64,
                reason: format!("bad header field {:?}", fields[i].1),
            })
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(Error::Format {
                offset: fields[3].0 as u64,
                reason: format!("only maxval 255 is supported, got {maxval}"),
            });
        }
        let need = width * height * channels;
        if bytes.len() < pos + need {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: format!("raster truncated: need {need} bytes after offset {pos}"),
            });
        }
        let data = bytes[pos..pos + need].iter().map(|&b| f64::from(b) / 255.0).collect();
        Image::new(height, width, channels, data).map_err(|e| Error::Format {
            offset: 0,
            reason: e.to_string(),
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
