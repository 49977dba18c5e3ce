//! Planar floating-point images and 8-bit binary PGM/PPM I/O.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Rec. 601 luma weights used when a single channel is needed from RGB.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// A planar (channel-major) image with double-precision samples.
///
/// Sample `(c, y, x)` lives at `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(shape_err!("image dimensions must be non-zero"));
        }
        if data.len() != width * height * channels {
            return Err(shape_err!(
                "image {}x{}x{} needs {} samples, got {}",
                channels,
                height,
                width,
                width * height * channels,
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err!(
                "images differ: {}x{}x{} vs {}x{}x{}",
                self.channels,
                self.height,
                self.width,
                other.channels,
                other.height,
                other.width
            ))
        }
    }

    /// Single-channel luma; returns a copy for grayscale input.
    pub fn luma(&self) -> Image {
        match self.channels {
            3 => {
                let n = self.width * self.height;
                let mut out = vec![0.0; n];
                for (c, w) in LUMA_WEIGHTS.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(self.plane(c)) {
                        *o += w * v;
                    }
                }
                Image {
                    width: self.width,
                    height: self.height,
                    channels: 1,
                    data: out,
                }
            }
            _ => Image {
                width: self.width,
                height: self.height,
                channels: 1,
                data: self.plane(0).to_vec(),
            },
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// `(1, C, H, W)` tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("image and tensor sizes agree")
    }

    /// Builds an image from batch item 0 of an NCHW tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let [_, c, h, w] = t.dims4()?;
        let n = c * h * w;
        Image::new(w, h, c, t.data()[..n].to_vec())
    }

    /// 8-bit binary PGM (P5) for one channel, PPM (P6) for three.
    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_pnm()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_pnm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(shape_err!("PNM output supports 1 or 3 channels, got {c}")),
        };
        let n = self.width * self.height;
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(n * self.channels);
        for i in 0..n {
            for c in 0..self.channels {
                out.push(quantize_u8(self.data[c * n + i]));
            }
        }
        Ok(out)
    }

    pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        decode_pnm(BufReader::new(file)).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Rounds a `[0, 1]` sample to the nearest 8-bit code.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r
            .read(&mut byte)
            .map_err(|e| Error::Parse(format!("truncated PNM header: {e}")))?;
        if n == 0 {
            if tok.is_empty() {
                return Err(Error::Parse("truncated PNM header".into()));
            }
            return Ok(tok);
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)
                .map_err(|e| Error::Parse(e.to_string()))?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(b as char);
    }
}

fn decode_pnm<R: BufRead>(mut r: R) -> Result<Image> {
    let magic = read_token(&mut r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Parse(format!("unsupported PNM magic {other:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        let tok = read_token(&mut r)?;
        tok.parse()
            .map_err(|_| Error::Parse(format!("bad PNM {what}: {tok:?}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported PNM maxval {maxval}")));
    }
    let n = width * height;
    let mut raw = vec![0u8; n * channels];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Parse("truncated PNM pixel data".into()))?;
    let scale = maxval as f64;
    let mut data = vec![0.0; n * channels];
    for i in 0..n {
        for c in 0..channels {
            data[c * n + i] = raw[i * channels + c] as f64 / scale;
        }
    }
    Image::new(width, height, channels, data)
}

pub fn write_all_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
