//! Raster value types and their on-disk formats.
//!
//! Images are read from binary netpbm files (`P5` grayscale, `P6` RGB, maxval
//! 255) and normalized to `[0, 1]` by dividing by 255. Change maps are written
//! back as `P5` with labels mapped to `0`/`255`. Continuous maps use a small
//! raw float container:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  "USTAF1\0\0"
//! 8       4     height (u32 little-endian)
//! 12      4     width  (u32 little-endian)
//! 16      4*H*W values (f32 little-endian, row-major)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SCALAR_MAP_MAGIC: &[u8; 8] = b"USTAF1\0\0";

/// Multichannel image with intensities in `[0, 1]`, stored row-major with
/// channels interleaved per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Channel values of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Copy out a `height`x`width` window starting at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in row..row + height {
            let start = (r * self.width + col) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Self::new(height, width, self.channels, data)
    }
}

/// Single-channel map of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "map data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("map value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Binary label map: 0 = unchanged, 1 = changed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChangeMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ChangeMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "change map length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Argument(format!("label {v} is not in {{0, 1}}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count_changed(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Label-wise NOT.
    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    /// Returns the value and the offset of its first digit.
    fn read_uint(&mut self, field: &str) -> Result<(usize, usize)> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("expected decimal {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .map(|v| (v, start))
            .ok_or_else(|| Error::parse(start, format!("{field} does not fit in an integer")))
    }
}

/// Parse a binary `P5`/`P6` payload held in memory.
pub fn decode_netpbm(bytes: &[u8]) -> Result<RasterImage> {
    if bytes.len() < 2 {
        return Err(Error::parse(
            bytes.len(),
            "file too short for a magic number",
        ));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        [b'P', d] => {
            return Err(Error::UnsupportedFormat(format!(
                "magic number P{} at byte 0 (only P5 and P6 are supported)",
                *d as char
            )))
        }
        _ => return Err(Error::parse(0, "missing netpbm magic number")),
    };
    let mut header = HeaderReader { bytes, pos: 2 };
    let (width, _) = header.read_uint("width")?;
    let (height, _) = header.read_uint("height")?;
    let (maxval, maxval_offset) = header.read_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(
            maxval_offset,
            format!("zero image dimension {width}x{height}"),
        ));
    }
    if maxval != 255 {
        return Err(Error::parse(
            maxval_offset,
            format!("maxval {maxval} is not 255"),
        ));
    }
    match bytes.get(header.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => {
            return Err(Error::parse(
                header.pos,
                "expected single whitespace after maxval",
            ))
        }
    }
    let payload_start = header.pos + 1;
    let expected = width * height * channels;
    let available = bytes.len() - payload_start;
    if available < expected {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {available}"),
        ));
    }
    if available > expected {
        return Err(Error::parse(
            payload_start + expected,
            format!("{} trailing bytes after payload", available - expected),
        ));
    }
    let data = bytes[payload_start..]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    RasterImage::new(height, width, channels, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes)
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encode an image as `P5` (one channel) or `P6` (three channels).
pub fn encode_image(image: &RasterImage) -> Result<Vec<u8>> {
    let magic = match image.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Shape(format!(
                "cannot encode {c} channels as netpbm"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_image(image: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_change_map(map: &ChangeMap) -> Result<Vec<u8>> {
    if map.height() == 0 || map.width() == 0 {
        return Err(Error::Shape(format!(
            "cannot write a {}x{} change map",
            map.height(),
            map.width()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.data().iter().map(|&v| if v == 1 { 255u8 } else { 0 }));
    Ok(out)
}

pub fn write_change_map(map: &ChangeMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_change_map(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a `P5` file as a change map; any nonzero byte is label 1.
pub fn read_change_map(path: impl AsRef<Path>) -> Result<ChangeMap> {
    let image = read_image(path)?;
    if image.channels() != 1 {
        return Err(Error::Shape(format!(
            "change map must have one channel, found {}",
            image.channels()
        )));
    }
    let labels = image.data().iter().map(|&v| u8::from(v > 0.0)).collect();
    ChangeMap::new(image.height(), image.width(), labels)
}

pub fn encode_scalar_map(map: &ScalarMap) -> Result<Vec<u8>> {
    let height =
        u32::try_from(map.height()).map_err(|_| Error::Shape("map height exceeds u32".into()))?;
    let width =
        u32::try_from(map.width()).map_err(|_| Error::Shape("map width exceeds u32".into()))?;
    let mut out = Vec::with_capacity(16 + 4 * map.len());
    out.extend_from_slice(SCALAR_MAP_MAGIC);
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_scalar_map(bytes: &[u8]) -> Result<ScalarMap> {
    if bytes.len() < 16 {
        return Err(Error::parse(
            bytes.len(),
            "file shorter than the 16-byte header",
        ));
    }
    if &bytes[..8] != SCALAR_MAP_MAGIC {
        return Err(Error::parse(0, "magic mismatch, expected USTAF1"));
    }
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::parse(8, "header dimensions overflow"))?;
    if payload.len() != expected {
        return Err(Error::parse(
            16 + payload.len().min(expected),
            format!(
                "payload holds {} bytes but header {height}x{width} requires {expected}",
                payload.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(height * width);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f64::from(f32::from_le_bytes(chunk.try_into().unwrap()));
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::parse(
                16 + 4 * i,
                format!("value {v} outside [0, 1]"),
            ));
        }
        data.push(v);
    }
    ScalarMap::new(height, width, data)
}

pub fn write_scalar_map(map: &ScalarMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_scalar_map(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_scalar_map(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scalar_map(&bytes)
}
