//! Binary NetPBM: P5 (gray) and P6 (RGB), 8- or 16-bit (big-endian samples).

use crate::codec::Heatmap;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |d: &str| Error::format("netpbm", d.to_string());
    if bytes.len() < 2 {
        return Err(bad("file too short"));
    }
    let magic = [bytes[0], bytes[1]];
    if magic != *b"P5" && magic != *b"P6" {
        return Err(bad(&format!("unsupported magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(&format!("expected a number at byte {start}")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad(&format!("invalid header {width}x{height} maxval {maxval}")));
    }
    Ok(Header {
        magic,
        width: width as usize,
        height: height as usize,
        maxval,
        data_start: pos + 1,
    })
}

/// Decode P5/P6 into a grid with values scaled to `[0, 1]` (1 or 3 channels).
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Grid<T>> {
    let hdr = parse_header(bytes)?;
    let channels = if hdr.magic == *b"P6" { 3 } else { 1 };
    let wide = hdr.maxval > 255;
    let n = hdr.width * hdr.height * channels;
    let need = n * if wide { 2 } else { 1 };
    let raster = &bytes[hdr.data_start..];
    if raster.len() < need {
        return Err(Error::format(
            "netpbm",
            format!("raster has {} bytes, expected {need}", raster.len()),
        ));
    }
    let scale = 1.0 / hdr.maxval as f64;
    let data: Vec<T> = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|b| T::of(u16::from_be_bytes([b[0], b[1]]).min(hdr.maxval as u16) as f64 * scale))
            .collect()
    } else {
        raster[..need]
            .iter()
            .map(|&b| T::of((b as u32).min(hdr.maxval) as f64 * scale))
            .collect()
    };
    Grid::from_vec(hdr.height, hdr.width, channels, data)
}

fn quantize<T: Real>(v: T, max: f64) -> u32 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * max).round() as u32
}

/// 8-bit P6 from a 3-channel grid (or P5 from a 1-channel grid), values in `[0, 1]`.
pub fn encode_8bit<T: Real>(grid: &Grid<T>) -> Result<Vec<u8>> {
    let magic = match grid.channels() {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::shape("netpbm", format!("cannot write {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.as_slice().iter().map(|&v| quantize(v, 255.0) as u8));
    Ok(out)
}

/// 16-bit P5 of a heatmap, sample = `round(65535·h)`.
pub fn encode_pgm16<T: Real>(heatmap: &Heatmap<T>) -> Vec<u8> {
    let g = heatmap.grid();
    let mut out = format!("P5\n{} {}\n65535\n", g.width(), g.height()).into_bytes();
    for &v in g.as_slice() {
        out.extend_from_slice(&(quantize(v, 65535.0) as u16).to_be_bytes());
    }
    out
}

/// Raw 8-bit RGB buffer, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let hdr = parse_header(bytes)?;
        let grid: Grid<f64> = decode(bytes)?;
        let rgb = if grid.channels() == 3 {
            grid
        } else {
            Grid::from_fn(grid.height(), grid.width(), 3, |y, x, _| grid.get(y, x, 0))
        };
        let max = hdr.maxval as f64;
        let data = rgb
            .as_slice()
            .iter()
            .map(|&v| ((v * max).round() * 255.0 / max).round() as u8)
            .collect();
        Ok(Self {
            width: hdr.width,
            height: hdr.height,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn put(&mut self, x: isize, y: isize, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}
