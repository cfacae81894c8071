//! PFM and 8-bit PNG frame I/O plus false-color previews.
//!
//! PFM files are written little-endian (negative scale in the header) with
//! rows stored bottom-to-top, as the format defines. Readers accept both
//! byte orders. In memory every image is top-to-bottom, row-major,
//! channel-interleaved.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An `H x W x C` image held top-to-bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::InvalidShape {
                op: "image",
                msg: format!("{} values for {width}x{height}x{channels}", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::InvalidArgument(format!("PFM holds 1 or 3 channels, got {c}")));
        }
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PFM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Format(format!("not a PFM file (tag {other:?})"))),
    };
    let parse = |s: String, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad PFM {what}: {s:?}")))
    };
    let width = parse(token()?, "width")? as usize;
    let height = parse(token()?, "height")? as usize;
    let scale = parse(token()?, "scale")?;
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n * 4)
        .ok_or_else(|| Error::Format(format!("PFM raster truncated: need {} bytes", n * 4)))?;
    if pos + n * 4 != bytes.len() {
        return Err(Error::Format("trailing bytes after PFM raster".into()));
    }
    let little = scale < 0.0;
    let vals: Vec<f32> = raster
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row = width * channels;
    let mut data = Vec::with_capacity(n);
    for y in (0..height).rev() {
        data.extend_from_slice(&vals[y * row..(y + 1) * row]);
    }
    Image::new(width, height, channels, data)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Quantizes `[0, 1]` values (clamped) to 8 bits; 1 or 3 channels.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::InvalidArgument(format!(
                "PNG output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale or RGB PNG into `[0, 1]` values.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("expected 8-bit PNG, got {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::Format(format!("unsupported PNG color type {other:?}"))),
    };
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(info.width as usize, info.height as usize, channels, data)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_png(img)?)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Maps each scalar through a blue-to-yellow ramp after min-max scaling over
/// the finite values. Values rejected by `valid` are drawn black.
pub fn colorize(values: &[f32], width: usize, height: usize, valid: impl Fn(usize) -> bool) -> Result<Image> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if valid(i) && v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut data = Vec::with_capacity(values.len() * 3);
    for (i, &v) in values.iter().enumerate() {
        if valid(i) && v.is_finite() {
            data.extend_from_slice(&ramp((v - lo) / span));
        } else {
            data.extend_from_slice(&[0.0; 3]);
        }
    }
    Image::new(width, height, 3, data)
}

/// Piecewise-linear approximation of the viridis palette.
fn ramp(t: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 5] = [
        [0.267, 0.005, 0.329],
        [0.230, 0.322, 0.546],
        [0.128, 0.567, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ];
    let x = t.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f32;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pfm_layout_is_bottom_to_top_little_endian() {
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 3.0);
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [0.5f32, -2.0, 7.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.data, vec![0.5, -2.0, 7.0]);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let img = Image::new(3, 1, 3, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6, 1.5, -1.0, 0.999]).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!((back.width, back.height, back.channels), (3, 1, 3));
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn colorize_marks_invalid_black() {
        let img = colorize(&[0.0, 1.0, 5.0], 3, 1, |i| i != 2).unwrap();
        assert_eq!(&img.data[6..9], &[0.0; 3]);
        assert_ne!(&img.data[0..3], &img.data[3..6]);
    }

    proptest! {
        #[test]
        fn pfm_round_trip_bit_exact(w in 1usize..6, h in 1usize..6, color in any::<bool>(), seed in any::<u32>()) {
            let c = if color { 3 } else { 1 };
            let data = (0..w * h * c)
                .map(|i| f32::from_bits(seed.wrapping_mul(747_796_405).wrapping_add((i as u32).wrapping_mul(2_891_336_453)) & 0x7f7f_ffff))
                .collect();
            let img = Image::new(w, h, c, data).unwrap();
            let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
            prop_assert!(back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
