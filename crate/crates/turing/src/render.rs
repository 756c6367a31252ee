//! Three orthogonal 8-bit slices through the tumor center, as PNG.

use serde::{Deserialize, Serialize};

use freetumor_core::grid::Grid;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        Axis::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

/// Row-major grayscale slice; `marker` is the tumor center as `[col, row]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub axis: Axis,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub marker: [usize; 2],
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Slices through `center` (`[z, y, x]`) of a [0, 1]-normalized volume.
/// Axial: rows y, cols x. Coronal: rows z, cols x. Sagittal: rows z, cols y.
pub fn render_slices(image: &Grid<f32>, center: [usize; 3]) -> [Slice; 3] {
    let [d, h, w] = image.shape();
    let [cz, cy, cx] = center;
    let take = |axis, width, height, marker, f: &dyn Fn(usize, usize) -> [usize; 3]| {
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(to_u8(image.get(f(r, c))));
            }
        }
        Slice {
            axis,
            width,
            height,
            pixels,
            marker,
        }
    };
    [
        take(Axis::Axial, w, h, [cx, cy], &|r, c| [cz, r, c]),
        take(Axis::Coronal, w, d, [cx, cz], &|r, c| [r, cy, c]),
        take(Axis::Sagittal, h, d, [cy, cz], &|r, c| [r, c, cx]),
    ]
}

pub fn encode_png(s: &Slice) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, s.width as u32, s.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::InvalidRequest(format!("png encoding failed: {e}"));
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&s.pixels).map_err(err)?;
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale PNG into `(width, height, pixels)`.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let err = |e: png::DecodingError| Error::InvalidRequest(format!("png decoding failed: {e}"));
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::InvalidRequest("expected 8-bit grayscale".into()));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
