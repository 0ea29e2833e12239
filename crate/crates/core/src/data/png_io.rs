//! 8-bit RGB image and palette mask PNG encoding.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::PseudoMask;

/// Interleaved 8-bit RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn ingest(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn decode_rgb(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| ingest(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ingest(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ingest(path, e))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(ingest(path, "palette image not expanded")),
    };
    if pixels.len() != w * h * 3 {
        return Err(ingest(path, "unexpected decoded size"));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| ingest(path, e))?;
    decode_rgb(&bytes, path)
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Argument(format!("png encode: {e}")))?;
        w.write_image_data(&img.pixels)
            .map_err(|e| Error::Argument(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = encode_rgb(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 256-entry colour map; index 0 is black and indices 1.. are distinct
/// (bit-interleaved, as in common segmentation palettes).
pub fn palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= (((c >> 0) & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

pub fn encode_mask(mask: &PseudoMask) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, mask.width as u32, mask.height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette());
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Argument(format!("png encode: {e}")))?;
        w.write_image_data(&mask.labels)
            .map_err(|e| Error::Argument(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Raw palette indices of an 8-bit indexed (or grayscale) PNG.
pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<PseudoMask> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| ingest(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ingest(path, "mask too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ingest(path, e))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(ingest(
            path,
            format!(
                "mask must be 8-bit palette or grayscale, got {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    buf.truncate(info.buffer_size());
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PseudoMask::new(buf, info.height as usize, info.width as usize, id)
}

pub fn read_mask(path: &Path) -> Result<PseudoMask> {
    let bytes = std::fs::read(path).map_err(|e| ingest(path, e))?;
    decode_mask(&bytes, path)
}

pub fn write_mask(path: &Path, mask: &PseudoMask) -> Result<()> {
    let bytes = encode_mask(mask)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `.png` file names in `dir`, sorted lexicographically.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn palette_starts_black_and_is_distinct() {
        let p = palette();
        assert_eq!(&p[..3], &[0, 0, 0]);
        let mut seen = std::collections::HashSet::new();
        for c in p.chunks(3) {
            assert!(seen.insert(c.to_vec()));
        }
    }

    #[test]
    fn rgb_round_trip() {
        let img = RgbImage {
            width: 3,
            height: 2,
            pixels: (0..18).map(|v| v * 13).collect(),
        };
        let back = decode_rgb(&encode_rgb(&img).unwrap(), Path::new("x.png")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn garbage_is_an_ingest_error() {
        let err = decode_rgb(b"not a png", Path::new("bad.png")).unwrap_err();
        assert!(matches!(err, Error::Ingest { .. }));
    }

    proptest! {
        #[test]
        fn mask_bytes_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let labels: Vec<u8> = (0..w * h).map(|i| ((seed >> (i % 60)) & 3) as u8).collect();
            let m = PseudoMask::new(labels, h, w, "m").unwrap();
            let bytes = encode_mask(&m).unwrap();
            let back = decode_mask(&bytes, Path::new("m.png")).unwrap();
            prop_assert_eq!(&back.labels, &m.labels);
            prop_assert_eq!(encode_mask(&back).unwrap(), bytes);
        }
    }
}
