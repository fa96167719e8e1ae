//! PNG images and label maps, PFM depth rasters.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::{DataError, Result};
use crate::geometry::{DepthMap, LabelMap};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8-bit RGB image as a `3 × H × W` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(3, h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    assert_eq!(t.channels(), 3);
    let img: RgbImage = ImageBuffer::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        let px = |c| (t.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads a single-channel 8-bit class-id map.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(image_err(
                path,
                format!("label maps must be 8-bit grayscale, got {:?}", other.color()),
            ))
        }
    };
    Ok(LabelMap::new(
        gray.width() as usize,
        gray.height() as usize,
        gray.into_raw(),
    ))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(labels.width as u32, labels.height as u32, |x, y| {
        Luma([labels.get(x as usize, y as usize)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes a little-endian single-channel PFM. Invalid pixels are stored as 0.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            let v = if depth.valid[i] { depth.values[i] as f32 } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Reads a single-channel PFM depth raster in meters; zero, negative and
/// non-finite values are invalid.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| DataError::io(path, e))?;
        header.push(line.trim().to_string());
    }
    if header[0] != "Pf" {
        return Err(image_err(path, "expected a single-channel PFM (Pf)"));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| image_err(path, "bad PFM dimensions")))
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(image_err(path, "bad PFM dimensions"));
    };
    let scale: f64 = header[2]
        .parse()
        .map_err(|_| image_err(path, "bad PFM scale"))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| DataError::io(path, e))?;
    if raw.len() != w * h * 4 {
        return Err(image_err(path, format!("expected {} bytes of data, got {}", w * h * 4, raw.len())));
    }
    let mut values = vec![0.0; w * h];
    for (k, b) in raw.chunks_exact(4).enumerate() {
        let b: [u8; 4] = b.try_into().expect("4 bytes");
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (k / w, k % w);
        values[(h - 1 - row) * w + x] = v as f64;
    }
    Ok(DepthMap::from_values(w, h, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip_keeps_values_and_invalid_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = DepthMap::from_values(3, 2, vec![1.5, 0.0, 2.25, 7.0, 80.0, 0.5]);
        write_pfm(&p, &d).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn png_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let l = LabelMap::new(3, 2, vec![0, 1, 2, 255, 6, 3]);
        write_labels(&dir.path().join("l.png"), &l).unwrap();
        assert_eq!(read_labels(&dir.path().join("l.png")).unwrap(), l);
        let t = Tensor::from_fn(3, 2, 4, |c, y, x| ((c * 8 + y * 4 + x) * 10) as f64 / 255.0);
        write_rgb(&dir.path().join("i.png"), &t).unwrap();
        assert!(read_rgb(&dir.path().join("i.png")).unwrap().max_abs_diff(&t) < 1e-12);
    }
}
