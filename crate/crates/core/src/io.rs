// SPDX-License-Identifier: Apache-2.0

//! PNG and file helpers. Every write goes to a sibling temporary file first
//! and is renamed into place.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::Array2;

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::metrics::LabelMap;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode_png(img: DynamicImage, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?;
    Ok(buf.into_inner())
}

/// 16-bit grayscale PNG, pixel value = class id.
pub fn write_label_png(path: &Path, map: &LabelMap) -> Result<()> {
    let (h, w) = map.dim();
    let raw: Vec<u16> = map.labels.iter().copied().collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches");
    write_atomic(path, &encode_png(DynamicImage::ImageLuma16(buf), path)?)
}

pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })?;
    let gray = match img {
        DynamicImage::ImageLuma16(g) => g,
        DynamicImage::ImageLuma8(g) => ImageBuffer::from_fn(g.width(), g.height(), |x, y| {
            Luma([u16::from(g.get_pixel(x, y)[0])])
        }),
        other => {
            return Err(Error::Shape(format!(
                "{}: label maps must be single-channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let labels = Array2::from_shape_vec((h as usize, w as usize), gray.into_raw())
        .expect("buffer size matches");
    Ok(LabelMap::new(labels))
}

/// 8-bit RGB PNG.
pub fn write_image_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let raw: Vec<u8> = image
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf =
        ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    write_atomic(path, &encode_png(DynamicImage::ImageRgb8(buf), path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::IGNORE;
    use ndarray::arr2;

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/map.png");
        let map = LabelMap::new(arr2(&[[0, 1, 300], [IGNORE, 7, 2]]));
        write_label_png(&path, &map).unwrap();
        assert_eq!(read_label_png(&path).unwrap(), map);
        assert!(!dir.path().join("nested/map.png.partial").exists());
    }

    #[test]
    fn rgb_png_is_rejected_as_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ImageTensor::new(ndarray::Array3::from_elem((4, 4, 3), 0.5)).unwrap();
        write_image_png(&path, &img).unwrap();
        assert!(matches!(read_label_png(&path), Err(Error::Shape(_))));
    }
}
