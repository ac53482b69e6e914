//! Binary PPM (P6) emission for reconstructions and masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an H x W x 3 image in [0, 1] as binary PPM bytes.
pub fn encode_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.dims() {
        [h, w, 3] => (*h, *w),
        other => {
            return Err(Error::Shape {
                op: "ppm_encode",
                lhs: format!("{other:?}"),
                rhs: "H x W x 3 image required".into(),
            })
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| to_byte(*v)));
    Ok(out)
}

/// Encodes an H x W map in [0, 1] as a grayscale PPM.
pub fn encode_gray(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match map.dims() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::Shape {
                op: "ppm_encode",
                lhs: format!("{other:?}"),
                rhs: "H x W map required".into(),
            })
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in map.data() {
        let b = to_byte(*v);
        out.extend_from_slice(&[b, b, b]);
    }
    Ok(out)
}

/// Distinct fill colors for label visualizations (index 0 is background).
pub fn label_color(label: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 10] = [
        [0.15, 0.15, 0.15],
        [0.90, 0.10, 0.10],
        [0.10, 0.75, 0.10],
        [0.15, 0.35, 0.95],
        [0.95, 0.80, 0.10],
        [0.80, 0.15, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.35, 0.15],
        [0.75, 0.75, 0.75],
    ];
    PALETTE[label % PALETTE.len()]
}

/// Colorizes an H x W label map and encodes it as PPM.
pub fn encode_labels(labels: &[usize], h: usize, w: usize) -> Result<Vec<u8>> {
    if labels.len() != h * w {
        return Err(Error::Shape {
            op: "ppm_encode",
            lhs: format!("{} labels", labels.len()),
            rhs: format!("{h} x {w} map"),
        });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for l in labels {
        let c = label_color(*l);
        out.extend_from_slice(&[to_byte(c[0]), to_byte(c[1]), to_byte(c[2])]);
    }
    Ok(out)
}

pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_rgb(image)?).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_gray(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_gray(map)?).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_labels(path: &Path, labels: &[usize], h: usize, w: usize) -> Result<()> {
    fs::write(path, encode_labels(labels, h, w)?)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_layout() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.25]).unwrap();
        let bytes = encode_rgb(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 255, 0, 64]);
    }

    #[test]
    fn clamps_out_of_range() {
        let img = Tensor::new(vec![1, 1, 3], vec![-0.5, 2.0, 0.5]).unwrap();
        let bytes = encode_rgb(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 255, 128]);
    }
}
