//! Binary PPM overlays of predictions on a slice.
//!
//! Prediction-only pixels saturate red, ground-truth-only pixels green and
//! agreeing pixels blue. Other channels keep the grayscale base.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::{MaskSlice, Slice2D};
use crate::volume::ValueUnit;

fn gray_levels(s: &Slice2D) -> Vec<u8> {
    let (lo, hi) = match s.unit {
        ValueUnit::Normalized => (0.0, 1.0),
        ValueUnit::Raw => s
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    s.data
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn overlay_ppm(slice: &Slice2D, pred: &MaskSlice, gt: &MaskSlice) -> Result<Vec<u8>> {
    let shape = (slice.height, slice.width);
    for (what, m) in [("prediction", pred), ("ground truth", gt)] {
        if (m.height, m.width) != shape {
            return Err(Error::Input(format!(
                "{what} is {}x{}, slice is {}x{}",
                m.height, m.width, shape.0, shape.1
            )));
        }
    }
    let mut out = format!("P6\n{} {}\n255\n", slice.width, slice.height).into_bytes();
    for ((g, &p), &t) in gray_levels(slice).into_iter().zip(&pred.data).zip(&gt.data) {
        let px = match (p, t) {
            (0, 0) => [g, g, g],
            (_, 0) => [255, g, g],
            (0, _) => [g, 255, g],
            _ => [g, g, 255],
        };
        out.extend_from_slice(&px);
    }
    Ok(out)
}

pub fn render_overlay(slice: &Slice2D, pred: &MaskSlice, gt: &MaskSlice, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = overlay_ppm(slice, pred, gt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice() -> Slice2D {
        Slice2D::from_data(2, 2, vec![0.0, 0.5, 1.0, 0.25], ValueUnit::Normalized).unwrap()
    }

    fn pixels(bytes: &[u8]) -> &[u8] {
        &bytes[b"P6\n2 2\n255\n".len()..]
    }

    #[test]
    fn empty_masks_give_grayscale() {
        let none = MaskSlice::new(2, 2, vec![0; 4]).unwrap();
        let b = overlay_ppm(&slice(), &none, &none).unwrap();
        assert!(b.starts_with(b"P6\n2 2\n255\n"));
        assert!(pixels(&b).chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn agreement_only_tints_blue() {
        let m = MaskSlice::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        let b = overlay_ppm(&slice(), &m, &m).unwrap();
        let px: Vec<&[u8]> = pixels(&b).chunks(3).collect();
        assert_eq!(px[0], [0, 0, 255]);
        assert_eq!(px[2], [255, 255, 255]);
        assert!(px[1][0] == px[1][1] && px[1][1] == px[1][2]);
        assert_eq!(b, overlay_ppm(&slice(), &m, &m).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = MaskSlice::new(1, 4, vec![0; 4]).unwrap();
        assert!(overlay_ppm(&slice(), &m, &m).is_err());
    }
}
