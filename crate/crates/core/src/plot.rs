//! PNG scatter plots of 2-D samples, coloured by condition.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::condition::Condition;
use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 8] = [
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
    [166, 86, 40],
    [247, 129, 191],
    [90, 90, 90],
];

/// Renders points inside `[lo, hi]^2` onto a `size x size` canvas; points
/// outside the box are skipped. `marks` are drawn as black crosses.
pub fn scatter(
    points: ArrayView2<f64>,
    cond: &[Condition],
    marks: &[Vec<f64>],
    lo: f64,
    hi: f64,
    size: u32,
) -> Result<RgbImage> {
    if points.ncols() != 2 {
        return Err(Error::invalid("scatter plots need 2-D points"));
    }
    if cond.len() != points.nrows() {
        return Err(Error::invalid("one condition per point required"));
    }
    if !(hi > lo) || size < 8 {
        return Err(Error::invalid("bad plot extent"));
    }
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let to_px = |v: f64, flip: bool| -> Option<u32> {
        let u = (v - lo) / (hi - lo);
        if !(0.0..1.0).contains(&u) {
            return None;
        }
        let p = (u * size as f64) as u32;
        Some(if flip { size - 1 - p } else { p })
    };
    for (row, c) in points.rows().into_iter().zip(cond) {
        let (Some(px), Some(py)) = (to_px(row[0], false), to_px(row[1], true)) else {
            continue;
        };
        let color = match c {
            Condition::Class(i) => PALETTE[i % PALETTE.len()],
            Condition::Null => [0, 0, 0],
        };
        for dx in 0..2 {
            for dy in 0..2 {
                if px + dx < size && py + dy < size {
                    img.put_pixel(px + dx, py + dy, Rgb(color));
                }
            }
        }
    }
    for m in marks {
        let (Some(px), Some(py)) = (to_px(m[0], false), to_px(m[1], true)) else {
            continue;
        };
        for d in -4i64..=4 {
            for (x, y) in [(px as i64 + d, py as i64), (px as i64, py as i64 + d)] {
                if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, Rgb([0, 0, 0]));
                }
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_points_and_skips_outliers() {
        let pts = ndarray::array![[0.0, 0.0], [5.0, 5.0]];
        let img = scatter(
            pts.view(),
            &[Condition::Class(1), Condition::Class(0)],
            &[],
            -1.0,
            1.0,
            64,
        )
        .unwrap();
        assert_eq!(*img.get_pixel(32, 31), Rgb(PALETTE[1]));
        let coloured = img.pixels().filter(|p| **p != Rgb([255, 255, 255])).count();
        assert_eq!(coloured, 4);
    }

    #[test]
    fn png_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let pts = ndarray::array![[0.1, 0.2], [-0.5, 0.7]];
        let img = scatter(
            pts.view(),
            &[Condition::Null; 2],
            &[vec![0.0, 0.0]],
            -1.6,
            1.6,
            128,
        )
        .unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save_png(&img, &a).unwrap();
        save_png(&img, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
