//! Grayscale PGM and CSV export of risk maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::CliError;

/// 8-bit levels of a `w x h` row-major map: invalid cells 0, valid cells
/// min-max scaled to 1..=255, a constant map mid gray.
pub fn gray_levels(values: &[f64], mask: &[bool]) -> Vec<u8> {
    let valid = || values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v);
    let lo = valid().fold(f64::INFINITY, f64::min);
    let hi = valid().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if !m {
                0
            } else if hi > lo {
                1 + (254.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        })
        .collect()
}

/// Binary PGM with `w` columns and `h` rows; cell `(x, y)` sits at row-major
/// index `x * h + y` of `levels`.
pub fn pgm_bytes(levels: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(levels[x * h + y]);
        }
    }
    out
}

/// Prediction and truth next to each other with a one-pixel black gutter.
pub fn pair_bytes(pred: &[u8], truth: &[u8], w: usize, h: usize) -> Vec<u8> {
    let cols = 2 * w + 1;
    let mut out = format!("P5 {cols} {h} 255\n").into_bytes();
    for y in 0..h {
        out.extend((0..w).map(|x| pred[x * h + y]));
        out.push(0);
        out.extend((0..w).map(|x| truth[x * h + y]));
    }
    out
}

pub fn write_csv(path: &Path, pred: &[f64], truth: &[f64], mask: &[bool], h: usize) -> Result<(), CliError> {
    let mut text = String::from("x,y,valid,pred,truth\n");
    for (k, ((p, t), m)) in pred.iter().zip(truth).zip(mask).enumerate() {
        writeln!(text, "{},{},{},{p:?},{t:?}", k / h, k % h, u8::from(*m)).unwrap();
    }
    fs::write(path, text).map_err(|e| CliError::path(path, e))
}
