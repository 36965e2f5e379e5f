//! 8-bit grayscale heatmaps.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::Field;

/// Linear map of `[lo, hi]` onto `0..=255`; a flat range maps to 0.
pub fn to_gray(field: &Field<f64>, range: Option<(f64, f64)>) -> Vec<u8> {
    let data = field.as_slice();
    let (lo, hi) = range.unwrap_or_else(|| {
        data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let span = hi - lo;
    data.iter()
        .map(|&v| {
            if !(span > 0.0) || !v.is_finite() {
                0
            } else {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect()
}

/// Binary PGM (`P5`), row 0 at the top.
pub fn write_pgm<W: Write>(out: &mut W, field: &Field<f64>, range: Option<(f64, f64)>) -> Result<()> {
    write!(out, "P5\n{} {}\n255\n", field.width(), field.height())?;
    out.write_all(&to_gray(field, range))?;
    Ok(())
}

pub fn write_png<W: Write>(out: W, field: &Field<f64>, range: Option<(f64, f64)>) -> Result<()> {
    let mut enc = png::Encoder::new(out, field.width() as u32, field.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Io(e.to_string()))?;
    w.write_image_data(&to_gray(field, range)).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let f = Field::from_rows(&[vec![0.0, 1.0], vec![0.5, 2.0]]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &f, Some((0.0, 1.0))).unwrap();
        assert!(buf.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&buf[buf.len() - 4..], &[0, 255, 128, 255]);
    }

    #[test]
    fn png_round_trips_through_the_decoder() {
        let f = Field::from_fn(3, 5, |i, j| (i * 5 + j) as f64);
        let mut buf = Vec::new();
        write_png(&mut buf, &f, None).unwrap();
        let dec = png::Decoder::new(buf.as_slice());
        let mut reader = dec.read_info().unwrap();
        let mut img = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut img).unwrap();
        assert_eq!((info.width, info.height), (5, 3));
        assert_eq!(&img[..info.buffer_size()], to_gray(&f, None).as_slice());
    }
}
