use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TEMPERATURE: f64 = 10_000.0;

/// Fixed 2-D sinusoidal encoding for an `h × w` grid, shape `[h·w, d]`.
///
/// The first `d/2` channels encode the row, the last `d/2` the column. Within
/// each half, channel `2i` is `sin(pos · ω_i)` and `2i+1` is `cos(pos · ω_i)`
/// with `ω_i = TEMPERATURE^(−2i / (d/2))`.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!("positional encoding width {d} must be a positive multiple of 4")));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|i| TEMPERATURE.powf(-((2 * i) as f64) / half as f64)).collect();
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            for (i, f) in freqs.iter().enumerate() {
                row[2 * i] = (y as f64 * f).sin();
                row[2 * i + 1] = (y as f64 * f).cos();
                row[half + 2 * i] = (x as f64 * f).sin();
                row[half + 2 * i + 1] = (x as f64 * f).cos();
            }
        }
    }
    Tensor::new(vec![h * w, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_has_zero_sines_and_unit_cosines() {
        let pe = positional_encoding(4, 4, 16).unwrap();
        let row = &pe.data()[..16];
        for i in 0..8 {
            assert_eq!(row[2 * i], 0.0);
            assert_eq!(row[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn values_bounded_and_rows_distinct() {
        for &(h, w, d) in &[(4, 4, 4), (4, 4, 64), (8, 5, 8), (16, 16, 32)] {
            let pe = positional_encoding(h, w, d).unwrap();
            assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let rows: Vec<&[f64]> = pe.data().chunks(d).collect();
            for i in 0..rows.len() {
                for j in i + 1..rows.len() {
                    assert_ne!(rows[i], rows[j], "rows {i} and {j} coincide for {h}x{w}x{d}");
                }
            }
        }
    }

    #[test]
    fn width_must_be_multiple_of_four() {
        assert!(matches!(positional_encoding(2, 2, 6), Err(Error::Config(_))));
        assert!(positional_encoding(2, 2, 8).is_ok());
    }
}
