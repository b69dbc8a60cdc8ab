use crate::error::{Error, Result};

/// Channel 2i = sin(pos / 10000^(2i/d)), channel 2i+1 = cos of the same
/// angle. Positions may be fractional.
pub fn sinusoid(pos: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid(format!("sinusoidal embedding needs an even width, got {d}")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = pos / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Stacked embeddings, [positions.len(), d] row-major.
pub fn sinusoid_table(positions: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        out.extend(sinusoid(p, d)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates() {
        assert_eq!(sinusoid(0.0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_one_width_four() {
        let e = sinusoid(1.0, 4).unwrap();
        let f = 10000f64.powf(-0.5);
        let want = [1f64.sin(), 1f64.cos(), f.sin(), f.cos()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoid(1.0, 5).is_err());
    }

    #[test]
    fn bounded() {
        for p in [0.0, 0.5, 3.25, 17.0, 1234.5] {
            assert!(sinusoid(p, 32).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
