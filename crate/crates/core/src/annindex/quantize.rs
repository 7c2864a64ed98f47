//! Per-vector 8-bit scalar quantization.

/// Codes plus the affine map back to reals: `value = offset + code * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub codes: Vec<u8>,
    pub scale: f64,
    pub offset: f64,
}

impl QuantizedVector {
    /// Quantizes over the vector's own [min, max] range.
    pub fn quantize(v: &[f64]) -> Self {
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if v.is_empty() {
            return Self {
                codes: Vec::new(),
                scale: 0.0,
                offset: 0.0,
            };
        }
        if max == min {
            return Self {
                codes: vec![0; v.len()],
                scale: 0.0,
                offset: min,
            };
        }
        let scale = (max - min) / 255.0;
        let codes = v
            .iter()
            .map(|x| ((x - min) / scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        Self {
            codes,
            scale,
            offset: min,
        }
    }

    pub fn dim(&self) -> usize {
        self.codes.len()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&c| self.offset + c as f64 * self.scale)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_range_error_bound() {
        let v: Vec<f64> = (0..101).map(|i| -1.0 + 2.0 * i as f64 / 100.0).collect();
        let q = QuantizedVector::quantize(&v);
        assert!((q.scale - 2.0 / 255.0).abs() < 1e-15);
        let back = q.dequantize();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        assert_eq!(q.codes[0], 0);
        assert_eq!(q.codes[100], 255);
    }

    #[test]
    fn constant_vector_is_exact() {
        let q = QuantizedVector::quantize(&[0.37; 5]);
        assert_eq!(q.scale, 0.0);
        assert_eq!(q.codes, vec![0; 5]);
        assert_eq!(q.dequantize(), vec![0.37; 5]);
    }

    #[test]
    fn grid_points_are_exact() {
        // step 1/128 keeps every grid value exactly representable
        let ks = [0u32, 3, 17, 128, 200, 254, 255];
        let v: Vec<f64> = ks.iter().map(|&k| -1.0 + k as f64 / 128.0).collect();
        let q = QuantizedVector::quantize(&v);
        assert_eq!(q.scale, 1.0 / 128.0);
        assert_eq!(q.dequantize(), v);
    }
}
