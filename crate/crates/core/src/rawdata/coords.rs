use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `2×H×W` map of normalized pixel coordinates: channel 0 is x, channel 1 is y,
/// both spanning `[-1, 1]` with exact ±1 at the borders.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateMap(pub Tensor<f32>);

impl CoordinateMap {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

/// `(2i − (n−1)) / (n−1)`: the numerator is an exact integer, so mirrored
/// positions are exact negations of each other.
fn axis(n: usize) -> Vec<f32> {
    let d = (n - 1) as f64;
    (0..n).map(|i| ((2 * i) as f64 - d) / d).map(|v| v as f32).collect()
}

pub fn coordinate_map(h: usize, w: usize) -> Result<CoordinateMap> {
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("coordinate map needs H, W >= 2, got {h}×{w}")));
    }
    let xs = axis(w);
    let ys = axis(h);
    let mut t = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            t.set3(0, y, x, xs[x]);
            t.set3(1, y, x, ys[y]);
        }
    }
    Ok(CoordinateMap(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_maps() {
        assert!(coordinate_map(1, 3).is_err());
        let m = coordinate_map(3, 3).unwrap();
        for y in 0..3 {
            assert_eq!([m.0.at3(0, y, 0), m.0.at3(0, y, 1), m.0.at3(0, y, 2)], [-1.0, 0.0, 1.0]);
        }
        let m = coordinate_map(2, 2).unwrap();
        assert_eq!(m.0.data(), &[-1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_grid_448() {
        let m = coordinate_map(448, 448).unwrap();
        let step = 2.0 / 447.0;
        for x in 1..448 {
            let d = (m.0.at3(0, 0, x) - m.0.at3(0, 0, x - 1)) as f64;
            assert!((d - step).abs() < 1e-6);
            assert!(m.0.at3(0, 0, x) > m.0.at3(0, 0, x - 1));
        }
        assert_eq!(m.0.at3(1, 447, 5), 1.0);
    }

    #[test]
    fn flip_antisymmetry() {
        for (h, w) in [(5, 8), (64, 63), (2, 9)] {
            let m = coordinate_map(h, w).unwrap();
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(m.0.at3(0, y, w - 1 - x), -m.0.at3(0, y, x));
                    assert_eq!(m.0.at3(1, h - 1 - y, x), -m.0.at3(1, y, x));
                }
            }
        }
    }
}
