//! Fixed sinusoidal positional encodings.

use crate::tensor::Tensor;

fn frequency(i: usize, half: usize) -> f64 {
    1.0 / 10_000f64.powf(i as f64 / half as f64)
}

/// `[len, dim]` table: even columns `sin(pos * w_i)`, odd columns `cos(pos * w_i)`.
pub fn sinusoidal_1d(len: usize, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "positional encoding dim must be even");
    let half = dim / 2;
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..half {
            let a = pos as f64 * frequency(i, half);
            data[pos * dim + 2 * i] = a.sin();
            data[pos * dim + 2 * i + 1] = a.cos();
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

/// `[h*w, dim]` table for a row-major grid: the first half of the channels
/// encodes the row, the second half the column.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "2-D positional encoding dim must be a multiple of 4");
    let half = dim / 2;
    let rows = sinusoidal_1d(h, half);
    let cols = sinusoidal_1d(w, half);
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(rows.row(y));
            data.extend_from_slice(cols.row(x));
        }
    }
    Tensor::from_parts(vec![h * w, dim], data)
}

/// Sine embedding of normalized boxes `[n, 4]` into `[n, dim]`
/// (`dim / 4` channels per coordinate, angles scaled by 2π).
pub fn box_sine_embedding(boxes: &Tensor, dim: usize) -> Tensor {
    assert!(dim % 8 == 0, "box embedding dim must be a multiple of 8");
    assert_eq!(boxes.cols(), 4);
    let per = dim / 4;
    let half = per / 2;
    let n = boxes.rows();
    let mut data = vec![0.0; n * dim];
    for r in 0..n {
        for (c, &coord) in boxes.row(r).iter().enumerate() {
            for i in 0..half {
                let a = coord * std::f64::consts::TAU * 10_000f64.powf(-(i as f64) / half as f64) * 8.0;
                data[r * dim + c * per + 2 * i] = a.sin();
                data[r * dim + c * per + 2 * i + 1] = a.cos();
            }
        }
    }
    Tensor::from_parts(vec![n, dim], data)
}
