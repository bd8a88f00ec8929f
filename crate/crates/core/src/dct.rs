//! Orthonormal 8×8 DCT-II and blockwise coefficient quantization.

use std::sync::OnceLock;

pub const BLOCK: usize = 8;

fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; BLOCK]; BLOCK];
        let n = BLOCK as f64;
        for (k, row) in b.iter_mut().enumerate() {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = scale * (std::f64::consts::PI * (2 * x + 1) as f64 * k as f64 / (2.0 * n)).cos();
            }
        }
        b
    })
}

pub type Block = [[f64; BLOCK]; BLOCK];

pub fn dct2(block: &Block) -> Block {
    let b = basis();
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for y in 0..BLOCK {
        for k in 0..BLOCK {
            tmp[y][k] = (0..BLOCK).map(|x| b[k][x] * block[y][x]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for u in 0..BLOCK {
        for k in 0..BLOCK {
            out[u][k] = (0..BLOCK).map(|y| b[u][y] * tmp[y][k]).sum();
        }
    }
    out
}

pub fn idct2(coeffs: &Block) -> Block {
    let b = basis();
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for y in 0..BLOCK {
        for k in 0..BLOCK {
            tmp[y][k] = (0..BLOCK).map(|u| b[u][y] * coeffs[u][k]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            out[y][x] = (0..BLOCK).map(|k| b[k][x] * tmp[y][k]).sum();
        }
    }
    out
}

/// Quantize every 8×8 block of an `h×w` plane (row-major) to multiples of
/// `step` in the DCT domain and transform back, in place.
pub fn quantize_plane(plane: &mut [f64], h: usize, w: usize, step: f64) {
    assert!(h % BLOCK == 0 && w % BLOCK == 0, "plane must tile into 8x8 blocks");
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            let mut block = [[0.0; BLOCK]; BLOCK];
            for (y, row) in block.iter_mut().enumerate() {
                row.copy_from_slice(&plane[(by + y) * w + bx..(by + y) * w + bx + BLOCK]);
            }
            let mut c = dct2(&block);
            for row in c.iter_mut() {
                for v in row.iter_mut() {
                    *v = (*v / step).round() * step;
                }
            }
            let back = idct2(&c);
            for (y, row) in back.iter().enumerate() {
                plane[(by + y) * w + bx..(by + y) * w + bx + BLOCK].copy_from_slice(row);
            }
        }
    }
}
