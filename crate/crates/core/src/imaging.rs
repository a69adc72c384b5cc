//! Grid-level image operations: rotation about the frame center, Gaussian
//! smoothing and resampling.

use ndarray::Array2;

use crate::dataset::Grid;
use crate::error::{Error, Result};

/// Radius of the disc kept by [`rotate`]. Every pixel inside it samples
/// bilinear neighbours that lie inside the frame for any angle.
pub fn disc_radius(n: usize) -> f64 {
    n as f64 / 2.0 - 1.0
}

/// Rotates `g` by `degrees` about its center with bilinear interpolation and
/// zeroes every pixel outside the inscribed disc, so all angles share the
/// same support.
pub fn rotate(g: &Grid, degrees: f64) -> Grid {
    rotate_impl(g, degrees, true)
}

/// Rotation without the disc mask; samples falling outside the frame are 0.
pub fn rotate_unmasked(g: &Grid, degrees: f64) -> Grid {
    rotate_impl(g, degrees, false)
}

fn rotate_impl(g: &Grid, degrees: f64, mask: bool) -> Grid {
    let (h, w) = g.dim();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let radius = disc_radius(h.min(w));
    let (s, c) = degrees.to_radians().sin_cos();
    let sample = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            g[[yy as usize, xx as usize]] as f64
        }
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let y = i as f64 + 0.5 - cy;
        let x = j as f64 + 0.5 - cx;
        if mask && (x * x + y * y).sqrt() > radius {
            return 0.0;
        }
        let xs = c * x + s * y;
        let ys = -s * x + c * y;
        let u = xs + cx - 0.5;
        let v = ys + cy - 0.5;
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let (u0, v0) = (u0 as isize, v0 as isize);
        let top = sample(v0, u0) * (1.0 - fu) + sample(v0, u0 + 1) * fu;
        let bot = sample(v0 + 1, u0) * (1.0 - fu) + sample(v0 + 1, u0 + 1) * fu;
        (top * (1.0 - fv) + bot * fv) as f32
    })
}

/// Separable Gaussian blur; the kernel is truncated at 3 sigma and
/// renormalized at the borders.
pub fn gaussian_smooth(g: &Grid, sigma: f64) -> Grid {
    if sigma <= 0.0 {
        return g.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (h, w) = g.dim();
    let pass = |src: &Grid, horizontal: bool| -> Grid {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let d = t as isize - r;
                let (ii, jj) = if horizontal {
                    (i as isize, j as isize + d)
                } else {
                    (i as isize + d, j as isize)
                };
                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                    acc += kv * src[[ii as usize, jj as usize]] as f64;
                    norm += kv;
                }
            }
            (acc / norm) as f32
        })
    };
    pass(&pass(g, true), false)
}

/// Center-crops to the largest multiple of `size` and average-pools down to
/// `size x size`.
pub fn resample(g: &Grid, size: usize) -> Result<Grid> {
    let (h, w) = g.dim();
    let n = h.min(w);
    if size == 0 || n < size {
        return Err(Error::Shape(format!(
            "cannot resample {h}x{w} frame to {size}x{size}"
        )));
    }
    if h == size && w == size {
        return Ok(g.clone());
    }
    let factor = n / size;
    let crop = factor * size;
    let (oy, ox) = ((h - crop) / 2, (w - crop) / 2);
    let inv = 1.0 / (factor * factor) as f64;
    Ok(Array2::from_shape_fn((size, size), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..factor {
            for b in 0..factor {
                acc += g[[oy + i * factor + a, ox + j * factor + b]] as f64;
            }
        }
        (acc * inv) as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bump(n: usize) -> Grid {
        Array2::from_shape_fn((n, n), |(i, j)| {
            let y = i as f64 - 20.0;
            let x = j as f64 - 35.0;
            (-(x * x + y * y) / 40.0).exp() as f32
        })
    }

    #[test]
    fn full_turn_matches_zero_turn() {
        let g = bump(64);
        let a = rotate(&g, 0.0);
        let b = rotate(&g, 360.0);
        let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5, "max diff {diff}");
    }

    #[test]
    fn zero_turn_is_identity_inside_disc() {
        let g = bump(16);
        let r = rotate(&g, 0.0);
        for ((i, j), &v) in r.indexed_iter() {
            let (y, x) = (i as f64 + 0.5 - 8.0, j as f64 + 0.5 - 8.0);
            if (x * x + y * y).sqrt() <= disc_radius(16) {
                assert_eq!(v, g[[i, j]]);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn constant_field_is_exactly_rotation_invariant() {
        let g = Grid::from_elem((32, 32), 0.7);
        let base = rotate(&g, 0.0);
        for deg in [36.0, 72.0, 123.4, 288.0] {
            let r = rotate(&g, deg);
            for (a, b) in r.iter().zip(base.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quarter_turns_compose() {
        let g = bump(32);
        let twice = rotate_unmasked(&rotate_unmasked(&g, 90.0), 90.0);
        let once = rotate_unmasked(&g, 180.0);
        for (a, b) in twice.iter().zip(once.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn smoothing_preserves_constants_and_resample_averages() {
        let g = Grid::from_elem((9, 9), 2.0);
        let s = gaussian_smooth(&g, 1.5);
        assert!(s.iter().all(|&v| (v - 2.0).abs() < 1e-6));
        let g = Array2::from_shape_fn((5, 5), |(i, j)| (i * 5 + j) as f32);
        let r = resample(&g, 2).unwrap();
        // crop 4x4 at offset 0, pool 2x2
        assert_eq!(r[[0, 0]], (0.0 + 1.0 + 5.0 + 6.0) / 4.0);
        assert!(resample(&g, 6).is_err());
        let g = Grid::zeros((201, 201));
        assert_eq!(resample(&g, 64).unwrap().dim(), (64, 64));
    }
}
