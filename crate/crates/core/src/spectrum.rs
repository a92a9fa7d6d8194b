//! Radially binned power spectrum of a 3D residual.

use ndarray::Array3;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{ensure_finite, DriftError, Result};

/// In-place 3D DFT of a row-major `d x h x w` buffer.
fn fft3(buf: &mut [Complex<f64>], dims: [usize; 3]) {
    let [d, h, w] = dims;
    let mut planner = FftPlanner::new();
    let fx = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        fx.process(row);
    }
    let fy = planner.plan_fft_forward(h);
    let mut line = vec![Complex::default(); h];
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = buf[(z * h + y) * w + x];
            }
            fy.process(&mut line);
            for y in 0..h {
                buf[(z * h + y) * w + x] = line[y];
            }
        }
    }
    let fz = planner.plan_fft_forward(d);
    let mut line = vec![Complex::default(); d];
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = buf[(z * h + y) * w + x];
            }
            fz.process(&mut line);
            for z in 0..d {
                buf[(z * h + y) * w + x] = line[z];
            }
        }
    }
}

/// Absolute frequency of DFT bin `k` of `n`, in cycles per voxel.
fn freq(k: usize, n: usize) -> f64 {
    k.min(n - k) as f64 / n as f64
}

/// Power `|X_k|² / n_voxels` binned into `bands` equal-width radial
/// frequency bands over `[0, 0.5]` cycles per voxel. Corner frequencies above
/// the Nyquist radius fall into the last band, so the bands sum to `Σ r²`.
pub fn radial_power_spectrum(residual: &Array3<f64>, bands: usize) -> Result<Vec<f64>> {
    if bands < 2 {
        return Err(DriftError::invalid(format!("need at least 2 bands, got {bands}")));
    }
    let (d, h, w) = residual.dim();
    if d == 0 || h == 0 || w == 0 {
        return Err(DriftError::invalid("empty residual"));
    }
    ensure_finite(residual.iter(), "residual")?;
    let mut buf: Vec<Complex<f64>> = residual.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft3(&mut buf, [d, h, w]);
    let n = (d * h * w) as f64;
    let mut out = vec![0.0; bands];
    for z in 0..d {
        let fz = freq(z, d);
        for y in 0..h {
            let fy = freq(y, h);
            for x in 0..w {
                let fx = freq(x, w);
                let r = (fz * fz + fy * fy + fx * fx).sqrt();
                let band = ((r / 0.5 * bands as f64) as usize).min(bands - 1);
                out[band] += buf[(z * h + y) * w + x].norm_sqr() / n;
            }
        }
    }
    Ok(out)
}
