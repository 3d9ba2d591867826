//! Two-dimensional discrete Fourier transforms over the trailing two axes.
//!
//! Forward transforms are unnormalized; inverse transforms scale by
//! `1 / (H * W)`, so `ifft2d(fft2d(x)) == x`. Extents must be powers of two.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{BggError, Result};
use crate::tensor::{ComplexTensor, Tensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Direction {
    Forward,
    Inverse,
}

pub(crate) fn check_extent(axis: &str, n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(BggError::Config(format!("FFT extent {axis}={n} is not a power of two")));
    }
    Ok(())
}

fn grid_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(BggError::dim("fft2d", format!("need at least two axes, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    check_extent("H", h)?;
    check_extent("W", w)?;
    let slabs = shape[..shape.len() - 2].iter().product();
    Ok((slabs, h, w))
}

/// In-place 2-D transform of `slabs` consecutive `h x w` planes.
pub(crate) fn transform_planes(re: &mut [f64], im: &mut [f64], slabs: usize, h: usize, w: usize, dir: Direction) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_fft, col_fft) = match dir {
            Direction::Forward => (planner.plan_fft_forward(w), planner.plan_fft_forward(h)),
            Direction::Inverse => (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h)),
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        let norm = match dir {
            Direction::Forward => 1.0,
            Direction::Inverse => 1.0 / (h * w) as f64,
        };
        for s in 0..slabs {
            let off = s * h * w;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = Complex64::new(re[off + i], im[off + i]);
            }
            row_fft.process(&mut buf);
            for x in 0..w {
                for y in 0..h {
                    col[y] = buf[y * w + x];
                }
                col_fft.process(&mut col);
                for y in 0..h {
                    buf[y * w + x] = col[y];
                }
            }
            for (i, c) in buf.iter().enumerate() {
                re[off + i] = c.re * norm;
                im[off + i] = c.im * norm;
            }
        }
    });
}

fn run(x: &ComplexTensor, dir: Direction) -> Result<ComplexTensor> {
    let (slabs, h, w) = grid_dims(x.shape())?;
    let mut out = x.clone();
    transform_planes(&mut out.re, &mut out.im, slabs, h, w, dir);
    Ok(out)
}

pub fn fft2d(x: &ComplexTensor) -> Result<ComplexTensor> {
    run(x, Direction::Forward)
}

pub fn ifft2d(x: &ComplexTensor) -> Result<ComplexTensor> {
    run(x, Direction::Inverse)
}

pub fn fft2d_real(x: &Tensor) -> Result<ComplexTensor> {
    fft2d(&ComplexTensor::from_real(x))
}
