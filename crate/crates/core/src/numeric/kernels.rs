//! Raw f32 kernels shared by the autograd ops and the non-differentiable
//! signal code. Everything here works on flat row-major slices.

use std::f32::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

/// A read-only strided view of a matrix stored in a flat slice.
#[derive(Clone, Copy)]
pub struct MatView<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatView<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `[rows, cols]` buffer, seen as `[cols, rows]`.
    pub fn transposed(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// A mutable strided matrix view.
pub struct MatViewMut<'a> {
    pub data: &'a mut [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatViewMut<'a> {
    pub fn row_major(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = a·b + beta·c`.
pub fn gemm(a: MatView<'_>, b: MatView<'_>, c: MatViewMut<'_>, beta: f32) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm rows");
    assert_eq!(b.cols, c.cols, "gemm cols");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by sgemm is bounded by the `check`s above.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-major `[m,k]·[k,n]` into a fresh buffer.
pub fn matmul(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    gemm(
        MatView::row_major(a, m, k),
        MatView::row_major(b, k, n),
        MatViewMut::row_major(&mut out, m, n),
        0.0,
    );
    out
}

pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Row-wise numerically stable softmax in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of a 1-D transposed convolution.
pub fn conv_transpose_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if len == 0 || stride == 0 {
        return None;
    }
    ((len - 1) * stride + kernel).checked_sub(2 * pad)
}

/// Unfold `[c_in, len]` into columns `[c_in*kernel, out_len]`.
pub fn im2col(
    x: &[f32],
    c_in: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Vec<f32> {
    let mut cols = vec![0.0; c_in * kernel * out_len];
    for c in 0..c_in {
        let xc = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let row = &mut cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * stride + k) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    *slot = xc[pos as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[c_in, len]`.
pub fn col2im(
    cols: &[f32],
    c_in: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    x: &mut [f32],
) {
    for c in 0..c_in {
        for k in 0..kernel {
            let row = &cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            for (t, v) in row.iter().enumerate() {
                let pos = (t * stride + k) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    x[c * len + pos as usize] += v;
                }
            }
        }
    }
}

pub fn hann(n: usize) -> Vec<f32> {
    // periodic Hann, the usual choice for STFT analysis
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f32 / n as f32).cos())
        .collect()
}

pub fn stft_frames(len: usize, fft: usize, hop: usize) -> usize {
    if len < fft {
        0
    } else {
        (len - fft) / hop + 1
    }
}

/// Short-time Fourier analysis with a periodic Hann window; frames are not
/// centred, so frame `f` covers samples `[f*hop, f*hop+fft)`.
pub struct Stft {
    pub fft: usize,
    pub hop: usize,
    window: Vec<f32>,
    window_sum: f32,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl Stft {
    pub fn new(fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        let window = hann(fft);
        let window_sum = window.iter().sum();
        Self {
            fft,
            hop,
            window,
            window_sum,
            forward: planner.plan_fft_forward(fft),
            inverse: planner.plan_fft_inverse(fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.fft / 2 + 1
    }

    pub fn window(&self) -> &[f32] {
        &self.window
    }

    /// Raw one-sided complex spectra (no normalization), `[frames][bins]`.
    pub fn complex(&self, x: &[f32]) -> Vec<Vec<Complex32>> {
        let frames = stft_frames(x.len(), self.fft, self.hop);
        let mut buf = vec![Complex32::new(0.0, 0.0); self.fft];
        (0..frames)
            .map(|f| {
                let seg = &x[f * self.hop..f * self.hop + self.fft];
                for ((b, s), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                    *b = Complex32::new(s * w, 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.bins()].to_vec()
            })
            .collect()
    }

    /// Magnitudes normalized by the window sum, so a full-scale sinusoid of
    /// amplitude `a` peaks near `a/2`. Returns `[frames*bins]` plus the raw
    /// normalized spectra kept for the backward pass.
    pub fn magnitude(&self, x: &[f32]) -> (Vec<f32>, Vec<Complex32>) {
        let spectra = self.complex(x);
        let scale = 1.0 / self.window_sum;
        let mut mags = Vec::with_capacity(spectra.len() * self.bins());
        let mut keep = Vec::with_capacity(spectra.len() * self.bins());
        for frame in spectra {
            for c in frame {
                let c = c * scale;
                mags.push((c.re * c.re + c.im * c.im + 1e-12).sqrt());
                keep.push(c);
            }
        }
        (mags, keep)
    }

    /// Backward of [`Stft::magnitude`]; accumulates into `dx`.
    pub fn magnitude_backward(
        &self,
        spectra: &[Complex32],
        mags: &[f32],
        dmag: &[f32],
        dx: &mut [f32],
    ) {
        let bins = self.bins();
        let frames = mags.len() / bins;
        let scale = 1.0 / self.window_sum;
        let mut buf = vec![Complex32::new(0.0, 0.0); self.fft];
        for f in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex32::new(0.0, 0.0));
            for k in 0..bins {
                let i = f * bins + k;
                let g = dmag[i] / mags[i];
                // d|c|/d(re,im) = (re,im)/|c|
                buf[k] = Complex32::new(g * spectra[i].re, g * spectra[i].im);
            }
            self.inverse.process(&mut buf);
            let seg = &mut dx[f * self.hop..f * self.hop + self.fft];
            for ((d, b), w) in seg.iter_mut().zip(&buf).zip(&self.window) {
                *d += b.re * w * scale;
            }
        }
    }
}

fn hz_to_mel(f: f32) -> f32 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f32) -> f32 {
    700.0 * (10f32.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank `[bins, n_mels]` spanning 0..sr/2.
pub fn mel_filterbank(fft: usize, n_mels: usize, sample_rate: u32) -> Vec<f32> {
    let bins = fft / 2 + 1;
    let nyquist = sample_rate as f32 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f32> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f32 / (n_mels + 1) as f32))
        .collect();
    let bin_hz = sample_rate as f32 / fft as f32;
    let mut fb = vec![0.0; bins * n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f32 * bin_hz;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[b * n_mels + m] = w;
        }
    }
    fb
}

/// Centre frequency of each mel band.
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f32> {
    let mel_max = hz_to_mel(sample_rate as f32 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_max * i as f32 / (n_mels + 1) as f32))
        .collect()
}

/// Lower and upper frequency edges of mel band `m`.
pub fn mel_band_edges(m: usize, n_mels: usize, sample_rate: u32) -> (f32, f32) {
    let mel_max = hz_to_mel(sample_rate as f32 / 2.0);
    let at = |i: usize| mel_to_hz(mel_max * i as f32 / (n_mels + 1) as f32);
    (at(m), at(m + 2))
}
