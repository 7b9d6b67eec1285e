//! In-place iterative radix-2 FFT.

use alloc::vec::Vec;

use crate::scalar::Real;

/// Precomputed twiddles and bit-reversal table for one power-of-two size.
#[derive(Debug, Clone)]
pub struct Fft<S> {
    n: usize,
    cos: Vec<S>,
    sin: Vec<S>,
    rev: Vec<usize>,
}

impl<S: Real> Fft<S> {
    /// Panics unless `n` is a power of two.
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size {n} is not a power of two");
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let step = -2.0 * core::f64::consts::PI / n as f64;
        let (cos, sin) = (0..n / 2)
            .map(|k| {
                let a = step * k as f64;
                (S::lit(libm_cos(a)), S::lit(libm_sin(a)))
            })
            .unzip();
        Self { n, cos, sin, rev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform `X_k = sum_n x_n e^{-2 pi i k n / N}` (unnormalised).
    pub fn forward(&self, re: &mut [S], im: &mut [S]) {
        self.run(re, im, false);
    }

    /// Inverse transform without the `1/N` factor.
    pub fn inverse_unscaled(&self, re: &mut [S], im: &mut [S]) {
        self.run(re, im, true);
    }

    fn run(&self, re: &mut [S], im: &mut [S], inverse: bool) {
        let n = self.n;
        assert!(re.len() == n && im.len() == n);
        for i in 0..n {
            let j = self.rev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let wr = self.cos[k * stride];
                    let wi = if inverse { -self.sin[k * stride] } else { self.sin[k * stride] };
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len *= 2;
        }
    }
}

fn libm_cos(a: f64) -> f64 {
    num_traits::Float::cos(a)
}

fn libm_sin(a: f64) -> f64 {
    num_traits::Float::sin(a)
}
