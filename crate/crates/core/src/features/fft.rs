//! Iterative radix-2 FFT for real-input spectra.

use crate::error::{Error, Result};

/// In-place complex FFT over parallel real/imaginary arrays whose length
/// must be a power of two.
pub fn fft_radix2(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    let n = re.len();
    if n == 0 || !n.is_power_of_two() || im.len() != n {
        return Err(Error::Contract(format!(
            "fft needs matching power-of-two buffers, got {} / {}",
            n,
            im.len()
        )));
    }
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) & (n - 1);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    // Danielson-Lanczos stages.
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut cur_re = 1.0;
            let mut cur_im = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let t_re = cur_re * re[b] - cur_im * im[b];
                let t_im = cur_re * im[b] + cur_im * re[b];
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] += t_re;
                im[a] += t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Power spectrum (|X_k|^2) of a real signal zero-padded to `n_fft`;
/// returns the `n_fft/2 + 1` non-redundant bins.
pub fn power_spectrum(signal: &[f64], n_fft: usize) -> Result<Vec<f64>> {
    if signal.len() > n_fft {
        return Err(Error::Contract(format!(
            "frame of {} samples exceeds n_fft {}",
            signal.len(),
            n_fft
        )));
    }
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    re[..signal.len()].copy_from_slice(signal);
    fft_radix2(&mut re, &mut im)?;
    Ok((0..=n_fft / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect())
}
