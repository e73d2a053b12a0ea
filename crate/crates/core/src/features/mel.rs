//! Mel filterbank construction (HTK mel scale, triangles linear in Hz).

use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank as a dense `n_mels x (n_fft/2 + 1)` weight matrix.
/// Filter `m` rises from edge `m` to center `m+1` and falls to edge `m+2`
/// on the mel-equispaced grid.
pub fn filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<Vec<Vec<f64>>> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels == 0 || fmin < 0.0 || fmax <= fmin || fmax > nyquist {
        return Err(Error::Config(format!(
            "invalid mel range: n_mels={n_mels}, fmin={fmin}, fmax={fmax}, nyquist={nyquist}"
        )));
    }
    let n_bins = n_fft / 2 + 1;
    let edges = edge_frequencies(n_mels, fmin, fmax);
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;

    let mut bank = vec![vec![0.0; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = bin_hz(k);
            if f > lo && f < center {
                bank[m][k] = (f - lo) / (center - lo);
            } else if (f - center).abs() < 1e-12 {
                bank[m][k] = 1.0;
            } else if f > center && f < hi {
                bank[m][k] = (hi - f) / (hi - center);
            }
        }
    }
    Ok(bank)
}

/// `n_mels + 2` mel-equispaced edge frequencies in Hz; centers are indices
/// `1..=n_mels`.
pub fn edge_frequencies(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}
