//! PCM audio to normalized log-mel feature matrices, with speed perturbation.

pub mod fft;
pub mod mel;
pub mod smf;
pub mod wav;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mono audio at a fixed sample rate, samples in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("empty waveform".into()));
        }
        if !matches!(sample_rate, 8000 | 16000) {
            return Err(Error::Input(format!("unsupported sample rate {sample_rate}")));
        }
        Ok(Waveform { samples, sample_rate })
    }
}

/// T x D feature frames plus the frame shift used to produce them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    utt_id: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub frame_shift_ms: f64,
}

impl FeatureMatrix {
    pub fn new(utt_id: String, rows: usize, cols: usize, data: Vec<f64>, frame_shift_ms: f64) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "feature matrix {rows}x{cols} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature value in {utt_id}")));
        }
        Ok(FeatureMatrix { utt_id, rows, cols, data, frame_shift_ms })
    }

    pub fn utt_id(&self) -> &str {
        &self.utt_id
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }
    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.rows, self.cols], self.data.clone()).expect("valid matrix")
    }
}

/// Log-mel front-end parameters.
#[derive(Clone, Debug)]
pub struct FeatureConfig {
    pub n_fft: usize,
    pub win_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Total output dims; dims beyond `n_mels` are zero-filled pitch slots.
    pub num_dims: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_fft: 512,
            win_ms: 25.0,
            shift_ms: 10.0,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            num_dims: 83,
        }
    }
}

/// Log floor added to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Short-time log-mel analysis with a Hann window; frames are hopped by
/// `shift_ms` and the count is `1 + floor((len - win) / shift)`.
pub fn log_mel(w: &Waveform, cfg: &FeatureConfig, utt_id: &str) -> Result<FeatureMatrix> {
    let sr = w.sample_rate as f64;
    if cfg.win_ms < cfg.shift_ms {
        return Err(Error::Config(format!(
            "window {} ms shorter than shift {} ms",
            cfg.win_ms, cfg.shift_ms
        )));
    }
    if cfg.num_dims < cfg.n_mels {
        return Err(Error::Config(format!(
            "num_dims {} below n_mels {}",
            cfg.num_dims, cfg.n_mels
        )));
    }
    let win = (cfg.win_ms * sr / 1000.0).round() as usize;
    let shift = (cfg.shift_ms * sr / 1000.0).round() as usize;
    if win == 0 || shift == 0 {
        return Err(Error::Config("degenerate window/shift".into()));
    }
    if cfg.n_fft < win || !cfg.n_fft.is_power_of_two() {
        return Err(Error::Config(format!(
            "n_fft {} must be a power of two >= window length {win}",
            cfg.n_fft
        )));
    }
    if w.samples.len() < win {
        return Err(Error::Input(format!(
            "{utt_id}: {} samples shorter than one {win}-sample window",
            w.samples.len()
        )));
    }
    let bank = mel::filterbank(cfg.n_mels, cfg.n_fft, w.sample_rate, cfg.fmin, cfg.fmax)?;
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
        .collect();

    let n_frames = 1 + (w.samples.len() - win) / shift;
    let mut data = vec![0.0; n_frames * cfg.num_dims];
    let mut frame = vec![0.0; win];
    for t in 0..n_frames {
        let start = t * shift;
        for i in 0..win {
            frame[i] = w.samples[start + i] * hann[i];
        }
        let power = fft::power_spectrum(&frame, cfg.n_fft)?;
        let out = &mut data[t * cfg.num_dims..t * cfg.num_dims + cfg.n_mels];
        for (m, filt) in bank.iter().enumerate() {
            let energy: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out[m] = (energy + LOG_FLOOR).ln();
        }
        // dims n_mels..num_dims stay zero (pitch placeholders)
    }
    FeatureMatrix::new(utt_id.to_string(), n_frames, cfg.num_dims, data, cfg.shift_ms)
}

/// Linear-interpolation resampling to `round(len / factor)` samples;
/// factor 1.0 returns the input bit-for-bit.
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(0.5..=2.0).contains(&factor) {
        return Err(Error::Input(format!("speed factor {factor} outside [0.5, 2.0]")));
    }
    if factor == 1.0 {
        return Ok(w.clone());
    }
    let n_in = w.samples.len();
    let n_out = ((n_in as f64) / factor).round().max(1.0) as usize;
    let samples = if n_out == 1 {
        vec![w.samples[0]]
    } else {
        // Endpoint-preserving mapping: first and last samples are kept.
        let scale = (n_in - 1) as f64 / (n_out - 1) as f64;
        (0..n_out)
            .map(|i| {
                let src = i as f64 * scale;
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                let frac = src - lo as f64;
                w.samples[lo] * (1.0 - frac) + w.samples[hi] * frac
            })
            .collect()
    };
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

/// Normalization statistics source.
#[derive(Clone, Debug)]
pub enum NormMode {
    PerUtterance,
    Global { mean: Vec<f64>, std: Vec<f64> },
}

/// Per-dimension mean/variance normalization. Dims with population std
/// below 1e-8 are centered only.
pub fn normalize(f: &FeatureMatrix, mode: &NormMode) -> Result<FeatureMatrix> {
    let (t, d) = (f.rows(), f.cols());
    let (mean, std) = match mode {
        NormMode::PerUtterance => {
            let mean = utterance_mean(f);
            let mut var = vec![0.0; d];
            for r in 0..t {
                for (j, &v) in f.row(r).iter().enumerate() {
                    let c = v - mean[j];
                    var[j] += c * c;
                }
            }
            let std: Vec<f64> = var.iter().map(|v| (v / t as f64).sqrt()).collect();
            (mean, std)
        }
        NormMode::Global { mean, std } => {
            if mean.len() != d || std.len() != d {
                return Err(Error::Input(format!(
                    "global stats dims {}/{} do not match D={d}",
                    mean.len(),
                    std.len()
                )));
            }
            (mean.clone(), std.clone())
        }
    };
    let mut out = f.clone();
    for r in 0..t {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v -= mean[j];
            if std[j] >= 1e-8 {
                *v /= std[j];
            }
        }
    }
    Ok(out)
}

/// Per-dimension arithmetic mean over all frames.
pub fn utterance_mean(f: &FeatureMatrix) -> Vec<f64> {
    let (t, d) = (f.rows(), f.cols());
    let mut mean = vec![0.0; d];
    for r in 0..t {
        for (j, &v) in f.row(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> Waveform {
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn silence_hits_log_floor() {
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let f = log_mel(&w, &FeatureConfig::default(), "sil").unwrap();
        let expect = LOG_FLOOR.ln();
        for t in 0..f.rows() {
            for m in 0..80 {
                assert_eq!(f.row(t)[m], expect);
            }
            for p in 80..83 {
                assert_eq!(f.row(t)[p], 0.0);
            }
        }
    }

    #[test]
    fn sine_peaks_at_nearest_mel_center() {
        let w = sine(440.0, 16000, 8000, 0.5);
        let cfg = FeatureConfig::default();
        let f = log_mel(&w, &cfg, "tone").unwrap();
        // Oracle: recompute center frequencies directly from the mel formula.
        let to_mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let to_hz = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
        let (mlo, mhi) = (to_mel(cfg.fmin), to_mel(cfg.fmax));
        let center =
            |m: usize| to_hz(mlo + (mhi - mlo) * (m + 1) as f64 / (cfg.n_mels + 1) as f64);
        let expected = (0..cfg.n_mels)
            .min_by(|&a, &b| {
                let da = (center(a) - 440.0).abs();
                let db = (center(b) - 440.0).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        // Middle frame avoids window-edge taper.
        let mid = f.rows() / 2;
        let got = (0..cfg.n_mels)
            .max_by(|&a, &b| f.row(mid)[a].partial_cmp(&f.row(mid)[b]).unwrap())
            .unwrap();
        assert_eq!(got, expected, "440 Hz energy should land in mel bin {expected}");
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let w1 = sine(440.0, 16000, 4000, 0.25);
        let w2 = sine(440.0, 16000, 4000, 0.5);
        let cfg = FeatureConfig::default();
        let f1 = log_mel(&w1, &cfg, "a").unwrap();
        let f2 = log_mel(&w2, &cfg, "b").unwrap();
        let mid = f1.rows() / 2;
        for m in 0..cfg.n_mels {
            // Only bins far from the log floor obey pure log-linearity; the
            // floor perturbs the ratio by ~(3/4)(floor/E), so require
            // E >> 1e4 * floor.
            if f1.row(mid)[m] > LOG_FLOOR.ln() + 16.0 {
                let diff = f2.row(mid)[m] - f1.row(mid)[m];
                assert!((diff - 4f64.ln()).abs() < 1e-6, "bin {m}: {diff}");
            }
        }
    }

    #[test]
    fn log_mel_is_deterministic() {
        let w = sine(523.0, 16000, 6000, 0.3);
        let cfg = FeatureConfig::default();
        let a = log_mel(&w, &cfg, "x").unwrap();
        let b = log_mel(&w, &cfg, "x").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_waveform_is_input_error() {
        let w = Waveform::new(vec![0.1; 100], 16000).unwrap();
        assert!(matches!(
            log_mel(&w, &FeatureConfig::default(), "short"),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn speed_identity_and_lengths() {
        let w = sine(300.0, 16000, 16000, 0.5);
        let same = speed_perturb(&w, 1.0).unwrap();
        assert_eq!(same.samples, w.samples);
        assert_eq!(speed_perturb(&w, 0.9).unwrap().samples.len(), 17778);
        assert!(speed_perturb(&w, 0.3).is_err());
        assert!(speed_perturb(&w, 2.5).is_err());
    }

    #[test]
    fn speed_on_ramp_preserves_endpoints() {
        let n = 1001;
        let samples: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let w = Waveform::new(samples, 16000).unwrap();
        let out = speed_perturb(&w, 2.0).unwrap();
        assert_eq!(out.samples.len(), (n as f64 / 2.0).round() as usize);
        assert!((out.samples[0] - 0.0).abs() < 1e-9);
        assert!((out.samples.last().unwrap() - 1.0).abs() < 1e-9);
        // Linear interpolation is exact on a linear signal.
        let m = out.samples.len();
        for (i, &s) in out.samples.iter().enumerate() {
            let expect = i as f64 / (m - 1) as f64;
            assert!((s - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_examples_and_idempotence() {
        let c = FeatureMatrix::new("c".into(), 3, 2, vec![5.0; 6], 10.0).unwrap();
        let n = normalize(&c, &NormMode::PerUtterance).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));

        let two = FeatureMatrix::new("t".into(), 2, 1, vec![0.0, 2.0], 10.0).unwrap();
        let n = normalize(&two, &NormMode::PerUtterance).unwrap();
        assert_eq!(n.data(), &[-1.0, 1.0]);

        let mut vals = Vec::new();
        let mut s = 123u64;
        for _ in 0..50 * 4 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            vals.push(((s >> 33) as f64 / (1u64 << 31) as f64) * 8.0 - 4.0);
        }
        let f = FeatureMatrix::new("r".into(), 50, 4, vals, 10.0).unwrap();
        let n1 = normalize(&f, &NormMode::PerUtterance).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..50).map(|t| n1.row(t)[j]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 50.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
        let n2 = normalize(&n1, &NormMode::PerUtterance).unwrap();
        for (a, b) in n1.data().iter().zip(n2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn global_stats_must_match_dims() {
        let f = FeatureMatrix::new("g".into(), 2, 3, vec![1.0; 6], 10.0).unwrap();
        let bad = NormMode::Global { mean: vec![0.0; 2], std: vec![1.0; 2] };
        assert!(normalize(&f, &bad).is_err());
    }

    #[test]
    fn utterance_mean_examples() {
        let one = FeatureMatrix::new("o".into(), 1, 3, vec![7.0, -2.0, 0.5], 10.0).unwrap();
        assert_eq!(utterance_mean(&one), vec![7.0, -2.0, 0.5]);
        let f = FeatureMatrix::new("m".into(), 2, 2, vec![1.0, 1.0, 3.0, 3.0], 10.0).unwrap();
        assert_eq!(utterance_mean(&f), vec![2.0, 2.0]);
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 400usize..20000, shift_ms in 5.0f64..20.0) {
            let w = Waveform::new(vec![0.01; len], 16000).unwrap();
            let cfg = FeatureConfig { shift_ms, ..FeatureConfig::default() };
            let win = (cfg.win_ms * 16.0).round() as usize;
            let shift = (shift_ms * 16.0).round() as usize;
            prop_assume!(len >= win);
            let f = log_mel(&w, &cfg, "p").unwrap();
            prop_assert_eq!(f.rows(), 1 + (len - win) / shift);
        }

        #[test]
        fn speed_round_trip_length(len in 10usize..5000, factor in 0.5f64..2.0) {
            let w = Waveform::new(vec![0.5; len], 16000).unwrap();
            let out = speed_perturb(&w, factor).unwrap();
            let back = out.samples.len() as f64 * factor;
            prop_assert!((back - len as f64).abs() <= factor.max(1.0));
        }

        #[test]
        fn mean_matches_two_pass_oracle(vals in proptest::collection::vec(-10.0f64..10.0, 83 * 50)) {
            let f = FeatureMatrix::new("z".into(), 50, 83, vals.clone(), 10.0).unwrap();
            let got = utterance_mean(&f);
            for j in 0..83 {
                let col: Vec<f64> = (0..50).map(|t| vals[t * 83 + j]).collect();
                let mean = col.iter().sum::<f64>() / 50.0;
                prop_assert!((got[j] - mean).abs() < 1e-12);
            }
        }
    }
}
