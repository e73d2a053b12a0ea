//! Alignment-driven semantic masking composed with time warp, frequency
//! masking, and time masking.
//!
//! All stages are pure given an explicit RNG. The fill vector is computed
//! once from the pre-mask input and shared by every stage of the pipeline,
//! so later stages keep writing the original utterance statistics. RNG draw
//! order is part of the contract: semantic (one draw per span, or a partial
//! shuffle in exact-fraction mode), then warp (center, shift), then each
//! frequency band (width, start), then each time span (width, start).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::FrameSpan;
use crate::error::{Error, Result};
use crate::features::{utterance_mean, FeatureMatrix};

/// What masked cells are replaced with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillMode {
    /// Per-dimension mean over the whole utterance (default).
    MeanVector,
    /// One scalar mean over all cells, replicated.
    ScalarMean,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct MaskConfig {
    pub token_mask_prob: f64,
    /// Select exactly round(p * n) spans instead of per-token Bernoulli.
    pub exact_fraction: bool,
    pub fill: FillMode,
    pub enable_time_warp: bool,
    /// Maximum warp distance in frames.
    pub warp_w: usize,
    pub enable_freq_mask: bool,
    /// Maximum band width F; widths drawn uniformly from {0..=F}.
    pub freq_f: usize,
    pub freq_count: usize,
    pub enable_time_mask: bool,
    /// Maximum span width; widths drawn uniformly from {0..=min(width, T)}.
    pub time_t: usize,
    pub time_count: usize,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            token_mask_prob: 0.15,
            exact_fraction: false,
            fill: FillMode::MeanVector,
            enable_time_warp: true,
            warp_w: 5,
            enable_freq_mask: true,
            freq_f: 27,
            freq_count: 2,
            enable_time_mask: true,
            time_t: 40,
            time_count: 2,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.token_mask_prob) {
            return Err(Error::Config(format!(
                "token_mask_prob {} outside [0, 1]",
                self.token_mask_prob
            )));
        }
        Ok(())
    }
}

/// FNV-1a 64-bit hash; stable across platforms, used to split RNG streams.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent per-utterance RNG stream derived from (seed, utt_id), so any
/// parallel schedule reproduces the same augmentation.
pub fn utterance_rng(seed: u64, utt_id: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(utt_id.as_bytes()).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Fill vector for one utterance under `mode`, length D.
pub fn fill_vector(f: &FeatureMatrix, mode: FillMode) -> Vec<f64> {
    match mode {
        FillMode::MeanVector => utterance_mean(f),
        FillMode::ScalarMean => {
            let m = f.data().iter().sum::<f64>() / f.data().len() as f64;
            vec![m; f.cols()]
        }
        FillMode::Zeros => vec![0.0; f.cols()],
    }
}

/// Mask each token span independently with probability `prob` (or exactly
/// round(prob*n) spans when `exact` is set), writing `fill` over every frame
/// of selected spans. Returns the new matrix and the masked token indices.
pub fn semantic_mask<R: Rng>(
    f: &FeatureMatrix,
    spans: &[FrameSpan],
    prob: f64,
    exact: bool,
    fill: &[f64],
    rng: &mut R,
) -> Result<(FeatureMatrix, Vec<usize>)> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Config(format!("mask probability {prob} outside [0, 1]")));
    }
    if fill.len() != f.cols() {
        return Err(Error::Contract(format!(
            "fill length {} vs D={}",
            fill.len(),
            f.cols()
        )));
    }
    for s in spans {
        if s.end_frame > f.rows() || s.start_frame >= s.end_frame {
            return Err(Error::Contract(format!(
                "span [{}, {}) invalid for T={}",
                s.start_frame,
                s.end_frame,
                f.rows()
            )));
        }
    }
    let selected: Vec<usize> = if exact {
        let n = spans.len();
        let k = (prob * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let mut chosen: Vec<usize> = idx[..k.min(n)].to_vec();
        chosen.sort_unstable();
        chosen
    } else {
        (0..spans.len()).filter(|_| rng.random_bool(prob)).collect()
    };

    let mut out = f.clone();
    for &si in &selected {
        let s = &spans[si];
        for t in s.start_frame..s.end_frame {
            out.row_mut(t).copy_from_slice(fill);
        }
    }
    let masked_tokens = selected.iter().map(|&si| spans[si].token_index).collect();
    Ok((out, masked_tokens))
}

/// SpecAugment frequency masking: `count` bands of width drawn from
/// {0..=max_width}, start from {0..=D-width}; masked dims take their fill
/// value in every frame.
pub fn freq_mask<R: Rng>(
    f: &FeatureMatrix,
    max_width: usize,
    count: usize,
    fill: &[f64],
    rng: &mut R,
) -> Result<FeatureMatrix> {
    let d = f.cols();
    if max_width >= d {
        return Err(Error::Config(format!("freq mask width {max_width} must be < D={d}")));
    }
    let mut out = f.clone();
    for _ in 0..count {
        let w = rng.random_range(0..=max_width);
        let start = rng.random_range(0..=d - w);
        for t in 0..out.rows() {
            for j in start..start + w {
                out.row_mut(t)[j] = fill[j];
            }
        }
    }
    Ok(out)
}

/// SpecAugment time masking: `count` spans of width drawn from
/// {0..=min(max_width, T)}, start from {0..=T-width}; masked frames take
/// the fill vector.
pub fn time_mask<R: Rng>(
    f: &FeatureMatrix,
    max_width: usize,
    count: usize,
    fill: &[f64],
    rng: &mut R,
) -> Result<FeatureMatrix> {
    let t_len = f.rows();
    let cap = max_width.min(t_len);
    let mut out = f.clone();
    for _ in 0..count {
        let w = rng.random_range(0..=cap);
        let start = rng.random_range(0..=t_len - w);
        for t in start..start + w {
            out.row_mut(t).copy_from_slice(fill);
        }
    }
    Ok(out)
}

/// Piecewise-linear time warp: a center frame `c ~ U{W..T-W-1}` moves to
/// `c + s` with `s ~ U{-W..=W}`; endpoints stay fixed and all frames are
/// linearly interpolated. Utterances with `T <= 2W` (or degenerate pivots)
/// pass through unchanged.
pub fn time_warp<R: Rng>(f: &FeatureMatrix, w: usize, rng: &mut R) -> Result<FeatureMatrix> {
    let t_len = f.rows();
    if w == 0 || t_len <= 2 * w {
        return Ok(f.clone());
    }
    let c = rng.random_range(w..t_len - w) as f64;
    let s = rng.random_range(-(w as i64)..=w as i64) as f64;
    if s == 0.0 {
        return Ok(f.clone());
    }
    let pivot = c + s;
    let last = (t_len - 1) as f64;
    if pivot <= 0.0 || pivot >= last {
        return Ok(f.clone());
    }
    let mut out = f.clone();
    for i in 0..t_len {
        let x = i as f64;
        let src = if x <= pivot { x * c / pivot } else { c + (x - pivot) * (last - c) / (last - pivot) };
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(t_len - 1);
        let frac = src - lo as f64;
        let (row_lo, row_hi) = (f.row(lo), f.row(hi));
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = row_lo[j] * (1.0 - frac) + row_hi[j] * frac;
        }
    }
    Ok(out)
}

/// Full augmentation pipeline in fixed order semantic -> warp -> freq ->
/// time; the fill vector is computed once from the input.
pub fn apply_pipeline<R: Rng>(
    f: &FeatureMatrix,
    spans: &[FrameSpan],
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let fill = fill_vector(f, cfg.fill);
    let mut cur = if cfg.token_mask_prob > 0.0 {
        semantic_mask(f, spans, cfg.token_mask_prob, cfg.exact_fraction, &fill, rng)?.0
    } else {
        f.clone()
    };
    if cfg.enable_time_warp {
        cur = time_warp(&cur, cfg.warp_w, rng)?;
    }
    if cfg.enable_freq_mask {
        cur = freq_mask(&cur, cfg.freq_f, cfg.freq_count, &fill, rng)?;
    }
    if cfg.enable_time_mask {
        cur = time_mask(&cur, cfg.time_t, cfg.time_count, &fill, rng)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_matrix(t: usize, d: usize) -> FeatureMatrix {
        let data: Vec<f64> = (0..t).flat_map(|r| (0..d).map(move |c| r as f64 + 0.1 * c as f64)).collect();
        FeatureMatrix::new("u".into(), t, d, data, 10.0).unwrap()
    }

    fn noise_matrix(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..t * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        FeatureMatrix::new("u".into(), t, d, data, 10.0).unwrap()
    }

    fn span(i: usize, a: usize, b: usize) -> FrameSpan {
        FrameSpan { token_index: i, start_frame: a, end_frame: b }
    }

    #[test]
    fn prob_zero_is_identity() {
        let f = noise_matrix(10, 4, 1);
        let fill = fill_vector(&f, FillMode::MeanVector);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, masked) = semantic_mask(&f, &[span(0, 2, 5)], 0.0, false, &fill, &mut rng).unwrap();
        assert_eq!(out, f);
        assert!(masked.is_empty());
    }

    #[test]
    fn prob_one_masks_exactly_the_span() {
        let f = noise_matrix(10, 4, 2);
        let fill = fill_vector(&f, FillMode::MeanVector);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, masked) = semantic_mask(&f, &[span(0, 2, 5)], 1.0, false, &fill, &mut rng).unwrap();
        assert_eq!(masked, vec![0]);
        for t in 0..10 {
            if (2..5).contains(&t) {
                assert_eq!(out.row(t), fill.as_slice(), "frame {t} should be fill");
            } else {
                assert_eq!(out.row(t), f.row(t), "frame {t} should be untouched");
            }
        }
    }

    #[test]
    fn mask_rate_concentrates() {
        // 1000 utterances x 100 spans = 1e5 Bernoulli draws at p = 0.15.
        let p = 0.15;
        let f = noise_matrix(100, 2, 3);
        let spans: Vec<FrameSpan> = (0..100).map(|i| span(i, i, i + 1)).collect();
        let fill = fill_vector(&f, FillMode::MeanVector);
        let mut hits = 0usize;
        for u in 0..1000 {
            let mut rng = utterance_rng(77, &format!("utt{u}"));
            let (_, masked) = semantic_mask(&f, &spans, p, false, &fill, &mut rng).unwrap();
            hits += masked.len();
        }
        let n = 100_000.0;
        let rate = hits as f64 / n;
        let bound = 4.0 * (p * (1.0 - p) / n).sqrt();
        assert!(
            (rate - p).abs() <= bound,
            "empirical rate {rate} vs p {p} (bound {bound})"
        );
    }

    #[test]
    fn exact_fraction_selects_rounded_count() {
        let f = noise_matrix(40, 3, 4);
        let spans: Vec<FrameSpan> = (0..40).map(|i| span(i, i, i + 1)).collect();
        let fill = fill_vector(&f, FillMode::MeanVector);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, masked) = semantic_mask(&f, &spans, 0.15, true, &fill, &mut rng).unwrap();
            assert_eq!(masked.len(), 6); // round(0.15 * 40)
            let mut sorted = masked.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), 6, "selection must be distinct");
        }
    }

    #[test]
    fn freq_mask_identity_cases_and_replay() {
        let f = noise_matrix(12, 8, 5);
        let fill = fill_vector(&f, FillMode::MeanVector);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(freq_mask(&f, 3, 0, &fill, &mut rng).unwrap(), f);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(freq_mask(&f, 0, 4, &fill, &mut rng).unwrap(), f);
        assert!(freq_mask(&f, 8, 1, &fill, &mut ChaCha8Rng::seed_from_u64(0)).is_err());

        // Replay the RNG to recover the chosen band, then verify cell-wise.
        let seed = 1234;
        let out = freq_mask(&f, 4, 1, &fill, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(seed);
        let w = replay.random_range(0..=4usize);
        let start = replay.random_range(0..=8 - w);
        for t in 0..f.rows() {
            for j in 0..8 {
                if (start..start + w).contains(&j) {
                    assert_eq!(out.row(t)[j], fill[j]);
                } else {
                    assert_eq!(out.row(t)[j], f.row(t)[j]);
                }
            }
        }
    }

    #[test]
    fn time_mask_identity_cases_and_replay() {
        let f = noise_matrix(15, 5, 6);
        let fill = fill_vector(&f, FillMode::MeanVector);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(time_mask(&f, 5, 0, &fill, &mut rng).unwrap(), f);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(time_mask(&f, 0, 3, &fill, &mut rng).unwrap(), f);

        let seed = 4321;
        let out = time_mask(&f, 6, 1, &fill, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(seed);
        let w = replay.random_range(0..=6usize);
        let start = replay.random_range(0..=15 - w);
        for t in 0..15 {
            if (start..start + w).contains(&t) {
                assert_eq!(out.row(t), fill.as_slice());
            } else {
                assert_eq!(out.row(t), f.row(t));
            }
        }
    }

    #[test]
    fn warp_identity_cases() {
        let f = noise_matrix(30, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(time_warp(&f, 0, &mut rng).unwrap(), f);
        // T <= 2W: skipped.
        let short = noise_matrix(8, 4, 8);
        assert_eq!(time_warp(&short, 4, &mut rng).unwrap(), short);

        // Find a seed whose shift draw is zero, then expect identity.
        let w = 5usize;
        let seed = (0..)
            .find(|&s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let _c = r.random_range(w..30 - w);
                r.random_range(-(w as i64)..=w as i64) == 0
            })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = time_warp(&f, w, &mut rng).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_matches_closed_form_on_ramp() {
        // Every dim is a linear ramp in t, so interpolation returns the warp
        // map itself: out[i][j] = src(i) + 0.1 j.
        let t_len = 40;
        let f = ramp_matrix(t_len, 3);
        let w = 6usize;
        let seed = (0..)
            .find(|&s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let _c = r.random_range(w..t_len - w);
                r.random_range(-(w as i64)..=w as i64) != 0
            })
            .unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(seed);
        let c = replay.random_range(w..t_len - w) as f64;
        let s = replay.random_range(-(w as i64)..=w as i64) as f64;
        let pivot = c + s;
        let last = (t_len - 1) as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = time_warp(&f, w, &mut rng).unwrap();
        for i in 0..t_len {
            let x = i as f64;
            let src =
                if x <= pivot { x * c / pivot } else { c + (x - pivot) * (last - c) / (last - pivot) };
            for j in 0..3 {
                let expect = src + 0.1 * j as f64;
                assert!(
                    (out.row(i)[j] - expect).abs() < 1e-9,
                    "frame {i} dim {j}: {} vs {expect}",
                    out.row(i)[j]
                );
            }
        }
    }

    #[test]
    fn pipeline_disabled_is_identity() {
        let f = noise_matrix(25, 6, 9);
        let cfg = MaskConfig {
            token_mask_prob: 0.0,
            enable_time_warp: false,
            enable_freq_mask: false,
            enable_time_mask: false,
            ..MaskConfig::default()
        };
        let mut rng = utterance_rng(cfg.seed, "u");
        assert_eq!(apply_pipeline(&f, &[], &cfg, &mut rng).unwrap(), f);
    }

    #[test]
    fn pipeline_matches_manual_stage_composition() {
        let f = noise_matrix(50, 10, 10);
        let spans = vec![span(0, 3, 9), span(1, 12, 20), span(2, 25, 31), span(3, 40, 47)];
        let cfg = MaskConfig {
            warp_w: 4,
            freq_f: 3,
            freq_count: 2,
            time_t: 8,
            time_count: 2,
            seed: 55,
            ..MaskConfig::default()
        };
        let mut rng = utterance_rng(cfg.seed, "u");
        let got = apply_pipeline(&f, &spans, &cfg, &mut rng).unwrap();

        let fill = fill_vector(&f, cfg.fill);
        let mut rng = utterance_rng(cfg.seed, "u");
        let (s1, _) = semantic_mask(&f, &spans, cfg.token_mask_prob, false, &fill, &mut rng).unwrap();
        let s2 = time_warp(&s1, cfg.warp_w, &mut rng).unwrap();
        let s3 = freq_mask(&s2, cfg.freq_f, cfg.freq_count, &fill, &mut rng).unwrap();
        let s4 = time_mask(&s3, cfg.time_t, cfg.time_count, &fill, &mut rng).unwrap();
        assert_eq!(got, s4);

        // SpecAugment-only row: semantic stage off consumes no draws.
        let cfg3 = MaskConfig { token_mask_prob: 0.0, ..cfg.clone() };
        let mut rng = utterance_rng(cfg3.seed, "u");
        let got3 = apply_pipeline(&f, &spans, &cfg3, &mut rng).unwrap();
        let mut rng = utterance_rng(cfg3.seed, "u");
        let m1 = time_warp(&f, cfg3.warp_w, &mut rng).unwrap();
        let m2 = freq_mask(&m1, cfg3.freq_f, cfg3.freq_count, &fill, &mut rng).unwrap();
        let m3 = time_mask(&m2, cfg3.time_t, cfg3.time_count, &fill, &mut rng).unwrap();
        assert_eq!(got3, m3);
    }

    #[test]
    fn pipeline_is_deterministic_per_seed_and_utt() {
        let f = noise_matrix(60, 8, 11);
        let spans = vec![span(0, 5, 15), span(1, 20, 33)];
        let cfg = MaskConfig { seed: 99, freq_f: 4, ..MaskConfig::default() };
        let a = apply_pipeline(&f, &spans, &cfg, &mut utterance_rng(cfg.seed, "utt1")).unwrap();
        let b = apply_pipeline(&f, &spans, &cfg, &mut utterance_rng(cfg.seed, "utt1")).unwrap();
        assert_eq!(a, b);
        let c = apply_pipeline(&f, &spans, &cfg, &mut utterance_rng(cfg.seed, "utt2")).unwrap();
        assert_ne!(a, c, "different utterances should draw different streams");
    }

    proptest! {
        #[test]
        fn semantic_mask_partition_invariant(
            t in 10usize..60,
            d in 1usize..6,
            seed in 0u64..500,
            prob in 0.0f64..=1.0,
        ) {
            let f = noise_matrix(t, d, seed.wrapping_add(1));
            // Non-overlapping spans covering scattered regions.
            let mut spans = Vec::new();
            let mut cursor = 0usize;
            let mut i = 0;
            while cursor + 2 < t {
                let end = (cursor + 2 + (seed as usize + i) % 3).min(t);
                spans.push(span(i, cursor, end));
                cursor = end + 1 + (i % 2);
                i += 1;
            }
            let fill = fill_vector(&f, FillMode::MeanVector);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, masked) = semantic_mask(&f, &spans, prob, false, &fill, &mut rng).unwrap();
            prop_assert_eq!((out.rows(), out.cols()), (t, d));

            let mut expect_masked = vec![false; t];
            for s in &spans {
                if masked.contains(&s.token_index) {
                    for fr in s.start_frame..s.end_frame {
                        expect_masked[fr] = true;
                    }
                }
            }
            for fr in 0..t {
                if expect_masked[fr] {
                    prop_assert_eq!(out.row(fr), fill.as_slice(), "frame {} must be fill", fr);
                } else {
                    prop_assert_eq!(out.row(fr), f.row(fr), "frame {} must be untouched", fr);
                }
            }
        }

        #[test]
        fn stages_preserve_shape(t in 12usize..50, d in 2usize..10, seed in 0u64..200) {
            let f = noise_matrix(t, d, seed.wrapping_add(3));
            let fill = fill_vector(&f, FillMode::MeanVector);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = freq_mask(&f, d - 1, 2, &fill, &mut rng).unwrap();
            let b = time_mask(&a, 10, 2, &fill, &mut rng).unwrap();
            let c = time_warp(&b, 3, &mut rng).unwrap();
            prop_assert_eq!((c.rows(), c.cols()), (t, d));
            prop_assert!(c.data().iter().all(|v| v.is_finite()));
        }
    }
}
