//! Joint CTC/attention objective.
//!
//! The CTC term runs the forward algorithm in log domain directly on the
//! gradient tape: gradients flow through `log_add_exp`/`logsumexp` nodes
//! instead of a hand-derived forward-backward pass, which keeps the
//! implementation small and provably consistent with finite differences.

use crate::alignment::{BLANK_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// CTC log-probability, or the explicit infeasibility marker used when the
/// frame count cannot carry the label sequence (training skips such pairs).
pub enum CtcLogProb {
    Feasible(Var),
    Infeasible,
}

/// Minimum encoder frames needed for `labels`: one frame per label plus a
/// separating blank between adjacent repeats.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// Forward algorithm over the blank-interleaved lattice for `labels`, on
/// the tape. `logp` is T' x V per-frame log-probabilities with blank at
/// id 0. Returns a scalar log P(labels | logp) <= 0.
pub fn ctc_log_prob(tape: &mut Tape, logp: Var, labels: &[usize]) -> Result<CtcLogProb> {
    let (t_len, v) = {
        let t = tape.value(logp);
        if t.ndim() != 2 {
            return Err(Error::Contract(format!("ctc needs 2-D log-probs, got {:?}", t.shape())));
        }
        (t.rows(), t.cols())
    };
    if labels.is_empty() {
        return Err(Error::Contract("ctc labels are empty".into()));
    }
    if labels.iter().any(|&l| l == BLANK_ID || l >= v) {
        return Err(Error::Contract(format!("ctc labels must be content ids in 1..{v}")));
    }
    if t_len < ctc_min_frames(labels) {
        return Ok(CtcLogProb::Infeasible);
    }

    // Blank-interleaved extended labels: b, l1, b, l2, ..., lL, b.
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK_ID);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK_ID);
    }
    let s_len = ext.len();

    // Constants hoisted out of the time loop.
    let neg_inf1 = tape.constant(Tensor::from_vec(vec![1], vec![f64::NEG_INFINITY])?);
    let neg_inf2 = tape.constant(Tensor::from_vec(vec![2], vec![f64::NEG_INFINITY; 2])?);
    // Skip transitions (s-2 -> s) are allowed only onto a non-blank that
    // differs from the label two lattice slots back.
    let allow: Vec<f64> = (0..s_len)
        .map(|s| {
            if s >= 2 && ext[s] != BLANK_ID && ext[s] != ext[s - 2] {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let allow_c = tape.constant(Tensor::from_vec(vec![s_len], allow)?);
    // At t = 0 only lattice slots 0 (blank) and 1 (first label) are live.
    let init: Vec<f64> =
        (0..s_len).map(|s| if s < 2 { 0.0 } else { f64::NEG_INFINITY }).collect();
    let init_c = tape.constant(Tensor::from_vec(vec![s_len], init)?);

    let g0 = tape.gather_row_elems(logp, 0, &ext)?;
    let mut alpha = tape.add(g0, init_c)?;
    for t in 1..t_len {
        let stay = alpha;
        let head = tape.slice(alpha, &[0], &[s_len - 1])?;
        let step = tape.concat(0, &[neg_inf1, head])?;
        let head2 = tape.slice(alpha, &[0], &[s_len - 2])?;
        let skip_raw = tape.concat(0, &[neg_inf2, head2])?;
        let skip = tape.add(skip_raw, allow_c)?;
        let m1 = tape.log_add_exp(stay, step)?;
        let m2 = tape.log_add_exp(m1, skip)?;
        let gt = tape.gather_row_elems(logp, t, &ext)?;
        alpha = tape.add(m2, gt)?;
    }
    let tail = tape.slice(alpha, &[s_len - 2], &[2])?;
    let total = tape.logsumexp(tail, 0)?;
    Ok(CtcLogProb::Feasible(total))
}

/// Convenience wrapper evaluating the CTC score on a throwaway tape;
/// infeasible pairs yield -inf.
pub fn ctc_log_prob_value(logp: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = tape.constant(logp.clone());
    match ctc_log_prob(&mut tape, lp, labels)? {
        CtcLogProb::Feasible(v) => Ok(tape.value(v).scalar_value()),
        CtcLogProb::Infeasible => Ok(f64::NEG_INFINITY),
    }
}

/// Teacher-forced sequence log-likelihood: row i of `logits` scores
/// `labels[i]`; labels must end with eos. With label smoothing e > 0 the
/// target distribution becomes (1-e) on the label plus e/V uniform.
pub fn s2s_log_prob(tape: &mut Tape, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let (rows, v) = {
        let t = tape.value(logits);
        (t.rows(), t.cols())
    };
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "{} label positions vs {} logit rows",
            labels.len(),
            rows
        )));
    }
    if labels.last() != Some(&EOS_ID) {
        return Err(Error::Contract("s2s labels must end with eos".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick_per_row(logp, labels)?;
    let picked_sum = tape.sum_all(picked);
    if smoothing == 0.0 {
        return Ok(picked_sum);
    }
    let uniform_sum = tape.sum_all(logp);
    let a = tape.scale(picked_sum, 1.0 - smoothing);
    let b = tape.scale(uniform_sum, smoothing / v as f64);
    tape.add(a, b)
}

/// Loss components in nats; `total` equals `alpha * l_s2s + (1 - alpha) *
/// l_ctc` exactly as evaluated on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_s2s: f64,
    pub l_ctc: f64,
    pub alpha: f64,
    pub total: f64,
    /// Tape handle of the combined loss, ready for `backward`.
    pub total_var: Var,
}

/// `L = -alpha log P_s2s - (1 - alpha) log P_ctc`.
pub fn joint_loss(tape: &mut Tape, s2s_lp: Var, ctc_lp: Var, alpha: f64) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let a = tape.scale(s2s_lp, -alpha);
    let b = tape.scale(ctc_lp, -(1.0 - alpha));
    let total_var = tape.add(a, b)?;
    Ok(LossBreakdown {
        l_s2s: -tape.value(s2s_lp).scalar_value(),
        l_ctc: -tape.value(ctc_lp).scalar_value(),
        alpha,
        total: tape.value(total_var).scalar_value(),
        total_var,
    })
}
