//! Connectionist temporal classification loss.

use super::ModelError;

const NEG_INF: f64 = f64::NEG_INFINITY;

fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Fewest frames that can emit `target`: one per label plus a blank between
/// each adjacent repeat.
pub fn min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check(frames: usize, classes: usize, target: &[u32], blank: u32) -> Result<(), ModelError> {
    if blank as usize >= classes {
        return Err(ModelError::Config(format!("blank {blank} outside {classes} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&y| y == blank || y as usize >= classes) {
        return Err(ModelError::Config(format!("CTC target id {bad} is blank or out of range")));
    }
    if frames < min_frames(target) {
        return Err(ModelError::CtcInfeasible { frames, needed: min_frames(target) });
    }
    Ok(())
}

fn extended(target: &[u32], blank: u32) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Log-domain forward variables `alpha[t][s]` over the blank-augmented target.
fn forward(logp: &[f64], frames: usize, classes: usize, ext: &[u32]) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![NEG_INF; frames * s_len];
    alpha[0] = logp[ext[0] as usize];
    if s_len > 1 {
        alpha[1] = logp[ext[1] as usize];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &logp[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if s >= 2 && ext[s] != ext[s - 2] {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == NEG_INF { NEG_INF } else { a + row[ext[s] as usize] };
        }
    }
    alpha
}

fn backward(logp: &[f64], frames: usize, classes: usize, ext: &[u32]) -> Vec<f64> {
    let s_len = ext.len();
    let mut beta = vec![NEG_INF; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = logp[(frames - 1) * classes + ext[s_len - 1] as usize];
    if s_len > 1 {
        beta[last + s_len - 2] = logp[(frames - 1) * classes + ext[s_len - 2] as usize];
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let row = &logp[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != ext[s + 2] {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = if b == NEG_INF { NEG_INF } else { b + row[ext[s] as usize] };
        }
    }
    beta
}

fn total(alpha: &[f64], frames: usize, s_len: usize) -> f64 {
    let last = &alpha[(frames - 1) * s_len..];
    if s_len == 1 {
        last[0]
    } else {
        log_add(last[s_len - 1], last[s_len - 2])
    }
}

/// Negative log-likelihood of `target` under frame-wise log-probabilities
/// `log_probs[frames × classes]`.
pub fn ctc_loss(log_probs: &[f64], classes: usize, target: &[u32], blank: u32) -> Result<f64, ModelError> {
    if classes == 0 || log_probs.is_empty() || log_probs.len() % classes != 0 {
        return Err(ModelError::Config("CTC input is not a non-empty frames x classes matrix".into()));
    }
    let frames = log_probs.len() / classes;
    check(frames, classes, target, blank)?;
    let ext = extended(target, blank);
    let alpha = forward(log_probs, frames, classes, &ext);
    let ll = total(&alpha, frames, ext.len());
    if !ll.is_finite() {
        return Err(ModelError::CtcInfeasible { frames, needed: min_frames(target) });
    }
    Ok(-ll)
}

/// CTC loss over unnormalized `logits[frames × classes]` together with its
/// gradient with respect to the logits.
pub fn ctc_loss_from_logits(
    logits: &[f32],
    classes: usize,
    target: &[u32],
    blank: u32,
) -> Result<(f64, Vec<f32>), ModelError> {
    if classes == 0 || logits.is_empty() || logits.len() % classes != 0 {
        return Err(ModelError::Config("CTC input is not a non-empty frames x classes matrix".into()));
    }
    let frames = logits.len() / classes;
    check(frames, classes, target, blank)?;
    let mut logp = vec![0f64; logits.len()];
    for (src, dst) in logits.chunks(classes).zip(logp.chunks_mut(classes)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + src.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s as f64 - lse;
        }
    }
    if logp.iter().any(|v| v.is_nan()) {
        return Err(ModelError::NonFinite("ctc".into()));
    }
    let ext = extended(target, blank);
    let s_len = ext.len();
    let alpha = forward(&logp, frames, classes, &ext);
    let beta = backward(&logp, frames, classes, &ext);
    let ll = total(&alpha, frames, s_len);
    if !ll.is_finite() {
        return Err(ModelError::CtcInfeasible { frames, needed: min_frames(target) });
    }
    let mut grad = vec![0f32; logits.len()];
    let mut occ = vec![NEG_INF; classes];
    for t in 0..frames {
        occ.iter_mut().for_each(|o| *o = NEG_INF);
        for s in 0..s_len {
            let i = t * s_len + s;
            let k = ext[s] as usize;
            // alpha and beta both include the emission at (t, s).
            occ[k] = log_add(occ[k], alpha[i] + beta[i] - logp[t * classes + k]);
        }
        for k in 0..classes {
            let post = if occ[k] == NEG_INF { 0.0 } else { (occ[k] - ll).exp() };
            grad[t * classes + k] = (logp[t * classes + k].exp() - post) as f32;
        }
    }
    Ok((-ll, grad))
}
