//! Training losses: windowed visual-audio alignment, CTC, label-smoothed
//! cross-entropy and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::numerics::{log_add_exp, Graph, Tensor, Var};

/// Tolerance on alignment score rows being probability distributions.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// `[Tq, Tk]` indicator of entries `(i, i + j)` with `i < valid` and
/// `-past <= j <= future`; out-of-range keys are simply absent.
pub fn window_mask(tq: usize, tk: usize, valid: usize, past: usize, future: usize) -> Tensor {
    let mut data = vec![0.0; tq * tk];
    for i in 0..valid.min(tq) {
        let lo = i.saturating_sub(past);
        let hi = (i + future).min(tk.saturating_sub(1));
        for j in lo..=hi {
            if j < tk {
                data[i * tk + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![tq, tk], data).expect("window mask")
}

fn check_rows(alpha: &Tensor, valid: usize) -> Result<()> {
    if alpha.shape().len() != 2 {
        return Err(shape_err!("alignment scores must be a matrix, got {:?}", alpha.shape()));
    }
    if valid > alpha.rows() {
        return Err(shape_err!("{valid} valid rows in {} score rows", alpha.rows()));
    }
    for i in 0..valid {
        let s: f64 = alpha.row(i).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE || alpha.row(i).iter().any(|&p| p < 0.0) {
            return Err(contract_err!("alignment row {i} is not a distribution (sum {s})"));
        }
    }
    Ok(())
}

/// In-window attention mass `sum_i sum_{j=-past..future} alpha[i, i + j]`
/// over the first `valid` rows.
pub fn window_mass(alpha: &Tensor, valid: usize, past: usize, future: usize) -> Result<f64> {
    check_rows(alpha, valid)?;
    let (tq, tk) = (alpha.rows(), alpha.row_len());
    let w = window_mask(tq, tk, valid, past, future);
    Ok(alpha.data().iter().zip(w.data()).map(|(a, m)| a * m).sum())
}

/// `|valid - window_mass|` for one score matrix.
pub fn va_align_loss(g: &mut Graph, alpha: Var, valid: usize, past: usize, future: usize) -> Result<Var> {
    check_rows(g.value(alpha), valid)?;
    let (tq, tk) = (g.shape(alpha)[0], g.shape(alpha)[1]);
    let w = g.constant(window_mask(tq, tk, valid, past, future));
    let inside = g.mul(alpha, w)?;
    let s = g.sum(inside);
    let neg = g.scale(s, -1.0);
    let gap = g.add_scalar(neg, valid as f64);
    Ok(g.abs(gap))
}

/// Mean of scalar variables; `None` for an empty slice.
pub fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = xs.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &x in rest {
        acc = g.add(acc, x)?;
    }
    Ok(Some(g.scale(acc, 1.0 / xs.len() as f64)))
}

/// Minimum number of frames a CTC target needs: one per label plus one
/// blank between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under `log_probs: [T, V]` (blank 0)
/// and its gradient with respect to `log_probs`.
pub fn ctc_nll(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Tensor)> {
    if log_probs.shape().len() != 2 {
        return Err(shape_err!("CTC log-probs must be [T, V], got {:?}", log_probs.shape()));
    }
    let (t_len, v) = (log_probs.rows(), log_probs.row_len());
    if let Some(&bad) = target.iter().find(|&&k| k == 0 || k >= v) {
        return Err(contract_err!("CTC target id {bad} outside [1, {v})"));
    }
    let needed = ctc_min_frames(target);
    if t_len == 0 || needed > t_len {
        return Err(Error::InfeasibleTarget {
            sample: 0,
            target_len: target.len(),
            input_len: t_len,
            needed: needed.max(1),
        });
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(0);
    for &k in target {
        ext.push(k);
        ext.push(0);
    }
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs.data()[t * v + ext[s]];
    let skip = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add_exp(acc, prev[s - 1]);
            }
            if skip(s) {
                acc = log_add_exp(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_z = alpha[last + s_len - 1];
    if s_len > 1 {
        log_z = log_add_exp(log_z, alpha[last + s_len - 2]);
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add_exp(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                acc = log_add_exp(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            grad[t * v + ext[s]] -= (a + b - lp(t, s) - log_z).exp();
        }
    }
    Ok((-log_z, Tensor::new(vec![t_len, v], grad)?))
}

/// CTC loss of one sequence as a graph node.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    let (nll, grad) = ctc_nll(g.value(log_probs), target)?;
    g.scalar_fn(log_probs, nll, grad)
}

/// Batch-mean CTC loss; infeasible samples are reported by index.
pub fn ctc_loss_batch(g: &mut Graph, log_probs: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
    if log_probs.len() != targets.len() || log_probs.is_empty() {
        return Err(shape_err!("{} CTC inputs for {} targets", log_probs.len(), targets.len()));
    }
    let mut per = Vec::with_capacity(targets.len());
    for (i, (&lp, tgt)) in log_probs.iter().zip(targets).enumerate() {
        per.push(ctc_loss(g, lp, tgt).map_err(|e| match e {
            Error::InfeasibleTarget {
                target_len,
                input_len,
                needed,
                ..
            } => Error::InfeasibleTarget {
                sample: i,
                target_len,
                input_len,
                needed,
            },
            other => other,
        })?);
    }
    Ok(mean_of(g, &per)?.expect("non-empty"))
}

/// Smoothed target distribution: `1 - eps` on the target plus `eps / V`
/// spread uniformly.
pub fn smoothed_targets(targets: &[usize], vocab: usize, smoothing: f64) -> Tensor {
    let mut data = vec![smoothing / vocab as f64; targets.len() * vocab];
    for (u, &k) in targets.iter().enumerate() {
        data[u * vocab + k] += 1.0 - smoothing;
    }
    Tensor::new(vec![targets.len(), vocab], data).expect("targets")
}

/// Label-smoothed cross-entropy of `logits: [U, V]`, averaged over the `U`
/// positions.
pub fn ce_loss(g: &mut Graph, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let (u, v) = (g.shape(logits)[0], g.shape(logits)[1]);
    if u != targets.len() || u == 0 {
        return Err(shape_err!("{u} logit rows for {} targets", targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&k| k >= v) {
        return Err(contract_err!("target id {bad} outside vocabulary of {v}"));
    }
    let lp = g.log_softmax(logits)?;
    let q = g.constant(smoothed_targets(targets, v, smoothing));
    let weighted = g.mul(lp, q)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0 / u as f64))
}

/// The three loss values and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce: f64,
    pub ctc: f64,
    pub va_align: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn combine(ce: f64, ctc: f64, va_align: f64, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        if !(ce.is_finite() && ctc.is_finite() && va_align.is_finite()) {
            return Err(Error::NonFinite(format!("loss components ce {ce}, ctc {ctc}, va_align {va_align}")));
        }
        let total = cfg.ce_weight() * ce + cfg.lambda_align * va_align + cfg.lambda_ctc * ctc;
        Ok(Self {
            ce,
            ctc,
            va_align,
            total,
        })
    }
}

/// Weighted total as a graph node, evaluated in the same order as
/// [`LossBundle::combine`] so both agree bit for bit.
pub fn joint_loss(g: &mut Graph, ce: Var, ctc: Var, va_align: Var, cfg: &LossConfig) -> Result<(Var, LossBundle)> {
    let bundle = LossBundle::combine(
        g.value(ce).data()[0],
        g.value(ctc).data()[0],
        g.value(va_align).data()[0],
        cfg,
    )?;
    let a = g.scale(ce, cfg.ce_weight());
    let b = g.scale(va_align, cfg.lambda_align);
    let c = g.scale(ctc, cfg.lambda_ctc);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok((total, bundle))
}
