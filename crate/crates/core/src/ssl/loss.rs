//! Self-supervised and supervised objectives, expressed on the tape.
//!
//! Row layout conventions: student outputs are unit-major, `n_views` rows
//! per mini-batch unit with the global views first; teacher outputs hold
//! `n_global` rows per unit in the same order.

use crate::error::{Error, Result};
use crate::tape::{softmax_rows, Tape, Var};
use crate::tensor::Tensor;

/// Shape of a mini-batch of view sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewLayout {
    pub n_units: usize,
    pub n_views: usize,
    pub n_global: usize,
}

impl ViewLayout {
    /// Ordered (teacher global, student view) pairs per unit.
    pub fn pairs_per_unit(&self) -> usize {
        self.n_global * self.n_views - self.n_global
    }
}

/// Teacher probabilities `softmax((teacher − center) / τ_t)`, one row per
/// teacher view. `centers` holds the centre row to subtract for each view.
pub fn teacher_probs(teacher: &Tensor, centers: &Tensor, tau_t: f64) -> Tensor {
    let shifted = teacher.zip_map(centers, |t, c| (t - c) / tau_t);
    softmax_rows(&shifted)
}

/// Cross-entropy `H(P_T(x), P_S(x'))` averaged over every global view `x`
/// and every other view `x'` of the same unit.
pub fn dino_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_probs: &Tensor,
    layout: ViewLayout,
    tau_s: f64,
) -> Result<Var> {
    let ViewLayout {
        n_units,
        n_views,
        n_global,
    } = layout;
    let pairs = layout.pairs_per_unit();
    if n_units == 0 || n_global == 0 || pairs == 0 || n_global > n_views {
        return Err(Error::usage(format!("no valid view pairs in layout {layout:?}")));
    }
    let s = tape.value(student_logits);
    let k = s.cols();
    if s.rows() != n_units * n_views || teacher_probs.rows() != n_units * n_global || teacher_probs.cols() != k {
        return Err(Error::Shape(format!(
            "dino_loss: student {:?}, teacher {:?}, layout {layout:?}",
            s.shape(),
            teacher_probs.shape()
        )));
    }
    // weight[u, v] = Σ_{g ≠ v} P_T[u, g]; loss = −Σ weight ⊙ log P_S / (U · pairs)
    let mut weight = vec![0.0; n_units * n_views * k];
    for u in 0..n_units {
        for v in 0..n_views {
            let row = &mut weight[(u * n_views + v) * k..(u * n_views + v + 1) * k];
            for g in (0..n_global).filter(|&g| g != v) {
                for (w, p) in row.iter_mut().zip(teacher_probs.row(u * n_global + g)) {
                    *w += p;
                }
            }
        }
    }
    let scaled = tape.scale(student_logits, 1.0 / tau_s);
    let log_ps = tape.log_softmax(scaled);
    let w = tape.leaf(Tensor::from_raw(&[n_units * n_views, k], weight));
    let prod = tape.mul(log_ps, w);
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / (n_units * pairs) as f64))
}

/// Symmetrised negative cosine similarity. Row `2u + r` of each input is
/// view `r` of unit `u`; the student's view `r` is compared with the
/// teacher's view `1 − r`.
pub fn byol_loss(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    let s = tape.value(student);
    if !s.rows().is_multiple_of(2) || s.rows() == 0 || !s.same_shape(teacher) {
        return Err(Error::Shape(format!(
            "byol_loss: student {:?}, teacher {:?}",
            s.shape(),
            teacher.shape()
        )));
    }
    let n = s.rows();
    let k = s.cols();
    let mut swapped = vec![0.0; n * k];
    for r in 0..n {
        let partner = r ^ 1;
        let row = teacher.row(partner);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::numeric(
                "byol_loss",
                format!("teacher row {partner} has zero norm"),
            ));
        }
        for (o, v) in swapped[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = v / norm;
        }
    }
    let s_norm = tape.l2_normalize(student)?;
    let t = tape.leaf(Tensor::from_raw(&[n, k], swapped));
    let prod = tape.mul(s_norm, t);
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Guard added to column variances before standardising.
pub const BARLOW_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BarlowStats {
    /// Columns (over both inputs) whose variance was zero.
    pub constant_columns: usize,
}

fn standardize(tape: &mut Tape, x: Var) -> (Var, usize) {
    let mu = tape.mean_cols(x);
    let neg_mu = tape.scale(mu, -1.0);
    let centered = tape.add_row(x, neg_mu);
    let sq = tape.mul(centered, centered);
    let var = tape.mean_cols(sq);
    let constant = tape.value(var).data().iter().filter(|&&v| v == 0.0).count();
    let var_eps = tape.add_scalar(var, BARLOW_EPS);
    let std = tape.sqrt(var_eps);
    let inv = tape.recip(std);
    (tape.mul_row(centered, inv), constant)
}

/// `Σ_i (1 − R_ii)² + α Σ_{i≠j} R_ij²` with `R` the cross-correlation of
/// the column-standardised inputs over the mini-batch.
pub fn barlow_loss(tape: &mut Tape, a: Var, b: Var, alpha: f64) -> Result<(Var, BarlowStats)> {
    let (va, vb) = (tape.value(a), tape.value(b));
    if !va.same_shape(vb) || va.rows() < 2 {
        return Err(Error::usage(format!(
            "barlow_loss needs equal shapes with batch >= 2, got {:?} and {:?}",
            va.shape(),
            vb.shape()
        )));
    }
    let (n, k) = (va.rows(), va.cols());
    let (za, ca) = standardize(tape, a);
    let (zb, cb) = standardize(tape, b);
    let zat = tape.transpose(za);
    let prod = tape.matmul(zat, zb);
    let r = tape.scale(prod, 1.0 / n as f64);
    let eye = tape.leaf(Tensor::identity(k));
    let diff = tape.sub(r, eye);
    let sq = tape.mul(diff, diff);
    let mut w = Tensor::full(&[k, k], alpha);
    for i in 0..k {
        w.data_mut()[i * k + i] = 1.0;
    }
    let w = tape.leaf(w);
    let weighted = tape.mul(sq, w);
    Ok((
        tape.sum(weighted),
        BarlowStats {
            constant_columns: ca + cb,
        },
    ))
}

/// `λ·first + (1 − λ)·second`.
pub fn combined_loss(tape: &mut Tape, first: Var, second: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::usage(format!("lambda {lambda} outside [0, 1]")));
    }
    let a = tape.scale(first, lambda);
    let b = tape.scale(second, 1.0 - lambda);
    Ok(tape.add(a, b))
}

/// Mean softmax cross-entropy of `logits` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let l = tape.value(logits);
    let (n, k) = (l.rows(), l.cols());
    if labels.len() != n {
        return Err(Error::usage(format!("{} labels for {} rows", labels.len(), n)));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::usage(format!("label {bad} outside [0, {k})")));
    }
    let mut onehot = vec![0.0; n * k];
    for (r, &y) in labels.iter().enumerate() {
        onehot[r * k + y] = 1.0;
    }
    let lp = tape.log_softmax(logits);
    let mask = tape.leaf(Tensor::from_raw(&[n, k], onehot));
    let picked = tape.mul(lp, mask);
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Mean entropy (nats) of the rows of a probability matrix.
pub fn mean_entropy(probs: &Tensor) -> f64 {
    let n = probs.rows();
    let total: f64 = (0..n)
        .map(|r| {
            probs
                .row(r)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / n.max(1) as f64
}
