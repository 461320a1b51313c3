//! Sequence laws over `K^N` token strings and the KL chain rule, computed
//! two ways by exhaustive enumeration.

use crate::argen::ArParams;
use crate::error::{Error, Result};
use crate::num::{self, categorical_kl, math, SeededRng};
use crate::tokenizer::TokenSeq;
use alloc::vec;
use alloc::vec::Vec;

/// Largest `K^N` the enumeration routines accept.
pub const MAX_ENUMERATION: usize = 1_000_000;

/// `K^N`, or an error when it exceeds [`MAX_ENUMERATION`].
pub fn enumeration_size(vocab: usize, len: usize) -> Result<usize> {
    let mut total: usize = 1;
    for _ in 0..len {
        total = total.checked_mul(vocab).filter(|&t| t <= MAX_ENUMERATION).ok_or(Error::NotEnumerable { vocab, len })?;
    }
    Ok(total)
}

/// The `index`-th sequence of length `len` in lexicographic order.
pub fn sequence_at(index: usize, vocab: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    let mut r = index;
    for t in (0..len).rev() {
        out[t] = r % vocab;
        r /= vocab;
    }
    out
}

/// An autoregressive distribution over fixed-length token sequences.
pub trait SequenceLaw {
    fn seq_len(&self) -> usize;
    fn vocab(&self) -> usize;

    /// Next-token probabilities after `prefix` (`prefix.len() < seq_len`).
    fn conditional(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// The `N` conditionals along a full sequence, row `t` given `x_{<t}`.
    fn conditionals_along(&self, x: &[usize]) -> Result<Vec<Vec<f64>>> {
        (0..self.seq_len()).map(|t| self.conditional(&x[..t])).collect()
    }
}

/// The generator's free-running law for one class.
pub struct ModelLaw<'a> {
    pub ar: &'a ArParams,
    pub label: usize,
}

impl SequenceLaw for ModelLaw<'_> {
    fn seq_len(&self) -> usize {
        self.ar.cfg.seq_len
    }

    fn vocab(&self) -> usize {
        self.ar.cfg.vocab
    }

    fn conditional(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        // Causality makes the padding after the prefix irrelevant.
        let mut x = prefix.to_vec();
        x.resize(self.seq_len(), 0);
        let logits = self.ar.forward_logits(self.label, &TokenSeq::new(x))?;
        Ok(num::softmax_row(logits.row(prefix.len()), 1.0))
    }

    fn conditionals_along(&self, x: &[usize]) -> Result<Vec<Vec<f64>>> {
        let logits = self.ar.forward_logits(self.label, &TokenSeq::checked(x.to_vec(), self.vocab())?)?;
        Ok((0..logits.rows()).map(|t| num::softmax_row(logits.row(t), 1.0)).collect())
    }
}

/// A product law whose positions ignore the prefix, such as the
/// teacher-forced posterior `prod_t pi(x_t | x*_{<t})`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForcedLaw {
    pub rows: Vec<Vec<f64>>,
}

impl TeacherForcedLaw {
    /// The generator's teacher-forced rows on the clean tokens `x_star`.
    pub fn from_model(ar: &ArParams, label: usize, x_star: &TokenSeq) -> Result<Self> {
        let logits = ar.teacher_forced_dist(label, x_star)?;
        Ok(Self { rows: (0..logits.rows()).map(|t| num::softmax_row(logits.row(t), 1.0)).collect() })
    }
}

impl SequenceLaw for TeacherForcedLaw {
    fn seq_len(&self) -> usize {
        self.rows.len()
    }

    fn vocab(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn conditional(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.rows[prefix.len()].clone())
    }
}

/// A law given by an explicit table of conditionals, one row per prefix.
/// Rows are stored by prefix length, then lexicographically.
#[derive(Clone, Debug, PartialEq)]
pub struct TableLaw {
    n: usize,
    k: usize,
    rows: Vec<Vec<f64>>,
}

impl TableLaw {
    fn offset(k: usize, len: usize) -> usize {
        (0..len).map(|t| k.pow(t as u32)).sum()
    }

    /// Builds the table from `f(prefix)`; rows must be distributions.
    pub fn from_fn(n: usize, k: usize, mut f: impl FnMut(&[usize]) -> Vec<f64>) -> Result<Self> {
        enumeration_size(k, n)?;
        let mut rows = Vec::with_capacity(Self::offset(k, n));
        for t in 0..n {
            for i in 0..k.pow(t as u32) {
                let row = f(&sequence_at(i, k, t));
                let total: f64 = row.iter().sum();
                if row.len() != k || row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::UnnormalizedDistribution { total });
                }
                rows.push(row);
            }
        }
        Ok(Self { n, k, rows })
    }

    /// Softmax rows of Gaussian logits with standard deviation `scale`.
    pub fn random(n: usize, k: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        Self::from_fn(n, k, |_| {
            let logits: Vec<f64> = (0..k).map(|_| scale * rng.normal()).collect();
            num::softmax_row(&logits, 1.0)
        })
    }
}

impl SequenceLaw for TableLaw {
    fn seq_len(&self) -> usize {
        self.n
    }

    fn vocab(&self) -> usize {
        self.k
    }

    fn conditional(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let t = prefix.len();
        let index = prefix.iter().fold(0, |acc, &x| acc * self.k + x);
        Ok(self.rows[Self::offset(self.k, t) + index].clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlChainReport {
    pub joint: f64,
    pub chained: f64,
    pub abs_diff: f64,
}

fn check_pair(p: &dyn SequenceLaw, q: &dyn SequenceLaw) -> Result<usize> {
    if p.seq_len() != q.seq_len() || p.vocab() != q.vocab() {
        return Err(Error::ShapeMismatch { expected: vec![p.seq_len(), p.vocab()], found: vec![q.seq_len(), q.vocab()] });
    }
    enumeration_size(p.vocab(), p.seq_len())
}

/// `sum_x P(x) (log P(x) - log Q(x))` over every full sequence.
pub fn joint_kl(p: &dyn SequenceLaw, q: &dyn SequenceLaw) -> Result<f64> {
    let total = check_pair(p, q)?;
    let (n, k) = (p.seq_len(), p.vocab());
    let mut kl = 0.0;
    for i in 0..total {
        let x = sequence_at(i, k, n);
        let pr = p.conditionals_along(&x)?;
        let qr = q.conditionals_along(&x)?;
        let mut lp = 0.0;
        let mut lq = 0.0;
        let mut zero_p = false;
        for t in 0..n {
            let (a, b) = (pr[t][x[t]], qr[t][x[t]]);
            if a <= 0.0 {
                zero_p = true;
                break;
            }
            if b <= 0.0 {
                return Err(Error::AbsoluteContinuityViolated);
            }
            lp += math::ln(a);
            lq += math::ln(b);
        }
        if !zero_p {
            kl += math::exp(lp) * (lp - lq);
        }
    }
    Ok(kl)
}

/// `sum_t E_{x_{<t} ~ P} KL(P(.|x_{<t}) || Q(.|x_{<t}))`, walking the
/// prefix tree depth first.
pub fn chained_kl(p: &dyn SequenceLaw, q: &dyn SequenceLaw) -> Result<f64> {
    check_pair(p, q)?;
    fn walk(p: &dyn SequenceLaw, q: &dyn SequenceLaw, prefix: &mut Vec<usize>, mass: f64) -> Result<f64> {
        if prefix.len() == p.seq_len() || mass == 0.0 {
            return Ok(0.0);
        }
        let pc = p.conditional(prefix)?;
        let qc = q.conditional(prefix)?;
        let mut acc = mass * categorical_kl(&pc, &qc)?;
        for (tok, &pt) in pc.iter().enumerate() {
            prefix.push(tok);
            acc += walk(p, q, prefix, mass * pt)?;
            prefix.pop();
        }
        Ok(acc)
    }
    walk(p, q, &mut Vec::new(), 1.0)
}

/// Joint and chained KL with their absolute difference.
pub fn kl_chain_check(p: &dyn SequenceLaw, q: &dyn SequenceLaw) -> Result<KlChainReport> {
    let joint = joint_kl(p, q)?;
    let chained = chained_kl(p, q)?;
    Ok(KlChainReport { joint, chained, abs_diff: (joint - chained).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::argen::ArConfig;

    #[test]
    fn enumeration_limits() {
        assert_eq!(enumeration_size(6, 4).unwrap(), 1296);
        assert_eq!(enumeration_size(10, 6).unwrap(), 1_000_000);
        assert!(matches!(enumeration_size(32, 16), Err(Error::NotEnumerable { vocab: 32, len: 16 })));
        assert_eq!(sequence_at(7, 6, 4), vec![0, 0, 1, 1]);
    }

    #[test]
    fn identical_laws_have_zero_kl() {
        let p = TableLaw::random(3, 4, 1.5, &mut SeededRng::new(1, 0)).unwrap();
        let r = kl_chain_check(&p, &p).unwrap();
        assert_eq!(r.joint.abs().max(r.chained.abs()), 0.0);
    }

    #[test]
    fn single_step_is_one_categorical_kl() {
        let mut rng = SeededRng::new(2, 0);
        let p = TableLaw::random(1, 5, 1.0, &mut rng).unwrap();
        let q = TableLaw::random(1, 5, 1.0, &mut rng).unwrap();
        let want = categorical_kl(&p.conditional(&[]).unwrap(), &q.conditional(&[]).unwrap()).unwrap();
        let r = kl_chain_check(&p, &q).unwrap();
        assert!((r.joint - want).abs() < 1e-14 && (r.chained - want).abs() < 1e-14);
    }

    #[test]
    fn random_tables_satisfy_chain_rule() {
        let mut rng = SeededRng::new(3, 0);
        for _ in 0..10 {
            let p = TableLaw::random(4, 3, 2.0, &mut rng).unwrap();
            let q = TableLaw::random(4, 3, 2.0, &mut rng).unwrap();
            let r = kl_chain_check(&p, &q).unwrap();
            assert!(r.abs_diff < 1e-10 && r.joint > 0.0, "{r:?}");
        }
    }

    #[test]
    fn degenerate_q_violates_absolute_continuity() {
        let p = TableLaw::from_fn(2, 2, |_| vec![0.5, 0.5]).unwrap();
        let q = TableLaw::from_fn(2, 2, |pre| if pre == [1] { vec![1.0, 0.0] } else { vec![0.5, 0.5] }).unwrap();
        assert_eq!(joint_kl(&p, &q), Err(Error::AbsoluteContinuityViolated));
        assert_eq!(chained_kl(&p, &q), Err(Error::AbsoluteContinuityViolated));
        // The reverse direction is fine: Q's zero only removes mass.
        assert!(kl_chain_check(&q, &p).unwrap().abs_diff < 1e-12);
    }

    #[test]
    fn unnormalized_table_is_rejected() {
        assert!(matches!(TableLaw::from_fn(1, 2, |_| vec![0.5, 0.6]), Err(Error::UnnormalizedDistribution { .. })));
    }

    #[test]
    fn model_law_normalizes_and_matches_its_own_rows() {
        let ar = ArParams::init(ArConfig::tiny(), &mut SeededRng::new(4, 0)).unwrap();
        let law = ModelLaw { ar: &ar, label: 2 };
        let x = [3, 1, 4, 0];
        let along = law.conditionals_along(&x).unwrap();
        for t in 0..4 {
            let c = law.conditional(&x[..t]).unwrap();
            assert!(c.iter().zip(&along[t]).all(|(a, b)| (a - b).abs() < 1e-14));
        }
        let total: f64 = (0..1296)
            .map(|i| {
                let x = sequence_at(i, 6, 4);
                law.conditionals_along(&x).unwrap().iter().zip(&x).map(|(r, &v)| r[v]).product::<f64>()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
