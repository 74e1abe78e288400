// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar loss read off the final-position logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// `logit[distractor] - logit[target]`.
    NegLogitDiff { target: usize, distractor: usize },
    /// `KL(reference || softmax(logits))` with the reference held fixed.
    KlToReference { reference: Vec<f64> },
    /// `-log softmax(logits)[target]`.
    CrossEntropy { target: usize },
}

impl Objective {
    /// Records the loss on `tape` for `logits` of shape `seq_len x vocab`.
    pub fn loss(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        let rows = tape.value(logits).rows_cols().0;
        if rows == 0 {
            return Err(Error::Input("objective on empty sequence".into()));
        }
        let last = tape.select_row(logits, rows - 1)?;
        match self {
            Objective::NegLogitDiff { target, distractor } => {
                let t = tape.pick(last, *target)?;
                let d = tape.pick(last, *distractor)?;
                tape.sub(d, t)
            }
            Objective::KlToReference { reference } => {
                let vocab = tape.value(last).len();
                if reference.len() != vocab {
                    return Err(Error::shape(
                        "kl objective",
                        format!(
                            "reference has {} entries, vocabulary {vocab}",
                            reference.len()
                        ),
                    ));
                }
                let q = tape.softmax(last)?;
                let p = tape.constant(Tensor::new(vec![1, vocab], reference.clone())?);
                let kl = tape.kl_divergence(p, q)?;
                Ok(tape.sum(kl))
            }
            Objective::CrossEntropy { target } => tape.cross_entropy(last, *target),
        }
    }

    /// Evaluates the loss on concrete logits.
    pub fn value(&self, logits: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let loss = self.loss(&mut tape, l)?;
        Ok(tape.value(loss).data()[0])
    }
}

/// Softmax of the final row of `logits`.
pub fn final_distribution(logits: &Tensor) -> Vec<f64> {
    let (rows, cols) = logits.rows_cols();
    let mut p = logits.data()[(rows - 1) * cols..].to_vec();
    crate::autodiff::softmax_in_place(&mut p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits() -> Tensor {
        Tensor::from_rows(&[vec![9.0, 9.0, 9.0], vec![1.0, 3.0, 0.5]])
    }

    #[test]
    fn logit_diff_reads_last_row() {
        let o = Objective::NegLogitDiff {
            target: 1,
            distractor: 0,
        };
        assert_eq!(o.value(&logits()).unwrap(), -2.0);
    }

    #[test]
    fn kl_to_own_distribution_is_zero() {
        let l = logits();
        let o = Objective::KlToReference {
            reference: final_distribution(&l),
        };
        assert!(o.value(&l).unwrap().abs() < 1e-15);
        let wrong = Objective::KlToReference {
            reference: vec![0.5, 0.5],
        };
        assert!(wrong.value(&l).is_err());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let l = logits();
        let p = final_distribution(&l);
        let o = Objective::CrossEntropy { target: 2 };
        assert!((o.value(&l).unwrap() + p[2].ln()).abs() < 1e-12);
    }
}
