//! Cross-entropy between a teacher's softmax over candidate logits and the
//! student's softmax over cosine similarities.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::matrix::Rows;
use crate::vector::{cosine_unchecked, cosine_with_grad, log_sum_exp, softmax};

use super::batch::{candidate_name, DistillBatch, QUERIES};
use super::{LossResult, Objective};

/// Temperatures for [`distill_loss`]; both default to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distill {
    pub tau_student: f64,
    pub tau_teacher: f64,
}

impl Default for Distill {
    fn default() -> Self {
        Self {
            tau_student: 1.0,
            tau_teacher: 1.0,
        }
    }
}

impl Distill {
    fn run(&self, batch: &DistillBatch, with_grads: bool) -> LossResult {
        let n = batch.len();
        let d = batch.queries().dim();
        let mut value = 0.0;
        let mut gq = Rows::zeros(n, d);
        let mut gc: Vec<Rows> = batch.candidates().iter().map(|c| Rows::zeros(c.rows(), d)).collect();
        for i in 0..n {
            let q = batch.queries().row(i);
            let cands = &batch.candidates()[i];
            let z: Vec<f64> = cands
                .iter_rows()
                .map(|c| cosine_unchecked(q, c) / self.tau_student)
                .collect();
            let t: Vec<f64> = batch.teacher_logits()[i]
                .iter()
                .map(|x| x / self.tau_teacher)
                .collect();
            let p_teacher = softmax(&t);
            let lse = log_sum_exp(&z);
            // −Σ P_t log P_s = lse(z) − Σ P_t z
            value += lse - p_teacher.iter().zip(&z).map(|(p, z)| p * z).sum::<f64>();
            if with_grads {
                let p_student = softmax(&z);
                for (k, c) in cands.iter_rows().enumerate() {
                    let coef = (p_student[k] - p_teacher[k]) / (self.tau_student * n as f64);
                    let (_, ga, gb) = cosine_with_grad(q, c);
                    gq.add_to_row(i, &ga.iter().map(|x| x * coef).collect::<Vec<_>>());
                    gc[i].add_to_row(k, &gb.iter().map(|x| x * coef).collect::<Vec<_>>());
                }
            }
        }
        let mut grads = BTreeMap::new();
        if with_grads {
            grads.insert(QUERIES.to_string(), gq);
            for (i, g) in gc.into_iter().enumerate() {
                grads.insert(candidate_name(i), g);
            }
        }
        LossResult {
            value: value / n as f64,
            grads,
            warnings: Vec::new(),
        }
    }
}

/// Mean over queries of `−Σ_k P_teacher(k) log P_student(k)`.
pub fn distill_loss(batch: &DistillBatch, tau_student: f64, tau_teacher: f64) -> Result<LossResult> {
    Ok(Distill {
        tau_student,
        tau_teacher,
    }
    .run(batch, true))
}

impl Objective<DistillBatch> for Distill {
    fn evaluate(&self, batch: &DistillBatch) -> Result<LossResult> {
        Ok(self.run(batch, true))
    }

    fn value(&self, batch: &DistillBatch) -> Result<f64> {
        Ok(self.run(batch, false).value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::grad_check;

    fn batch(cands: Vec<Vec<f64>>, teacher: Vec<f64>) -> DistillBatch {
        let q = Rows::new(1, 2, vec![1.0, 0.0]).unwrap();
        DistillBatch::new(q, vec![Rows::from_vecs(2, &cands).unwrap()], vec![teacher]).unwrap()
    }

    #[test]
    fn uniform_is_ln4() {
        let a = 0.6f64;
        let b = batch(
            vec![vec![a.cos(), a.sin()], vec![a.cos(), -a.sin()], vec![a.cos(), a.sin()], vec![a.cos(), -a.sin()]],
            vec![2.0; 4],
        );
        assert!((distill_loss(&b, 1.0, 1.0).unwrap().value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matched_one_hot_goes_to_zero() {
        let b = batch(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![1000.0, -1000.0]);
        let v = distill_loss(&b, 0.001, 1.0).unwrap().value;
        assert!((0.0..1e-12).contains(&v));
    }

    #[test]
    fn gradient_check() {
        let q = Rows::from_vecs(3, &[vec![0.3, -0.2, 0.9], vec![1.0, 0.1, 0.0]]).unwrap();
        let c0 = Rows::from_vecs(3, &[vec![0.2, 0.1, 0.7], vec![-0.5, 0.5, 0.1], vec![0.0, 1.0, 0.0]]).unwrap();
        let c1 = Rows::from_vecs(3, &[vec![0.9, 0.3, -0.1], vec![0.1, 0.1, 0.9]]).unwrap();
        let b = DistillBatch::new(q, vec![c0, c1], vec![vec![2.0, -1.0, 0.5], vec![0.3, 0.2]]).unwrap();
        let op = Distill {
            tau_student: 0.5,
            tau_teacher: 2.0,
        };
        assert!(grad_check(&op, &b, 1e-6).unwrap() < 1e-7);
    }
}
