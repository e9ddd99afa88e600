//! Ranking and classification heads and their losses.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Dot product of the joint vector with every candidate row.
pub fn rank_candidates(joint: &Tensor, candidates: &Tensor) -> Result<Vec<f64>> {
    let d = joint.numel();
    if candidates.rank() != 2 || candidates.cols() != d {
        return Err(Error::Dimension(format!(
            "joint of width {d} cannot score candidates {:?}",
            candidates.shape()
        )));
    }
    let j = joint.data();
    Ok((0..candidates.rows())
        .map(|r| candidates.row(r).iter().zip(j).map(|(a, b)| a * b).sum())
        .collect())
}

/// In-batch ranking loss: the `B×B` score matrix `joints · goldsᵀ` against an
/// identity target, each example's gold serving as the others' negative.
pub fn ranking_loss(tape: &mut Tape, joints: Var, golds: Var) -> Result<Var> {
    let (tj, tg) = (tape.value(joints), tape.value(golds));
    if tj.shape() != tg.shape() || tj.rank() != 2 {
        return Err(Error::Dimension(format!(
            "ranking batch shapes {:?} and {:?} differ",
            tj.shape(),
            tg.shape()
        )));
    }
    let b = tj.rows();
    if b < 2 {
        return Err(Error::Config(format!(
            "in-batch ranking needs at least 2 examples, got {b}"
        )));
    }
    let gt = tape.transpose(golds)?;
    let scores = tape.matmul(joints, gt)?;
    tape.bce_with_logits(scores, &Tensor::eye(b))
}

/// Element-wise BCE-with-logits over the answer vocabulary, mean-reduced.
pub fn classification_loss(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    tape.bce_with_logits(logits, targets)
}

/// `mix·classification + (1−mix)·ranking`, or whichever part is present.
pub fn multi_head_loss(tape: &mut Tape, ranking: Option<Var>, classification: Option<Var>, mix: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::Config(format!("mix {mix} outside [0, 1]")));
    }
    match (ranking, classification) {
        (Some(r), Some(c)) => {
            let c = tape.scale(c, mix)?;
            let r = tape.scale(r, 1.0 - mix)?;
            tape.add(c, r)
        }
        (Some(r), None) => Ok(r),
        (None, Some(c)) => Ok(c),
        (None, None) => Err(Error::Config("multi_head_loss: no loss part present".into())),
    }
}
