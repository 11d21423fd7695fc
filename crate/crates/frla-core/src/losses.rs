//! Batch mutual-information estimator and the adaptation loss terms.
//!
//! Mutual information between two probability-vector streams is estimated
//! from the batch-averaged outer product of the rows: the K×K joint is
//! symmetrized, renormalized to sum 1, and its marginals are the row and
//! column sums. Rows do not have to sum to 1 — class-balance rectification
//! deliberately breaks row normalization, and renormalizing the joint over
//! the batch absorbs any common scale.
//!
//! The loss terms are all negated MI values: the distillation loss couples
//! target and teacher image predictions, the forgetting-resistant loss
//! couples the confident subset's current predictions with their stored
//! bank rows, and the patch loss couples aligned target patches with the
//! rectified teacher patches under an attenuating weight.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Symmetrized, renormalized batch joint distribution with its marginals.
/// All three tensors live on the tape and stay differentiable through both
/// input streams.
#[derive(Debug, Clone, Copy)]
pub struct JointDistribution {
    pub joint: TensorId,
    pub row_marginal: TensorId,
    pub col_marginal: TensorId,
    pub k: usize,
}

/// Scalar loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_dis: f64,
    pub l_fr: f64,
    pub l_im: f64,
    pub l_la: f64,
    pub total: f64,
    /// Confident samples the forgetting-resistant term saw.
    pub b_prime: usize,
    /// Patches retained after inconsistency filtering.
    pub l_patches: usize,
    pub lesion_weight: f64,
}

/// J = normalize((PᵀQ/n + QᵀP/n)/2); marginals are row/column sums of J.
pub fn joint_distribution(tape: &mut Tape, p: TensorId, q: TensorId) -> Result<JointDistribution> {
    let sp = tape.shape(p).to_vec();
    let sq = tape.shape(q).to_vec();
    if sp.len() != 2 || sq.len() != 2 || sp != sq {
        return Err(Error::shape(
            "joint_distribution",
            format!("{:?} vs {:?}", sp, sq),
        ));
    }
    let (n, k) = (sp[0], sp[1]);
    if n == 0 {
        return Err(Error::EmptyBatch("joint_distribution"));
    }
    for (name, id) in [("P", p), ("Q", q)] {
        if let Some(v) = tape.value(id).iter().find(|v| **v < 0.0) {
            return Err(Error::domain(
                "joint_distribution",
                format!("negative entry {v} in {name}"),
            ));
        }
    }

    let pt = tape.transpose(p)?;
    let outer = tape.matmul(pt, q)?;
    let j0 = tape.mul_const(outer, 1.0 / n as f64);
    let j0t = tape.transpose(j0)?;
    let sym = tape.add(j0, j0t)?;
    let sym = tape.mul_const(sym, 0.5);
    let z = tape.sum_all(sym);
    if tape.scalar(z)? <= 0.0 {
        return Err(Error::domain(
            "joint_distribution",
            "joint mass is zero; inputs carry no probability",
        ));
    }
    let joint = tape.div(sym, z)?;

    let ones = tape.constant(vec![1.0; k], vec![k, 1])?;
    let row2d = tape.matmul(joint, ones)?;
    let row_marginal = tape.reshape(row2d, vec![k])?;
    let jt = tape.transpose(joint)?;
    let col2d = tape.matmul(jt, ones)?;
    let col_marginal = tape.reshape(col2d, vec![k])?;

    Ok(JointDistribution {
        joint,
        row_marginal,
        col_marginal,
        k,
    })
}

/// MI = Σ J·(log J − log(row⊗col)), logs clamped.
pub fn mutual_information(tape: &mut Tape, jd: &JointDistribution) -> Result<TensorId> {
    let k = jd.k;
    let row = tape.reshape(jd.row_marginal, vec![k, 1])?;
    let col = tape.reshape(jd.col_marginal, vec![1, k])?;
    let outer = tape.matmul(row, col)?;
    let log_j = tape.log_clamped(jd.joint);
    let log_outer = tape.log_clamped(outer);
    let diff = tape.sub(log_j, log_outer)?;
    let prod = tape.mul(jd.joint, diff)?;
    Ok(tape.sum_all(prod))
}

fn neg_batch_mi(tape: &mut Tape, p: TensorId, q: TensorId, op: &'static str) -> Result<TensorId> {
    if tape.shape(p) != tape.shape(q) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(p), tape.shape(q)),
        ));
    }
    let jd = joint_distribution(tape, p, q)?;
    let mi = mutual_information(tape, &jd)?;
    Ok(tape.mul_const(mi, -1.0))
}

/// Distillation loss: −MI(target image probs, teacher image probs).
/// The teacher stream is registered as a constant at the call site, so
/// gradient flows to the target predictions only.
pub fn loss_dis(tape: &mut Tape, target_probs: TensorId, vil_probs: TensorId) -> Result<TensorId> {
    neg_batch_mi(tape, target_probs, vil_probs, "loss_dis")
}

/// Forgetting-resistant loss over the confident subset: −MI(current
/// predictions, stored bank rows). An empty subset contributes an exact
/// zero with no gradient.
pub fn loss_fr(
    tape: &mut Tape,
    target_probs_subset: TensorId,
    stored_probs: TensorId,
) -> Result<TensorId> {
    let rows = tape.shape(target_probs_subset)[0];
    let stored_rows = tape.shape(stored_probs)[0];
    if rows != stored_rows {
        return Err(Error::shape(
            "loss_fr",
            format!("{} current rows vs {} stored rows", rows, stored_rows),
        ));
    }
    if rows == 0 {
        return Ok(tape.scalar_const(0.0));
    }
    neg_batch_mi(tape, target_probs_subset, stored_probs, "loss_fr")
}

/// Image-level loss: exact sum of the distillation and forgetting terms.
pub fn loss_im(tape: &mut Tape, l_dis: TensorId, l_fr: TensorId) -> Result<TensorId> {
    tape.add(l_dis, l_fr)
}

/// Attenuating patch-loss weight: declines linearly from `lambda_la` to 0
/// over the first half of training, then stays 0. `iter` counts optimizer
/// steps from 0; `max_iter` = epochs × batches per epoch.
pub fn lesion_weight(iter: usize, max_iter: usize, lambda_la: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::usage("lesion_weight", "max_iter must be positive"));
    }
    let half = max_iter as f64 / 2.0;
    Ok(lambda_la * (((half - iter as f64) / half).max(0.0)))
}

/// Patch-level loss: −weight·MI(target patches, rectified teacher patches).
/// Zero patches or zero weight produce an exact zero with no gradient.
pub fn loss_la(
    tape: &mut Tape,
    target_patch_probs: TensorId,
    rectified_vil_patch_probs: TensorId,
    weight: f64,
) -> Result<TensorId> {
    let rows = tape.shape(target_patch_probs)[0];
    let ref_rows = tape.shape(rectified_vil_patch_probs)[0];
    if rows != ref_rows {
        return Err(Error::shape(
            "loss_la",
            format!("{} target patch rows vs {} rectified rows", rows, ref_rows),
        ));
    }
    if rows == 0 || weight == 0.0 {
        return Ok(tape.scalar_const(0.0));
    }
    if tape.shape(target_patch_probs) != tape.shape(rectified_vil_patch_probs) {
        return Err(Error::shape(
            "loss_la",
            format!(
                "{:?} vs {:?}",
                tape.shape(target_patch_probs),
                tape.shape(rectified_vil_patch_probs)
            ),
        ));
    }
    let jd = joint_distribution(tape, target_patch_probs, rectified_vil_patch_probs)?;
    let mi = mutual_information(tape, &jd)?;
    Ok(tape.mul_const(mi, -weight))
}

/// Total loss: exact sum of the image-level and patch-level terms.
pub fn total_loss(tape: &mut Tape, l_im: TensorId, l_la: TensorId) -> Result<TensorId> {
    tape.add(l_im, l_la)
}
