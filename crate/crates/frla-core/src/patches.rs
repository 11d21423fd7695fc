//! Teacher patch filtering and class-balance rectification.
//!
//! Teacher patch probabilities whose argmax disagrees with a confident
//! image-level bank label are removed (they are very likely wrong); samples
//! without a confident bank label keep all their patches unless the
//! drop-unconfident flag is set. The retained set is then rectified: every
//! row is divided by the number of retained patches sharing its
//! pseudo-label, so each represented class contributes total mass exactly 1
//! to the downstream joint distribution.

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};
use std::fs;
use std::path::Path;

/// Origin of one retained patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    /// Dataset id of the sample the patch came from.
    pub sample_id: usize,
    /// Position of that sample within the current batch.
    pub batch_pos: usize,
    pub row: usize,
    pub col: usize,
}

/// Flattened retained patches with provenance, before or after
/// rectification.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    /// [l×K] row-major probability rows.
    pub probs: Vec<f64>,
    pub k: usize,
    pub provenance: Vec<PatchRef>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    /// Debug CSV: sample_id,row,col,argmax,max_prob.
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,row,col,argmax,max_prob\n");
        for (i, p) in self.provenance.iter().enumerate() {
            let r = self.row(i);
            let a = argmax(r);
            out.push_str(&format!("{},{},{},{},{}\n", p.sample_id, p.row, p.col, a, r[a]));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Removes teacher patches inconsistent with confident bank labels.
///
/// `vil_patch_probs` is the teacher's [B×H×W×K] output as detached values.
/// For a sample with a confident bank label c only patches with argmax c
/// survive; samples without a confident label keep every patch (or none,
/// when `drop_unconfident` is set). Surviving rows are copied unchanged.
#[allow(clippy::too_many_arguments)]
pub fn filter_inconsistent(
    vil_patch_probs: &[f64],
    batch: usize,
    height: usize,
    width: usize,
    k: usize,
    bank: &MemoryBank,
    batch_ids: &[usize],
    tau: f64,
    drop_unconfident: bool,
) -> Result<PatchBatch> {
    if vil_patch_probs.len() != batch * height * width * k {
        return Err(Error::shape(
            "filter_inconsistent",
            format!(
                "{} patch values for geometry {}x{}x{}x{}",
                vil_patch_probs.len(),
                batch,
                height,
                width,
                k
            ),
        ));
    }
    if batch_ids.len() != batch {
        return Err(Error::Index {
            op: "filter_inconsistent",
            detail: format!("{} batch ids for batch of {}", batch_ids.len(), batch),
        });
    }
    let mut probs = Vec::new();
    let mut provenance = Vec::new();
    for (pos, &id) in batch_ids.iter().enumerate() {
        let confident_label = bank.image_label_for_patch_filter(id, tau)?;
        if confident_label.is_none() && drop_unconfident {
            continue;
        }
        for row in 0..height {
            for col in 0..width {
                let base = ((pos * height + row) * width + col) * k;
                let slice = &vil_patch_probs[base..base + k];
                let keep = match confident_label {
                    Some(c) => argmax(slice) == c,
                    None => true,
                };
                if keep {
                    probs.extend_from_slice(slice);
                    provenance.push(PatchRef {
                        sample_id: id,
                        batch_pos: pos,
                        row,
                        col,
                    });
                }
            }
        }
    }
    Ok(PatchBatch { probs, k, provenance })
}

/// Divides every retained row by the count of retained patches sharing its
/// pseudo-label. Row argmax (and within-row ratios) are unchanged; each
/// represented class ends up contributing total mass 1.
pub fn rectify_class_balance(patches: &PatchBatch) -> Result<PatchBatch> {
    if patches.is_empty() {
        return Err(Error::usage(
            "rectify_class_balance",
            "empty patch set; the patch loss handles l = 0 upstream",
        ));
    }
    let l = patches.len();
    let k = patches.k;
    let labels: Vec<usize> = (0..l).map(|i| argmax(patches.row(i))).collect();
    let mut counts = vec![0usize; k];
    for &lab in &labels {
        counts[lab] += 1;
    }
    let mut probs = Vec::with_capacity(l * k);
    for i in 0..l {
        let div = counts[labels[i]] as f64;
        probs.extend(patches.row(i).iter().map(|v| v / div));
    }
    Ok(PatchBatch {
        probs,
        k,
        provenance: patches.provenance.clone(),
    })
}

/// Gathers the target model's patch rows in provenance order, keeping the
/// gather differentiable. `target_patches` is the [B×H×W×K] tape tensor.
pub fn target_patches_aligned(
    tape: &mut Tape,
    target_patches: TensorId,
    provenance: &[PatchRef],
) -> Result<TensorId> {
    let shape = tape.shape(target_patches).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(
            "target_patches_aligned",
            format!("{:?}", shape),
        ));
    }
    let (b, h, w, k) = (shape[0], shape[1], shape[2], shape[3]);
    let mut indices = Vec::with_capacity(provenance.len());
    for p in provenance {
        if p.batch_pos >= b || p.row >= h || p.col >= w {
            return Err(Error::Index {
                op: "target_patches_aligned",
                detail: format!(
                    "provenance (pos {}, row {}, col {}) outside {}x{}x{} grid",
                    p.batch_pos, p.row, p.col, b, h, w
                ),
            });
        }
        indices.push((p.batch_pos * h + p.row) * w + p.col);
    }
    let flat = tape.reshape(target_patches, vec![b * h * w, k])?;
    tape.gather_rows(flat, &indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::MemoryBank;
    use crate::losses::{joint_distribution, mutual_information};
    use crate::tensor::{Tensor, EPS_LOG};
    use frla_testkit as oracle;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Patch grid where sample 0 has argmax pattern [1,0,1,1] over a 2×2
    /// grid for K=2.
    fn grid_fixture() -> Vec<f64> {
        vec![
            0.3, 0.7, // (0,0) -> 1
            0.8, 0.2, // (0,1) -> 0
            0.4, 0.6, // (1,0) -> 1
            0.1, 0.9, // (1,1) -> 1
        ]
    }

    #[test]
    fn filter_keeps_only_patches_matching_confident_label() {
        let bank = MemoryBank::from_rows(vec![0.02, 0.98], 1, 2, 0).unwrap();
        let patches = filter_inconsistent(&grid_fixture(), 1, 2, 2, 2, &bank, &[0], 0.95, false)
            .unwrap();
        assert_eq!(patches.len(), 3);
        let kept: Vec<(usize, usize)> =
            patches.provenance.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(kept, vec![(0, 0), (1, 0), (1, 1)]);
        // surviving rows are unchanged
        assert_eq!(patches.row(0), &[0.3, 0.7]);
    }

    #[test]
    fn unconfident_sample_keeps_all_patches_or_none_with_flag() {
        let bank = MemoryBank::from_rows(vec![0.6, 0.4], 1, 2, 0).unwrap();
        let keep_all =
            filter_inconsistent(&grid_fixture(), 1, 2, 2, 2, &bank, &[0], 0.95, false).unwrap();
        assert_eq!(keep_all.len(), 4);
        let drop_all =
            filter_inconsistent(&grid_fixture(), 1, 2, 2, 2, &bank, &[0], 0.95, true).unwrap();
        assert_eq!(drop_all.len(), 0);
    }

    #[test]
    fn agreeing_patches_survive_completely() {
        // bank label 1 everywhere, all patches argmax 1
        let vals = vec![0.2, 0.8].repeat(2 * 2 * 2);
        let bank = MemoryBank::from_rows(vec![0.1, 0.9, 0.0, 1.0], 2, 2, 0).unwrap();
        let patches = filter_inconsistent(&vals, 2, 2, 2, 2, &bank, &[0, 1], 0.0, false).unwrap();
        assert_eq!(patches.len(), 2 * 2 * 2);
        // provenance unique and ordered by (batch, row, col)
        let mut seen = std::collections::HashSet::new();
        for p in &patches.provenance {
            assert!(seen.insert((p.sample_id, p.row, p.col)));
        }
    }

    #[test]
    fn rectify_worked_example_is_exact() {
        let patches = PatchBatch {
            probs: vec![0.7, 0.3, 0.6, 0.4, 0.2, 0.8],
            k: 2,
            provenance: vec![
                PatchRef { sample_id: 0, batch_pos: 0, row: 0, col: 0 },
                PatchRef { sample_id: 0, batch_pos: 0, row: 0, col: 1 },
                PatchRef { sample_id: 0, batch_pos: 0, row: 1, col: 0 },
            ],
        };
        let r = rectify_class_balance(&patches).unwrap();
        assert_eq!(r.probs, vec![0.35, 0.15, 0.3, 0.2, 0.2, 0.8]);
    }

    #[test]
    fn rectify_single_patch_is_unchanged() {
        let patches = PatchBatch {
            probs: vec![0.1, 0.9],
            k: 2,
            provenance: vec![PatchRef { sample_id: 3, batch_pos: 0, row: 0, col: 0 }],
        };
        let r = rectify_class_balance(&patches).unwrap();
        assert_eq!(r.probs, patches.probs);
    }

    #[test]
    fn rectify_rejects_empty() {
        let empty = PatchBatch {
            probs: vec![],
            k: 2,
            provenance: vec![],
        };
        assert!(matches!(
            rectify_class_balance(&empty),
            Err(Error::Usage { .. })
        ));
    }

    #[test]
    fn rectified_class_mass_is_one_and_argmax_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..50 {
            let l = rng.random_range(1..=24);
            let k = rng.random_range(2..=5);
            let rows = oracle::random_prob_rows(&mut rng, l, k, true);
            let patches = PatchBatch {
                probs: rows,
                k,
                provenance: (0..l)
                    .map(|i| PatchRef { sample_id: i, batch_pos: 0, row: 0, col: i })
                    .collect(),
            };
            let r = rectify_class_balance(&patches).unwrap();
            let mut mass = vec![0.0; k];
            for i in 0..l {
                let before = patches.row(i);
                let after = r.row(i);
                assert_eq!(argmax(before), argmax(after));
                mass[argmax(after)] += after.iter().sum::<f64>();
            }
            for (c, m) in mass.iter().enumerate() {
                if patches
                    .probs
                    .chunks(k)
                    .any(|row| argmax(row) == c)
                {
                    assert!((m - 1.0).abs() < 1e-10, "class {c} mass {m}");
                }
            }
        }
    }

    #[test]
    fn aligned_gather_matches_provenance_order() {
        let mut tape = Tape::new();
        // 1 sample, 2x2 grid, K=2: rows are distinct so order is visible
        let vals: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let t = tape.constant(vals, vec![1, 2, 2, 2]).unwrap();
        let prov = vec![
            PatchRef { sample_id: 0, batch_pos: 0, row: 1, col: 1 },
            PatchRef { sample_id: 0, batch_pos: 0, row: 0, col: 0 },
        ];
        let aligned = target_patches_aligned(&mut tape, t, &prov).unwrap();
        assert_eq!(tape.value(aligned), &[6.0, 7.0, 0.0, 1.0]);

        let bad = vec![PatchRef { sample_id: 0, batch_pos: 0, row: 2, col: 0 }];
        assert!(matches!(
            target_patches_aligned(&mut tape, t, &bad),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn aligned_gather_gradient_lands_only_on_gathered_rows() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f64 * 0.1).collect())
            .unwrap()
            .with_grad();
        let xid = tape.watch(&x);
        let reshaped = tape.reshape(xid, vec![1, 2, 2, 2]).unwrap();
        let prov = vec![PatchRef { sample_id: 0, batch_pos: 0, row: 0, col: 1 }];
        let aligned = target_patches_aligned(&mut tape, reshaped, &prov).unwrap();
        let s = tape.sum_all(aligned);
        tape.backward(s).unwrap();
        let g = tape.grad(xid).unwrap();
        assert_eq!(g, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pipeline_matches_single_pass_oracle() {
        // filter -> rectify -> MI against a brute-force recomputation
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..20 {
            let (b, h, w, k) = (
                rng.random_range(1..=4),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(2..=4),
            );
            let teacher = oracle::random_prob_rows(&mut rng, b * h * w, k, true);
            let bank_rows = oracle::random_prob_rows(&mut rng, b, k, true);
            let bank = MemoryBank::from_rows(bank_rows.clone(), b, k, 0).unwrap();
            let ids: Vec<usize> = (0..b).collect();
            let tau = 0.4;

            let filtered =
                filter_inconsistent(&teacher, b, h, w, k, &bank, &ids, tau, false).unwrap();
            if filtered.is_empty() {
                continue;
            }
            let rect = rectify_class_balance(&filtered).unwrap();
            let target = oracle::random_prob_rows(&mut rng, rect.len(), k, true);
            let mut tape = Tape::new();
            let ti = tape.constant(target.clone(), vec![rect.len(), k]).unwrap();
            let qi = tape.constant(rect.probs.clone(), vec![rect.len(), k]).unwrap();
            let jd = joint_distribution(&mut tape, ti, qi).unwrap();
            let mi = mutual_information(&mut tape, &jd).unwrap();
            let got = tape.scalar(mi).unwrap();

            // independent single pass
            let mut kept_rows: Vec<f64> = Vec::new();
            let mut labels: Vec<usize> = Vec::new();
            for pos in 0..b {
                let conf_label = {
                    let row = &bank_rows[pos * k..(pos + 1) * k];
                    let a = argmax(row);
                    if row[a] >= tau {
                        Some(a)
                    } else {
                        None
                    }
                };
                for p in 0..h * w {
                    let row = &teacher[(pos * h * w + p) * k..(pos * h * w + p + 1) * k];
                    let keep = conf_label.map(|c| argmax(row) == c).unwrap_or(true);
                    if keep {
                        kept_rows.extend_from_slice(row);
                        labels.push(argmax(row));
                    }
                }
            }
            let mut counts = vec![0usize; k];
            for &l in &labels {
                counts[l] += 1;
            }
            let mut rect_oracle: Vec<f64> = Vec::with_capacity(kept_rows.len());
            for (row, &l) in kept_rows.chunks(k).zip(&labels) {
                rect_oracle.extend(row.iter().map(|v| v / counts[l] as f64));
            }
            let expect = oracle::batch_mi_oracle(&target, &rect_oracle, labels.len(), k, EPS_LOG);
            assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        }
    }
}
