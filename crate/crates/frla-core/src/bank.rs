//! Per-sample probability memory bank.
//!
//! Refreshed before each epoch by full-dataset inference with the current
//! target model (evaluation transform only — no augmentation), the bank
//! supplies stored confident predictions for the forgetting-resistant loss
//! and confident image-level labels for patch filtering. Stored rows are
//! detached values: nothing in the bank ever receives a gradient.

use crate::data::UnlabeledView;
use crate::error::{Error, Result};
use crate::models::{target_forward_image, TargetModel};
use crate::tensor::{Tape, Tensor};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    probs: Vec<f64>,
    n: usize,
    k: usize,
    confidence: Vec<f64>,
    pseudo_label: Vec<usize>,
    epoch_stamp: usize,
}

/// Confident members of one batch, in batch order.
#[derive(Debug, Clone)]
pub struct ConfidentSubset {
    /// Dataset ids of the selected members.
    pub sample_ids: Vec<usize>,
    /// Positions of the selected members within the batch.
    pub batch_positions: Vec<usize>,
    /// Their stored probability rows, [B′×K].
    pub stored_probs: Tensor,
}

impl ConfidentSubset {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
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

impl MemoryBank {
    /// Builds a bank by running the first refresh.
    pub fn refreshed(
        model: &TargetModel,
        data: &UnlabeledView<'_>,
        batch_size: usize,
        epoch: usize,
    ) -> Result<Self> {
        let k = model.arch.num_classes;
        let mut bank = MemoryBank {
            probs: vec![0.0; data.n * k],
            n: data.n,
            k,
            confidence: vec![0.0; data.n],
            pseudo_label: vec![0; data.n],
            epoch_stamp: 0,
        };
        bank.refresh(model, data, batch_size, epoch)?;
        Ok(bank)
    }

    /// Full-dataset inference in id order; stores detached probability rows
    /// and stamps the epoch.
    pub fn refresh(
        &mut self,
        model: &TargetModel,
        data: &UnlabeledView<'_>,
        batch_size: usize,
        epoch: usize,
    ) -> Result<()> {
        if data.n != self.n {
            return Err(Error::shape(
                "MemoryBank::refresh",
                format!("bank holds {} samples, dataset has {}", self.n, data.n),
            ));
        }
        let ids: Vec<usize> = (0..data.n).collect();
        for chunk in ids.chunks(batch_size.max(1)) {
            let batch = data.batch_images(chunk)?;
            let mut tape = Tape::new();
            let probs = target_forward_image(&mut tape, model, &batch)?;
            let values = tape.value(probs);
            for (pos, &id) in chunk.iter().enumerate() {
                let row = &values[pos * self.k..(pos + 1) * self.k];
                self.probs[id * self.k..(id + 1) * self.k].copy_from_slice(row);
                let lab = argmax(row);
                self.pseudo_label[id] = lab;
                self.confidence[id] = row[lab];
            }
        }
        self.epoch_stamp = epoch;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn epoch_stamp(&self) -> usize {
        self.epoch_stamp
    }

    pub fn probs_row(&self, id: usize) -> Result<&[f64]> {
        self.check_id(id)?;
        Ok(&self.probs[id * self.k..(id + 1) * self.k])
    }

    pub fn confidence(&self, id: usize) -> Result<f64> {
        self.check_id(id)?;
        Ok(self.confidence[id])
    }

    pub fn pseudo_label(&self, id: usize) -> Result<usize> {
        self.check_id(id)?;
        Ok(self.pseudo_label[id])
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.n {
            return Err(Error::UnknownSample { id, len: self.n });
        }
        Ok(())
    }

    /// Builds a bank directly from stored rows (tests and tools).
    pub fn from_rows(rows: Vec<f64>, n: usize, k: usize, epoch: usize) -> Result<Self> {
        if rows.len() != n * k {
            return Err(Error::shape(
                "MemoryBank::from_rows",
                format!("{} values for {}x{}", rows.len(), n, k),
            ));
        }
        let mut confidence = vec![0.0; n];
        let mut pseudo_label = vec![0; n];
        for i in 0..n {
            let row = &rows[i * k..(i + 1) * k];
            let lab = argmax(row);
            pseudo_label[i] = lab;
            confidence[i] = row[lab];
        }
        Ok(MemoryBank {
            probs: rows,
            n,
            k,
            confidence,
            pseudo_label,
            epoch_stamp: epoch,
        })
    }

    /// Batch members whose stored confidence is ≥ τ, preserving batch order.
    pub fn confident_subset(&self, batch_ids: &[usize], tau: f64) -> Result<ConfidentSubset> {
        let mut sample_ids = Vec::new();
        let mut batch_positions = Vec::new();
        let mut stored = Vec::new();
        for (pos, &id) in batch_ids.iter().enumerate() {
            self.check_id(id)?;
            if self.confidence[id] >= tau {
                sample_ids.push(id);
                batch_positions.push(pos);
                stored.extend_from_slice(&self.probs[id * self.k..(id + 1) * self.k]);
            }
        }
        let stored_probs = Tensor::new(vec![sample_ids.len(), self.k], stored)?;
        Ok(ConfidentSubset {
            sample_ids,
            batch_positions,
            stored_probs,
        })
    }

    /// Pseudo-label of a sample when its stored confidence is ≥ τ.
    pub fn image_label_for_patch_filter(&self, sample_id: usize, tau: f64) -> Result<Option<usize>> {
        self.check_id(sample_id)?;
        if self.confidence[sample_id] >= tau {
            Ok(Some(self.pseudo_label[sample_id]))
        } else {
            Ok(None)
        }
    }

    /// CSV dump: sample_id, confidence, pseudo_label, p_0..p_{K−1}.
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,confidence,pseudo_label");
        for c in 0..self.k {
            out.push_str(&format!(",p_{c}"));
        }
        out.push('\n');
        for id in 0..self.n {
            out.push_str(&format!(
                "{},{},{}",
                id, self.confidence[id], self.pseudo_label[id]
            ));
            for v in &self.probs[id * self.k..(id + 1) * self.k] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DomainShift, SynthSpec};
    use crate::models::{ConvLayerSpec, ModelArch};
    use crate::train::SgdMomentum;

    fn tiny_setup() -> (TargetModel, crate::data::LabeledDataset) {
        let arch = ModelArch {
            image_size: 10,
            in_channels: 3,
            convs: vec![
                ConvLayerSpec { out_channels: 4, kernel: 3, stride: 2 },
                ConvLayerSpec { out_channels: 6, kernel: 3, stride: 1 },
            ],
            embed_dim: 4,
            num_classes: 4,
        };
        let model = TargetModel::init(arch, 1.0, 5).unwrap();
        let spec = SynthSpec {
            image_size: 10,
            ..SynthSpec::default()
        };
        let ds = generate(&spec, &DomainShift::identity(), 10, 17, "t", "train").unwrap();
        (model, ds)
    }

    #[test]
    fn refresh_matches_direct_forward_bit_exactly() {
        let (model, ds) = tiny_setup();
        let view = ds.unlabeled();
        let bank = MemoryBank::refreshed(&model, &view, 4, 0).unwrap();
        assert_eq!(bank.epoch_stamp(), 0);
        for id in 0..ds.n {
            let batch = view.batch_images(&[id]).unwrap();
            let mut tape = Tape::new();
            let probs = target_forward_image(&mut tape, &model, &batch).unwrap();
            assert_eq!(bank.probs_row(id).unwrap(), tape.value(probs));
        }
    }

    #[test]
    fn stored_rows_sum_to_one_and_labels_match() {
        let (model, ds) = tiny_setup();
        let bank = MemoryBank::refreshed(&model, &ds.unlabeled(), 3, 0).unwrap();
        for id in 0..ds.n {
            let row = bank.probs_row(id).unwrap();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let lab = bank.pseudo_label(id).unwrap();
            assert_eq!(bank.confidence(id).unwrap(), row[lab]);
            assert!(row.iter().all(|v| *v <= row[lab]));
        }
    }

    #[test]
    fn two_refreshes_with_unchanged_weights_are_identical() {
        let (model, ds) = tiny_setup();
        let view = ds.unlabeled();
        let a = MemoryBank::refreshed(&model, &view, 4, 0).unwrap();
        let mut b = MemoryBank::refreshed(&model, &view, 4, 0).unwrap();
        assert_eq!(a, b);
        b.refresh(&model, &view, 7, 1).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(b.epoch_stamp(), 1);
    }

    #[test]
    fn refresh_after_sgd_step_changes_rows() {
        let (mut model, ds) = tiny_setup();
        let view = ds.unlabeled();
        let before = MemoryBank::refreshed(&model, &view, 4, 0).unwrap();

        // one cross-entropy-ish step against an arbitrary one-hot
        let batch = view.batch_images(&[0, 1, 2]).unwrap();
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let f = staged.features(&mut tape, &batch).unwrap();
        let probs = staged.image_head(&mut tape, &f).unwrap();
        let lp = tape.log_clamped(probs);
        let onehot = tape
            .constant(
                vec![
                    1.0, 0.0, 0.0, 0.0, //
                    0.0, 1.0, 0.0, 0.0, //
                    0.0, 0.0, 1.0, 0.0,
                ],
                vec![3, 4],
            )
            .unwrap();
        let picked = tape.mul(lp, onehot).unwrap();
        let s = tape.sum_all(picked);
        let loss = tape.mul_const(s, -1.0 / 3.0);
        tape.backward(loss).unwrap();
        let ids = staged_param_ids(&staged);
        let mut params = model.parameters_mut();
        for (id, p) in ids.iter().zip(params.iter_mut()) {
            tape.export_grad(*id, p);
        }
        let mut opt = SgdMomentum::new(0.5, 0.0);
        opt.step(&mut params).unwrap();

        let after = MemoryBank::refreshed(&model, &view, 4, 1).unwrap();
        assert_ne!(before.probs, after.probs);
    }

    fn staged_param_ids(staged: &crate::models::StagedTarget) -> Vec<crate::tensor::TensorId> {
        staged.param_ids()
    }

    #[test]
    fn confident_subset_respects_threshold_boundary() {
        let rows = vec![
            0.96, 0.04, //
            0.94, 0.06, //
            0.95, 0.05,
        ];
        let bank = MemoryBank::from_rows(rows, 3, 2, 0).unwrap();
        let sel = bank.confident_subset(&[0, 1, 2], 0.95).unwrap();
        // 0.96 selected, 0.94 not, exact 0.95 selected (inclusive compare)
        assert_eq!(sel.sample_ids, vec![0, 2]);
        assert_eq!(sel.batch_positions, vec![0, 2]);
        assert_eq!(sel.stored_probs.shape(), &[2, 2]);

        let all = bank.confident_subset(&[2, 0, 1], 0.0).unwrap();
        assert_eq!(all.sample_ids, vec![2, 0, 1]);
        assert_eq!(all.len(), 3);

        assert!(matches!(
            bank.confident_subset(&[5], 0.5),
            Err(Error::UnknownSample { .. })
        ));
    }

    #[test]
    fn membership_is_monotone_in_tau() {
        let (model, ds) = tiny_setup();
        let bank = MemoryBank::refreshed(&model, &ds.unlabeled(), 4, 0).unwrap();
        let ids: Vec<usize> = (0..ds.n).collect();
        let mut prev = usize::MAX;
        for tau in [0.0, 0.2, 0.4, 0.6, 0.8, 0.95, 1.0] {
            let sel = bank.confident_subset(&ids, tau).unwrap();
            assert!(sel.len() <= prev);
            prev = sel.len();
        }
        // tau=0 selects everything: subset + complement partition the set
        let all = bank.confident_subset(&ids, 0.0).unwrap();
        assert_eq!(all.len(), ds.n);
    }

    #[test]
    fn patch_filter_label_agrees_with_subset_membership() {
        let (model, ds) = tiny_setup();
        let bank = MemoryBank::refreshed(&model, &ds.unlabeled(), 4, 0).unwrap();
        let ids: Vec<usize> = (0..ds.n).collect();
        let tau = 0.3;
        let sel = bank.confident_subset(&ids, tau).unwrap();
        for id in 0..ds.n {
            let lab = bank.image_label_for_patch_filter(id, tau).unwrap();
            assert_eq!(lab.is_some(), sel.sample_ids.contains(&id));
            if let Some(c) = lab {
                assert_eq!(c, bank.pseudo_label(id).unwrap());
            }
        }
        assert!(matches!(
            bank.image_label_for_patch_filter(99, tau),
            Err(Error::UnknownSample { .. })
        ));
    }

    #[test]
    fn high_confidence_label_is_returned() {
        let bank = MemoryBank::from_rows(vec![0.005, 0.005, 0.99, 0.0], 1, 4, 0).unwrap();
        assert_eq!(bank.image_label_for_patch_filter(0, 0.95).unwrap(), Some(2));
        let bank = MemoryBank::from_rows(vec![0.5, 0.3, 0.1, 0.1], 1, 4, 0).unwrap();
        assert_eq!(bank.image_label_for_patch_filter(0, 0.95).unwrap(), None);
    }

    #[test]
    fn csv_dump_has_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let bank = MemoryBank::from_rows(vec![0.9, 0.1, 0.2, 0.8], 2, 2, 3).unwrap();
        let path = dir.path().join("bank.csv");
        bank.dump_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "sample_id,confidence,pseudo_label,p_0,p_1");
        assert_eq!(lines.next().unwrap(), "0,0.9,0,0.9,0.1");
        assert_eq!(lines.next().unwrap(), "1,0.8,1,0.2,0.8");
    }
}
