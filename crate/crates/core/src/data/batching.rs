//! Training targets and shuffled minibatches over trial pairs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::embeddings::EmbeddingStore;
use crate::data::metadata::{attribute_index, encode_attribute, AttributeKind, Metadata, UtteranceRecord};
use crate::data::trials::TrialPair;
use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Matrix;

/// What the regression branch is asked to predict for the test utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegTarget {
    /// The spoof embedding alone.
    #[default]
    Spoof,
    /// The spoof embedding followed by the one-hot attack attribute.
    SpoofWithAttack,
}

/// Auxiliary targets to attach to each trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TargetSpec {
    pub reg: Option<RegTarget>,
    pub attr: Option<AttributeKind>,
}

/// Sources needed to build auxiliary targets.
#[derive(Debug, Clone, Copy)]
pub struct TargetSources<'a> {
    pub meta: &'a Metadata,
    pub cm: &'a EmbeddingStore,
    pub spec: TargetSpec,
}

/// `[φ_spoof]` or `[φ_spoof, φ_attr]` for one utterance.
pub fn make_reg_target(rec: &UtteranceRecord, cm: &EmbeddingStore, attr: Option<&[f64]>) -> Result<Vec<f64>> {
    let emb = cm
        .get(&rec.utt_id)
        .ok_or_else(|| Error::Data(format!("no spoof embedding for utterance `{}`", rec.utt_id)))?;
    let mut v: Vec<f64> = emb.iter().map(|x| *x as f64).collect();
    if let Some(a) = attr {
        v.extend_from_slice(a);
    }
    Ok(v)
}

/// One minibatch. Rows of `x` are `[enroll embedding | test embedding]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub reg: Option<Matrix>,
    pub attr: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// One-hot class targets.
    pub fn class_targets(&self) -> Matrix {
        one_hot_rows(&self.labels, NUM_CLASSES)
    }
}

pub fn one_hot_rows(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &c) in labels.iter().enumerate() {
        m.set(r, c, 1.0);
    }
    m
}

/// Trials resolved against the stores, ready to batch.
#[derive(Debug, Clone)]
pub struct Dataset<'a> {
    asv: &'a EmbeddingStore,
    trials: Vec<TrialPair>,
    enroll: Vec<usize>,
    test: Vec<usize>,
    labels: Vec<usize>,
    reg_dim: usize,
    reg: Option<Vec<f64>>,
    attr_classes: usize,
    attr: Option<Vec<usize>>,
}

impl<'a> Dataset<'a> {
    pub fn new(trials: &[TrialPair], asv: &'a EmbeddingStore, targets: Option<TargetSources<'_>>) -> Result<Self> {
        let mut enroll = Vec::with_capacity(trials.len());
        let mut test = Vec::with_capacity(trials.len());
        for (i, t) in trials.iter().enumerate() {
            let look = |id: &str| {
                asv.position(id).ok_or_else(|| {
                    Error::Data(format!(
                        "trial {i} ({} {} {}): no speaker embedding for `{id}`",
                        t.enroll_id, t.test_id, t.label
                    ))
                })
            };
            enroll.push(look(&t.enroll_id)?);
            test.push(look(&t.test_id)?);
        }
        let mut ds = Dataset {
            asv,
            trials: trials.to_vec(),
            enroll,
            test,
            labels: trials.iter().map(|t| t.label.class_index()).collect(),
            reg_dim: 0,
            reg: None,
            attr_classes: 0,
            attr: None,
        };
        if let Some(src) = targets {
            ds.attach_targets(src)?;
        }
        Ok(ds)
    }

    fn attach_targets(&mut self, src: TargetSources<'_>) -> Result<()> {
        let records: Vec<&UtteranceRecord> = self
            .trials
            .iter()
            .enumerate()
            .map(|(i, t)| {
                src.meta.find(&t.test_id).ok_or_else(|| {
                    Error::Data(format!("trial {i}: test utterance `{}` missing from metadata", t.test_id))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(kind) = src.spec.reg {
            let attack_vocab = match kind {
                RegTarget::Spoof => None,
                RegTarget::SpoofWithAttack => Some(src.meta.vocab(AttributeKind::Attack)?),
            };
            let mut flat = Vec::new();
            for rec in &records {
                let onehot = attack_vocab
                    .map(|v| encode_attribute(rec, AttributeKind::Attack, v))
                    .transpose()?;
                flat.extend(make_reg_target(rec, src.cm, onehot.as_deref())?);
            }
            self.reg_dim = src.cm.dim() + attack_vocab.map_or(0, |v| v.len() + 1);
            self.reg = Some(flat);
        }
        if let Some(kind) = src.spec.attr {
            let vocab = src.meta.vocab(kind)?;
            self.attr_classes = vocab.len() + 1;
            self.attr = Some(
                records
                    .iter()
                    .map(|r| attribute_index(r, kind, vocab))
                    .collect::<Result<_>>()?,
            );
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn trials(&self) -> &[TrialPair] {
        &self.trials
    }

    pub fn input_dim(&self) -> usize {
        2 * self.asv.dim()
    }

    /// Regression target width, if regression targets are attached.
    pub fn reg_dim(&self) -> Option<usize> {
        self.reg.as_ref().map(|_| self.reg_dim)
    }

    /// Attribute class count, if attribute targets are attached.
    pub fn attr_classes(&self) -> Option<usize> {
        self.attr.as_ref().map(|_| self.attr_classes)
    }

    /// Keeps the trials for which `keep` holds.
    pub fn filter(&self, mut keep: impl FnMut(&TrialPair) -> bool) -> Dataset<'a> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.trials[i])).collect();
        let pick = |v: &Vec<usize>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            asv: self.asv,
            trials: idx.iter().map(|&i| self.trials[i].clone()).collect(),
            enroll: pick(&self.enroll),
            test: pick(&self.test),
            labels: pick(&self.labels),
            reg_dim: self.reg_dim,
            reg: self.reg.as_ref().map(|r| {
                idx.iter()
                    .flat_map(|&i| r[i * self.reg_dim..(i + 1) * self.reg_dim].iter().copied())
                    .collect()
            }),
            attr_classes: self.attr_classes,
            attr: self.attr.as_ref().map(pick),
        }
    }

    /// Shuffled order of trial indices for one epoch.
    pub fn permutation(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = rng_for(derive_seed(seed, "shuffle"), &format!("epoch-{epoch}"));
        order.shuffle(&mut rng);
        order
    }

    /// Assembles the batch for the given trial indices, in that order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.asv.dim();
        let mut x = Matrix::zeros(indices.len(), 2 * d);
        for (r, &i) in indices.iter().enumerate() {
            let row = x.row_mut(r);
            for (dst, src) in row[..d].iter_mut().zip(self.asv.vector(self.enroll[i])) {
                *dst = *src as f64;
            }
            for (dst, src) in row[d..].iter_mut().zip(self.asv.vector(self.test[i])) {
                *dst = *src as f64;
            }
        }
        let reg = self.reg.as_ref().map(|flat| {
            let k = self.reg_dim;
            let data = indices.iter().flat_map(|&i| flat[i * k..(i + 1) * k].iter().copied()).collect();
            Matrix::from_vec(indices.len(), k, data).expect("sized")
        });
        Batch {
            indices: indices.to_vec(),
            x,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            reg,
            attr: self.attr.as_ref().map(|a| indices.iter().map(|&i| a[i]).collect()),
        }
    }

    /// Minibatches over a shuffled epoch; the last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> impl Iterator<Item = Batch> + '_ {
        let order = self.permutation(seed, epoch);
        let size = batch_size.max(1);
        let n = order.len();
        (0..n.div_ceil(size)).map(move |b| self.batch(&order[b * size..((b + 1) * size).min(n)]))
    }

    /// Batches in trial order, for scoring.
    pub fn sequential(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let size = batch_size.max(1);
        let n = self.len();
        (0..n.div_ceil(size)).map(move |b| {
            let idx: Vec<usize> = (b * size..((b + 1) * size).min(n)).collect();
            self.batch(&idx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};
    use crate::data::trials::{generate_trials, TrialLabel, TrialOptions};

    fn fixture() -> (crate::data::synth::SynthData, Vec<TrialPair>) {
        let d = synth_generate(&SynthConfig::preset("tiny").unwrap()).unwrap();
        let t = generate_trials(&d.meta.records, &TrialOptions::default()).unwrap();
        (d, t)
    }

    #[test]
    fn batch_sizes_keep_the_short_tail() {
        let (d, t) = fixture();
        assert!(t.len() >= 300);
        let ds = Dataset::new(&t[..300], &d.asv, None).unwrap();
        let sizes: Vec<usize> = ds.batches(128, 1, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
    }

    #[test]
    fn shuffles_depend_on_seed_and_epoch_only() {
        let (d, t) = fixture();
        let ds = Dataset::new(&t, &d.asv, None).unwrap();
        assert_eq!(ds.permutation(5, 1), ds.permutation(5, 1));
        assert_ne!(ds.permutation(5, 1), ds.permutation(5, 2));
        assert_ne!(ds.permutation(5, 1), ds.permutation(6, 1));
    }

    #[test]
    fn rows_are_enroll_then_test() {
        let (d, t) = fixture();
        let ds = Dataset::new(&t, &d.asv, None).unwrap();
        let dim = d.asv.dim();
        for b in ds.batches(64, 3, 0) {
            for (r, &i) in b.indices.iter().enumerate() {
                let e = d.asv.get(&t[i].enroll_id).unwrap();
                let s = d.asv.get(&t[i].test_id).unwrap();
                assert!(b.x.row(r)[..dim].iter().zip(e).all(|(a, b)| *a == *b as f64));
                assert!(b.x.row(r)[dim..].iter().zip(s).all(|(a, b)| *a == *b as f64));
                assert_eq!(b.labels[r], t[i].label.class_index());
            }
        }
    }

    #[test]
    fn missing_embedding_names_the_trial() {
        let (d, _) = fixture();
        let bad = vec![TrialPair::new("spk000_bon_000", "ghost", TrialLabel::Target)];
        let msg = Dataset::new(&bad, &d.asv, None).unwrap_err().to_string();
        assert!(msg.contains("ghost") && msg.contains("trial 0"), "{msg}");
    }

    #[test]
    fn regression_targets_follow_the_test_utterance() {
        let (d, t) = fixture();
        for (kind, extra) in [(RegTarget::Spoof, 0), (RegTarget::SpoofWithAttack, 4)] {
            let src = TargetSources {
                meta: &d.meta,
                cm: &d.cm,
                spec: TargetSpec {
                    reg: Some(kind),
                    attr: Some(AttributeKind::Attack),
                },
            };
            let ds = Dataset::new(&t, &d.asv, Some(src)).unwrap();
            assert_eq!(ds.reg_dim(), Some(d.cm.dim() + extra));
            assert_eq!(ds.attr_classes(), Some(4));
            let b = ds.batch(&[0, t.len() - 1]);
            let reg = b.reg.unwrap();
            let cm = d.cm.get(&t[t.len() - 1].test_id).unwrap();
            assert!(reg.row(1)[..d.cm.dim()].iter().zip(cm).all(|(a, b)| *a == *b as f64));
            let attr = b.attr.unwrap();
            assert_eq!(attr[0], 0);
            assert!(attr[1] > 0);
            if extra > 0 {
                assert_eq!(reg.row(1)[d.cm.dim() + attr[1]], 1.0);
            }
        }
    }

    #[test]
    fn reg_target_layout() {
        let (d, _) = fixture();
        let rec = d.meta.records.iter().find(|r| !r.is_bonafide()).unwrap();
        let plain = make_reg_target(rec, &d.cm, None).unwrap();
        assert_eq!(plain.len(), d.cm.dim());
        let onehot = encode_attribute(rec, AttributeKind::Attack, d.meta.vocab(AttributeKind::Attack).unwrap()).unwrap();
        let full = make_reg_target(rec, &d.cm, Some(&onehot)).unwrap();
        assert_eq!(&full[..d.cm.dim()], &plain[..]);
        assert_eq!(full.len(), d.cm.dim() + onehot.len());
        let ghost = UtteranceRecord::bonafide("nobody", "x");
        assert!(matches!(make_reg_target(&ghost, &d.cm, None), Err(Error::Data(_))));
    }

    #[test]
    fn filter_keeps_targets_aligned() {
        let (d, t) = fixture();
        let src = TargetSources {
            meta: &d.meta,
            cm: &d.cm,
            spec: TargetSpec {
                reg: Some(RegTarget::Spoof),
                attr: Some(AttributeKind::Attack),
            },
        };
        let ds = Dataset::new(&t, &d.asv, Some(src)).unwrap();
        let spoof = ds.filter(|p| p.label == TrialLabel::Spoof);
        let full_idx: Vec<usize> = (0..t.len()).filter(|&i| t[i].label == TrialLabel::Spoof).collect();
        let a = spoof.batch(&[0, 1]);
        let b = ds.batch(&full_idx[..2]);
        assert_eq!(a.x, b.x);
        assert_eq!(a.reg, b.reg);
        assert_eq!(a.attr, b.attr);
    }
}
