//! LLR scoring, cosine baseline and equal-error-rate evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::batching::Dataset;
use crate::data::trials::{TrialLabel, TrialPair};
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::model::Model;

/// Rows per forward pass when scoring.
pub const SCORE_CHUNK: usize = 1024;

/// Class posteriors (target, non-target, spoof).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorTriple {
    pub tar: f64,
    pub non: f64,
    pub spf: f64,
}

impl PosteriorTriple {
    pub fn new(tar: f64, non: f64, spf: f64) -> Result<Self> {
        let ok = [tar, non, spf].iter().all(|p| (0.0..=1.0).contains(p));
        if !ok || (tar + non + spf - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("not a posterior triple: ({tar}, {non}, {spf})")));
        }
        Ok(PosteriorTriple { tar, non, spf })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Weight of the non-target posterior against the spoof posterior.
    pub alpha: f64,
    /// Lower bound on numerator and denominator before the log.
    pub floor: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { alpha: 0.95, floor: 1e-30 }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha={} outside [0, 1]", self.alpha)));
        }
        if !(self.floor > 0.0 && self.floor.is_finite()) {
            return Err(Error::Config("scoring floor must be positive".into()));
        }
        Ok(())
    }
}

/// `log(θ_tar / (α·θ_non + (1 − α)·θ_spf))`
pub fn llr_score(p: &PosteriorTriple, cfg: &ScoringConfig) -> f64 {
    let num = p.tar.max(cfg.floor);
    let den = (cfg.alpha * p.non + (1.0 - cfg.alpha) * p.spf).max(cfg.floor);
    num.ln() - den.ln()
}

pub fn cosine_score<T: Copy + Into<f64>>(e: &[T], t: &[T]) -> f64 {
    let (mut dot, mut ne, mut nt) = (0.0, 0.0, 0.0);
    for (a, b) in e.iter().zip(t) {
        let (a, b): (f64, f64) = ((*a).into(), (*b).into());
        dot += a * b;
        ne += a * a;
        nt += b * b;
    }
    dot / (ne.sqrt() * nt.sqrt()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EerPoint {
    /// Percentage in [0, 100].
    pub eer: f64,
    pub threshold: f64,
}

/// Equal-error rate with `accept ⇔ score ≥ τ`.
///
/// Operating points are taken at every distinct score (plus one point above
/// the maximum, where everything is rejected); the EER is the linear
/// interpolation between the last point with FRR < FAR and the first with
/// FRR ≥ FAR.
pub fn compute_eer(pos: &[f64], neg: &[f64]) -> Result<EerPoint> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Evaluation(format!(
            "EER needs positive and negative scores (got {} and {})",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| !s.is_finite()) {
        return Err(Error::Evaluation("non-finite score".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|s| (*s, true)).chain(neg.iter().map(|s| (*s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let last = all[all.len() - 1].0;
    // Scores strictly below the current threshold.
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut prev: Option<(f64, f64, f64)> = None;
    let mut i = 0;
    loop {
        let tau = if i < all.len() { all[i].0 } else { last + 1.0 };
        let far = (nn - neg_below as f64) / nn;
        let frr = pos_below as f64 / np;
        if frr >= far {
            let (t0, far0, frr0) = prev.expect("the lowest threshold has FRR 0 and FAR 1");
            let d0 = far0 - frr0;
            let d1 = frr - far;
            let w = d0 / (d0 + d1);
            return Ok(EerPoint {
                eer: 100.0 * (far0 + w * (far - far0)),
                threshold: t0 + w * (tau - t0),
            });
        }
        prev = Some((tau, far, frr));
        while i < all.len() && all[i].0 == tau {
            if all[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
}

/// Score-distribution summary for plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub target: Vec<usize>,
    pub nontarget: Vec<usize>,
    pub spoof: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 20;

fn histogram(scores: &[f64], labels: &[TrialLabel]) -> Option<Histogram> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return None;
    }
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let edges = (0..=HISTOGRAM_BINS).map(|k| lo + k as f64 * width).collect();
    let mut h = Histogram {
        edges,
        target: vec![0; HISTOGRAM_BINS],
        nontarget: vec![0; HISTOGRAM_BINS],
        spoof: vec![0; HISTOGRAM_BINS],
    };
    for (s, l) in scores.iter().zip(labels) {
        let k = (((s - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        match l {
            TrialLabel::Target => h.target[k] += 1,
            TrialLabel::Nontarget => h.nontarget[k] += 1,
            TrialLabel::Spoof => h.spoof[k] += 1,
        }
    }
    Some(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrialCounts {
    pub target: usize,
    pub nontarget: usize,
    pub spoof: usize,
}

/// Joint, bonafide and spoof EERs. Positives are always the target trials;
/// negatives are non-targets (bonafide), spoof targets (spoof) or both
/// (joint). `None` marks an EER whose trial classes are absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub alpha: f64,
    pub counts: TrialCounts,
    pub eer_joint: Option<f64>,
    pub eer_bonafide: Option<f64>,
    pub eer_spoof: Option<f64>,
    pub threshold_joint: Option<f64>,
    pub threshold_bonafide: Option<f64>,
    pub threshold_spoof: Option<f64>,
    pub histogram: Option<Histogram>,
}

impl EvalReport {
    /// Pretty JSON with keys in declaration order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }
}

/// Splits scores into (target, nontarget, spoof).
pub fn split_by_label(scores: &[f64], labels: &[TrialLabel]) -> [Vec<f64>; 3] {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (s, l) in scores.iter().zip(labels) {
        out[l.class_index()].push(*s);
    }
    out
}

/// Negative set of the joint EER: non-targets followed by spoof targets.
pub fn joint_negatives(nontarget: &[f64], spoof: &[f64]) -> Vec<f64> {
    nontarget.iter().chain(spoof).copied().collect()
}

pub fn report_from_scores(scores: &[f64], labels: &[TrialLabel], alpha: f64) -> Result<EvalReport> {
    if scores.len() != labels.len() {
        return Err(Error::shape("report_from_scores", scores.len(), labels.len()));
    }
    let [tar, non, spf] = split_by_label(scores, labels);
    let eer = |neg: &[f64]| -> Result<Option<EerPoint>> {
        if tar.is_empty() || neg.is_empty() {
            Ok(None)
        } else {
            compute_eer(&tar, neg).map(Some)
        }
    };
    let joint = eer(&joint_negatives(&non, &spf))?;
    let bona = eer(&non)?;
    let spoof = eer(&spf)?;
    Ok(EvalReport {
        alpha,
        counts: TrialCounts {
            target: tar.len(),
            nontarget: non.len(),
            spoof: spf.len(),
        },
        eer_joint: joint.map(|p| p.eer),
        eer_bonafide: bona.map(|p| p.eer),
        eer_spoof: spoof.map(|p| p.eer),
        threshold_joint: joint.map(|p| p.threshold),
        threshold_bonafide: bona.map(|p| p.threshold),
        threshold_spoof: spoof.map(|p| p.threshold),
        histogram: histogram(scores, labels),
    })
}

/// Posterior triples for every trial, in trial order. Chunks are scored in
/// parallel and reassembled in order, so the result does not depend on the
/// thread count.
pub fn posteriors(model: &Model, data: &Dataset) -> Result<Vec<PosteriorTriple>> {
    let n = data.len();
    let starts: Vec<usize> = (0..n).step_by(SCORE_CHUNK).collect();
    let chunks: Vec<Vec<PosteriorTriple>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + SCORE_CHUNK).min(n)).collect();
            let b = data.batch(&idx);
            let out = model.forward(&b.x, BnMode::Running)?;
            Ok(out
                .posteriors()
                .into_iter()
                .map(|[tar, non, spf]| PosteriorTriple { tar, non, spf })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn llr_scores(post: &[PosteriorTriple], cfg: &ScoringConfig) -> Vec<f64> {
    post.iter().map(|p| llr_score(p, cfg)).collect()
}

/// Scores every trial and computes the three EERs.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &ScoringConfig) -> Result<(EvalReport, Vec<f64>)> {
    cfg.validate()?;
    let post = posteriors(model, data)?;
    let scores = llr_scores(&post, cfg);
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score for trial {i}")));
    }
    let labels: Vec<TrialLabel> = data.trials().iter().map(|t| t.label).collect();
    Ok((report_from_scores(&scores, &labels, cfg.alpha)?, scores))
}

/// Labels of a trial list.
pub fn labels_of(trials: &[TrialPair]) -> Vec<TrialLabel> {
    trials.iter().map(|t| t.label).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::brute_force_eer;
    use proptest::prelude::*;
    use rand::Rng;

    /// Counts at midpoints between distinct scores, O(n²).
    #[test]
    fn llr_spot_values() {
        let cfg = ScoringConfig::default();
        let p = PosteriorTriple::new(0.5, 0.3, 0.2).unwrap();
        assert!((llr_score(&p, &cfg) - (0.5f64 / 0.295).ln()).abs() < 1e-12);
        assert!((llr_score(&p, &cfg) - 0.527633).abs() < 1e-6);
        let cm = ScoringConfig { alpha: 0.0, ..cfg };
        assert!((llr_score(&p, &cm) - 0.916291).abs() < 1e-6);
        let asv = ScoringConfig { alpha: 1.0, ..cfg };
        assert_eq!(llr_score(&PosteriorTriple::new(0.4, 0.4, 0.2).unwrap(), &asv), 0.0);
        let z = PosteriorTriple { tar: 0.0, non: 0.0, spf: 1.0 };
        assert!(llr_score(&z, &asv).is_finite());
    }

    #[test]
    fn cosine_spot_values() {
        let a = [1.0f64, 2.0, -3.0];
        assert!((cosine_score(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0f64, 0.0], &[0.0, 5.0]), 0.0);
        let n: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((cosine_score(&a, &n) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[0.0f32, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn eer_edge_cases() {
        let p = compute_eer(&[2.0, 3.0], &[0.0, 1.0]).unwrap();
        assert_eq!(p.eer, 0.0);
        let same = [0.1, 0.5, 0.5, 2.0, -1.0];
        assert!((compute_eer(&same, &same).unwrap().eer - 50.0).abs() < 1e-12);
        let inv = compute_eer(&[0.0, 1.0], &[2.0, 3.0]).unwrap();
        assert_eq!(inv.eer, 100.0);
        assert!(matches!(compute_eer(&[], &[1.0]), Err(Error::Evaluation(_))));
        assert!(matches!(compute_eer(&[1.0], &[]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn eer_matches_brute_force_on_random_lists() {
        let mut rng = crate::seed::rng_for(7, "eer-test");
        for _ in 0..60 {
            let np = rng.random_range(1..200);
            let nn = rng.random_range(1..200);
            let coarse = rng.random_bool(0.5);
            let mut draw = |shift: f64| {
                let v: f64 = rng.random_range(-2.0..2.0) + shift;
                if coarse { (v * 4.0).round() / 4.0 } else { v }
            };
            let pos: Vec<f64> = (0..np).map(|_| draw(0.7)).collect();
            let neg: Vec<f64> = (0..nn).map(|_| draw(0.0)).collect();
            let a = compute_eer(&pos, &neg).unwrap().eer;
            let b = brute_force_eer(&pos, &neg);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn threshold_lies_between_bracketing_scores() {
        let pos = [1.0, 2.0, 3.0, 4.0];
        let neg = [0.0, 1.5, 2.5, 0.5];
        let p = compute_eer(&pos, &neg).unwrap();
        assert!(p.threshold >= 1.0 && p.threshold <= 3.0, "{p:?}");
        assert!((p.eer - brute_force_eer(&pos, &neg)).abs() < 1e-12);
    }

    #[test]
    fn report_composition() {
        use TrialLabel::*;
        let labels = [Target, Target, Nontarget, Nontarget];
        let r = report_from_scores(&[3.0, 1.0, 2.0, 0.0], &labels, 0.95).unwrap();
        assert_eq!(r.eer_spoof, None);
        assert_eq!(r.eer_bonafide, r.eer_joint);
        let oracle = [Target, Nontarget, Spoof, Target, Spoof];
        let cfg = ScoringConfig::default();
        let post: Vec<PosteriorTriple> = oracle
            .iter()
            .map(|l| match l {
                Target => PosteriorTriple::new(1.0, 0.0, 0.0).unwrap(),
                Nontarget => PosteriorTriple::new(0.0, 1.0, 0.0).unwrap(),
                Spoof => PosteriorTriple::new(0.0, 0.0, 1.0).unwrap(),
            })
            .collect();
        let r = report_from_scores(&llr_scores(&post, &cfg), &oracle, cfg.alpha).unwrap();
        assert_eq!((r.eer_joint, r.eer_bonafide, r.eer_spoof), (Some(0.0), Some(0.0), Some(0.0)));
        assert_eq!(r.counts, TrialCounts { target: 2, nontarget: 1, spoof: 2 });
        let json = r.to_json();
        let keys: Vec<usize> = ["\"alpha\"", "\"counts\"", "\"eer_joint\"", "\"eer_bonafide\"", "\"eer_spoof\""]
            .iter()
            .map(|k| json.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn joint_negatives_are_the_union() {
        let scores = [0.3, -1.0, 2.0, 0.7, 0.1, 5.0];
        use TrialLabel::*;
        let labels = [Nontarget, Spoof, Target, Spoof, Nontarget, Target];
        let [_, non, spf] = split_by_label(&scores, &labels);
        let mut joint = joint_negatives(&non, &spf);
        let mut expect: Vec<f64> = scores.iter().zip(&labels).filter(|(_, l)| **l != Target).map(|(s, _)| *s).collect();
        joint.sort_by(f64::total_cmp);
        expect.sort_by(f64::total_cmp);
        assert_eq!(joint, expect);
    }

    proptest! {
        #[test]
        fn llr_monotone_in_each_posterior(t in 0.05f64..0.9, n in 0.05f64..0.9, d in 0.001f64..0.04, alpha in 0.01f64..0.99) {
            let cfg = ScoringConfig { alpha, ..ScoringConfig::default() };
            let s = 1.0 - t - n;
            prop_assume!(s > 0.05);
            let at = |tar, non, spf| llr_score(&PosteriorTriple { tar, non, spf }, &cfg);
            let base = at(t, n, s);
            prop_assert!(at(t + d, n, s) > base);
            prop_assert!(at(t, n + d, s) < base);
            prop_assert!(at(t, n, s + d) < base);
        }

        #[test]
        fn eer_is_rank_invariant(pos in proptest::collection::vec(-5.0f64..5.0, 1..40), neg in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let a = compute_eer(&pos, &neg).unwrap().eer;
            let f = |v: &Vec<f64>| v.iter().map(|x| (0.5 * x).exp() * 3.0 - 7.0).collect::<Vec<_>>();
            prop_assert_eq!(a, compute_eer(&f(&pos), &f(&neg)).unwrap().eer);
            prop_assert!((0.0..=100.0).contains(&a));
        }
    }
}
