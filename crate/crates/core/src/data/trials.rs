//! Trial-pair generation and the trial / score TSV files.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::metadata::UtteranceRecord;
use crate::error::{Error, Result};
use crate::model::{CLASS_NONTARGET, CLASS_SPOOF, CLASS_TARGET};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Target,
    Nontarget,
    Spoof,
}

impl TrialLabel {
    pub const ALL: [TrialLabel; 3] = [TrialLabel::Target, TrialLabel::Nontarget, TrialLabel::Spoof];

    pub fn class_index(self) -> usize {
        match self {
            TrialLabel::Target => CLASS_TARGET,
            TrialLabel::Nontarget => CLASS_NONTARGET,
            TrialLabel::Spoof => CLASS_SPOOF,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Spoof => "spoof",
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TrialLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown trial label `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrialPair {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

impl TrialPair {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, label: TrialLabel) -> Self {
        TrialPair {
            enroll_id: enroll.into(),
            test_id: test.into(),
            label,
        }
    }
}

/// How bonafide pairs are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingConvention {
    /// One pair per unordered utterance pair; enroll is the smaller id.
    #[default]
    Unordered,
    /// Both directions of every bonafide pair.
    Ordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum TrialMode {
    Full,
    /// Uniform subsample of each class down to a cap (target, nontarget, spoof).
    Sampled { caps: [usize; 3] },
}

impl Default for TrialMode {
    fn default() -> Self {
        TrialMode::Full
    }
}

pub const DEFAULT_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialOptions {
    pub mode: TrialMode,
    pub convention: PairingConvention,
    pub seed: u64,
}

impl Default for TrialOptions {
    fn default() -> Self {
        TrialOptions {
            mode: TrialMode::Full,
            convention: PairingConvention::Unordered,
            seed: 0,
        }
    }
}

/// Builds target, non-target and spoof-target trials from utterance records.
///
/// Targets pair bonafide utterances of one speaker, non-targets pair bonafide
/// utterances of different speakers, and spoof trials pair every bonafide
/// enrollment with every spoofed utterance of the same speaker. Output is
/// grouped by class (target, nontarget, spoof), each in enumeration order.
pub fn generate_trials(records: &[UtteranceRecord], opts: &TrialOptions) -> Result<Vec<TrialPair>> {
    let mut bona: Vec<&UtteranceRecord> = records.iter().filter(|r| r.is_bonafide()).collect();
    bona.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let speakers: std::collections::BTreeSet<&str> = bona.iter().map(|r| r.speaker_id.as_str()).collect();
    if speakers.len() < 2 {
        return Err(Error::Protocol(format!(
            "need at least 2 speakers with bonafide speech, found {}",
            speakers.len()
        )));
    }
    let mut spoof_by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.is_bonafide()) {
        spoof_by_speaker.entry(&r.speaker_id).or_default().push(&r.utt_id);
    }
    spoof_by_speaker.values_mut().for_each(|v| v.sort());

    let mut classes: [Vec<TrialPair>; 3] = Default::default();
    for (i, a) in bona.iter().enumerate() {
        for b in &bona[i + 1..] {
            let label = if a.speaker_id == b.speaker_id {
                TrialLabel::Target
            } else {
                TrialLabel::Nontarget
            };
            let bucket = &mut classes[label.class_index()];
            bucket.push(TrialPair::new(&a.utt_id, &b.utt_id, label));
            if opts.convention == PairingConvention::Ordered {
                bucket.push(TrialPair::new(&b.utt_id, &a.utt_id, label));
            }
        }
    }
    for a in &bona {
        if let Some(spoofs) = spoof_by_speaker.get(a.speaker_id.as_str()) {
            for s in spoofs {
                classes[CLASS_SPOOF].push(TrialPair::new(&a.utt_id, *s, TrialLabel::Spoof));
            }
        }
    }

    if let TrialMode::Sampled { caps } = opts.mode {
        for (label, (bucket, cap)) in TrialLabel::ALL.iter().zip(classes.iter_mut().zip(caps)) {
            if bucket.len() > cap {
                let mut rng = rng_for(opts.seed, &format!("trial-sample-{label}"));
                let mut keep = sample(&mut rng, bucket.len(), cap).into_vec();
                keep.sort_unstable();
                let picked = keep.into_iter().map(|i| bucket[i].clone()).collect();
                *bucket = picked;
            }
        }
    }
    Ok(classes.into_iter().flatten().collect())
}

pub fn count_by_label(trials: &[TrialPair]) -> [usize; 3] {
    let mut c = [0; 3];
    for t in trials {
        c[t.label.class_index()] += 1;
    }
    c
}

/// Splits utterances into a training part and a held-out part. Within each
/// speaker, and within each (speaker, attack) group of spoofs, the records are
/// ordered by id and the last `round(fraction·n)` go to the held-out part.
pub fn holdout_split(records: &[UtteranceRecord], fraction: f64) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let mut groups: BTreeMap<(&str, Option<&str>), Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.speaker_id, r.attack.as_deref())).or_default().push(r);
    }
    let mut held = std::collections::HashSet::new();
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        let n_hold = ((g.len() as f64) * fraction).round() as usize;
        for r in &g[g.len() - n_hold.min(g.len())..] {
            held.insert(r.utt_id.as_str());
        }
    }
    let (eval, train): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| held.contains(r.utt_id.as_str()));
    Ok((train, eval))
}

pub fn trials_to_tsv(trials: &[TrialPair]) -> String {
    let mut s = String::with_capacity(trials.len() * 40);
    for t in trials {
        let _ = writeln!(s, "{}\t{}\t{}", t.enroll_id, t.test_id, t.label);
    }
    s
}

pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<TrialPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 columns, found {}", i + 1, cols.len())));
        }
        let label = cols[2]
            .parse()
            .map_err(|e: Error| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(TrialPair::new(cols[0], cols[1], label));
    }
    Ok(out)
}

pub fn write_trials(trials: &[TrialPair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trials_to_tsv(trials)).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<TrialPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text, path)
}

/// Score file: `enroll TAB test TAB label TAB score`, score with six
/// fractional digits. Rust's fixed-precision formatting rounds exact ties to
/// even.
pub fn scores_to_tsv(trials: &[TrialPair], scores: &[f64]) -> String {
    let mut s = String::with_capacity(trials.len() * 48);
    for (t, v) in trials.iter().zip(scores) {
        let _ = writeln!(s, "{}\t{}\t{}\t{:.6}", t.enroll_id, t.test_id, t.label, v);
    }
    s
}

pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<(TrialPair, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let err = |m: String| Error::format(path, format!("line {}: {m}", i + 1));
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", cols.len())));
        }
        let label = cols[2].parse().map_err(|e: Error| err(e.to_string()))?;
        let score: f64 = cols[3].parse().map_err(|_| err(format!("bad score `{}`", cols[3])))?;
        out.push((TrialPair::new(cols[0], cols[1], label), score));
    }
    Ok(out)
}
