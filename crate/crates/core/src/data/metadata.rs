//! Utterance metadata: TSV with vocabulary header lines.
//!
//! ```text
//! #vocab attack A01,A02,A03
//! #vocab vocoder WORLD,WaveNet
//! utt_id <TAB> speaker_id <TAB> bonafide|spoof <TAB> attack <TAB> vocoder <TAB> synthesizer <TAB> wavegen
//! ```
//! `-` stands for "no label".

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Attack,
    Vocoder,
    Synthesizer,
    Wavegen,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 4] = [
        AttributeKind::Attack,
        AttributeKind::Vocoder,
        AttributeKind::Synthesizer,
        AttributeKind::Wavegen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeKind::Attack => "attack",
            AttributeKind::Vocoder => "vocoder",
            AttributeKind::Synthesizer => "synthesizer",
            AttributeKind::Wavegen => "wavegen",
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AttributeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribute kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UttKind {
    Bonafide,
    Spoof,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub kind: UttKind,
    pub attack: Option<String>,
    pub vocoder: Option<String>,
    pub synthesizer: Option<String>,
    pub wavegen: Option<String>,
}

impl UtteranceRecord {
    pub fn bonafide(utt_id: impl Into<String>, speaker_id: impl Into<String>) -> Self {
        UtteranceRecord {
            utt_id: utt_id.into(),
            speaker_id: speaker_id.into(),
            kind: UttKind::Bonafide,
            attack: None,
            vocoder: None,
            synthesizer: None,
            wavegen: None,
        }
    }

    pub fn spoof(utt_id: impl Into<String>, speaker_id: impl Into<String>, attack: impl Into<String>) -> Self {
        UtteranceRecord {
            kind: UttKind::Spoof,
            attack: Some(attack.into()),
            ..UtteranceRecord::bonafide(utt_id, speaker_id)
        }
    }

    pub fn is_bonafide(&self) -> bool {
        self.kind == UttKind::Bonafide
    }

    pub fn attribute(&self, kind: AttributeKind) -> Option<&str> {
        match kind {
            AttributeKind::Attack => self.attack.as_deref(),
            AttributeKind::Vocoder => self.vocoder.as_deref(),
            AttributeKind::Synthesizer => self.synthesizer.as_deref(),
            AttributeKind::Wavegen => self.wavegen.as_deref(),
        }
    }
}

/// Utterance records plus the closed label vocabulary of each attribute kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    pub vocab: BTreeMap<AttributeKind, Vec<String>>,
    pub records: Vec<UtteranceRecord>,
}

impl Metadata {
    pub fn vocab(&self, kind: AttributeKind) -> Result<&[String]> {
        self.vocab
            .get(&kind)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("metadata declares no `{kind}` vocabulary")))
    }

    pub fn find(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.utt_id == utt_id)
    }

    /// Checks record consistency against the declared vocabularies.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Data(format!("row {i}: duplicate utterance id `{}`", r.utt_id)));
            }
            if r.is_bonafide() != r.attack.is_none() {
                return Err(Error::Data(format!(
                    "row {i} (`{}`): bonafide records must have no attack and spoof records must have one",
                    r.utt_id
                )));
            }
            if r.is_bonafide() {
                continue;
            }
            for kind in AttributeKind::ALL {
                if let Some(label) = r.attribute(kind) {
                    let vocab = self.vocab.get(&kind).ok_or_else(|| {
                        Error::Data(format!("row {i}: `{kind}` label used without a #vocab line"))
                    })?;
                    if !vocab.iter().any(|v| v == label) {
                        return Err(Error::Vocabulary {
                            kind: kind.to_string(),
                            label: label.to_owned(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (kind, labels) in &self.vocab {
            let _ = writeln!(out, "#vocab {kind} {}", labels.join(","));
        }
        let dash = |o: &Option<String>| o.clone().unwrap_or_else(|| "-".into());
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.utt_id,
                r.speaker_id,
                if r.is_bonafide() { "bonafide" } else { "spoof" },
                dash(&r.attack),
                dash(&r.vocoder),
                dash(&r.synthesizer),
                dash(&r.wavegen)
            );
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Metadata> {
        let mut meta = Metadata::default();
        for (lineno, line) in text.lines().enumerate() {
            let ln = lineno + 1;
            let err = |msg: String| Error::format(path, format!("line {ln}: {msg}"));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#vocab ") {
                let mut parts = rest.trim().splitn(2, char::is_whitespace);
                let kind: AttributeKind = parts
                    .next()
                    .unwrap_or("")
                    .parse()
                    .map_err(|e: Error| err(e.to_string()))?;
                let labels: Vec<String> = parts
                    .next()
                    .unwrap_or("")
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect();
                if labels.is_empty() {
                    return Err(err(format!("empty `{kind}` vocabulary")));
                }
                meta.vocab.insert(kind, labels);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(err(format!("expected 7 tab-separated columns, found {}", cols.len())));
            }
            let opt = |s: &str| (s != "-").then(|| s.to_owned());
            let kind = match cols[2] {
                "bonafide" => UttKind::Bonafide,
                "spoof" => UttKind::Spoof,
                other => return Err(err(format!("kind must be bonafide|spoof, got `{other}`"))),
            };
            meta.records.push(UtteranceRecord {
                utt_id: cols[0].to_owned(),
                speaker_id: cols[1].to_owned(),
                kind,
                attack: opt(cols[3]),
                vocoder: opt(cols[4]),
                synthesizer: opt(cols[5]),
                wavegen: opt(cols[6]),
            });
        }
        meta.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(meta)
    }
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<Metadata> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Metadata::parse(&text, path)
}

pub fn write_metadata(meta: &Metadata, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, meta.to_tsv()).map_err(|e| Error::io(path, e))
}

/// One-hot vector of length `vocab.len() + 1`: index 0 is bonafide, index
/// `1 + k` the k-th vocabulary label.
pub fn encode_attribute(rec: &UtteranceRecord, kind: AttributeKind, vocab: &[String]) -> Result<Vec<f64>> {
    let idx = attribute_index(rec, kind, vocab)?;
    let mut v = vec![0.0; vocab.len() + 1];
    v[idx] = 1.0;
    Ok(v)
}

/// Class index of [`encode_attribute`] without materialising the vector.
pub fn attribute_index(rec: &UtteranceRecord, kind: AttributeKind, vocab: &[String]) -> Result<usize> {
    if rec.is_bonafide() {
        return Ok(0);
    }
    let label = rec.attribute(kind).ok_or_else(|| {
        Error::Data(format!("spoof utterance `{}` has no `{kind}` label", rec.utt_id))
    })?;
    vocab
        .iter()
        .position(|v| v == label)
        .map(|p| p + 1)
        .ok_or_else(|| Error::Vocabulary {
            kind: kind.to_string(),
            label: label.to_owned(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attacks() -> Vec<String> {
        (1..=6).map(|i| format!("A{i:02}")).collect()
    }

    #[test]
    fn attack_one_hot() {
        let b = UtteranceRecord::bonafide("u", "s");
        assert_eq!(
            encode_attribute(&b, AttributeKind::Attack, &attacks()).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        let s = UtteranceRecord::spoof("v", "s", "A03");
        let v = encode_attribute(&s, AttributeKind::Attack, &attacks()).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);
        assert_eq!(v[3], 1.0);
    }

    #[test]
    fn synthesizer_vocab_of_eleven_gives_twelve_dims() {
        let vocab: Vec<String> = (0..11).map(|i| format!("syn{i}")).collect();
        let mut s = UtteranceRecord::spoof("v", "s", "A01");
        s.synthesizer = Some("syn10".into());
        let v = encode_attribute(&s, AttributeKind::Synthesizer, &vocab).unwrap();
        assert_eq!(v.len(), 12);
        assert_eq!(v[11], 1.0);
    }

    #[test]
    fn unknown_label_is_vocabulary_error() {
        let s = UtteranceRecord::spoof("v", "s", "A99");
        assert!(matches!(
            encode_attribute(&s, AttributeKind::Attack, &attacks()),
            Err(Error::Vocabulary { .. })
        ));
    }

    #[test]
    fn tsv_round_trip_and_validation() {
        let mut meta = Metadata::default();
        meta.vocab.insert(AttributeKind::Attack, attacks());
        meta.vocab.insert(AttributeKind::Vocoder, vec!["voc1".into(), "voc2".into()]);
        meta.records.push(UtteranceRecord::bonafide("u1", "s1"));
        let mut sp = UtteranceRecord::spoof("u2", "s1", "A02");
        sp.vocoder = Some("voc2".into());
        meta.records.push(sp);
        let text = meta.to_tsv();
        assert_eq!(Metadata::parse(&text, Path::new("m")).unwrap(), meta);

        let bad = text.replace("voc2\t-", "voc9\t-");
        assert!(Metadata::parse(&bad, Path::new("m")).is_err());
        let bad = text.replace("bonafide\t-", "bonafide\tA01");
        assert!(Metadata::parse(&bad, Path::new("m")).is_err());
        let msg = Metadata::parse("u1\ts1\tbonafide\n", Path::new("m")).unwrap_err().to_string();
        assert!(msg.contains("line 1"), "{msg}");
    }
}
