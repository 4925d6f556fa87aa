//! Experiment configuration and the end-to-end pipeline used by the
//! command-line driver.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::batching::{Dataset, RegTarget, TargetSources, TargetSpec};
use crate::data::embeddings::{read_embeddings, EmbeddingStore};
use crate::data::metadata::{read_metadata, AttributeKind, Metadata};
use crate::data::synth::{synth_generate, SynthConfig};
use crate::data::trials::{generate_trials, holdout_split, read_trials, TrialOptions, TrialPair};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::scoring::{evaluate, labels_of, posteriors, EvalReport, ScoringConfig};
use crate::seed::derive_seed;
use crate::sweep::{alpha_sweep, parse_grid, SweepParam, SweepRow, SweepTable};
use crate::trainer::{adapt, train, AdaptConfig, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic data, used when no embedding files are given.
    pub synth: Option<SynthConfig>,
    pub asv: Option<PathBuf>,
    pub cm: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    /// Pre-made training trials; generated from the metadata otherwise.
    pub train_trials: Option<PathBuf>,
    /// Share of each speaker's utterances held out for evaluation trials.
    pub holdout_fraction: f64,
    pub trials: TrialOptions,
    pub reg_target: RegTarget,
    pub attr_kind: AttributeKind,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            synth: None,
            asv: None,
            cm: None,
            metadata: None,
            train_trials: None,
            holdout_fraction: 0.5,
            trials: TrialOptions::default(),
            reg_target: RegTarget::Spoof,
            attr_kind: AttributeKind::Attack,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluation trials; the held-out split is used otherwise.
    pub trials: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub grid: String,
    /// Variants to retrain per grid point; defaults to the model variant.
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every derived seed.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: Option<AdaptConfig>,
    pub scoring: ScoringConfig,
    pub eval: EvalSection,
    pub sweep: Option<SweepSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adapt: None,
            scoring: ScoringConfig::default(),
            eval: EvalSection::default(),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }

    /// Overwrites every section seed with one derived from the root seed.
    pub fn derive_seeds(&mut self) {
        self.model.seed = derive_seed(self.seed, "model");
        self.train.seed = derive_seed(self.seed, "train");
        self.data.trials.seed = derive_seed(self.seed, "trials");
        if let Some(s) = &mut self.data.synth {
            s.seed = derive_seed(self.seed, "synth");
        }
    }

    /// Relative paths are taken relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.data.asv);
        fix(&mut self.data.cm);
        fix(&mut self.data.metadata);
        fix(&mut self.data.train_trials);
        fix(&mut self.eval.trials);
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scoring.validate()?;
        if let Some(s) = &self.data.synth {
            s.validate()?;
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        if let Some(a) = &self.adapt {
            a.group_set()?;
        }
        if let Some(s) = &self.sweep {
            parse_grid(&s.grid)?;
        }
        Ok(())
    }

    pub fn target_spec(&self) -> TargetSpec {
        let v = self.model.variant;
        TargetSpec {
            reg: v.has_regression().then_some(self.data.reg_target),
            attr: v.has_attribute().then_some(self.data.attr_kind),
        }
    }
}

/// Loaded or generated data for one experiment.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub asv: EmbeddingStore,
    pub cm: Option<EmbeddingStore>,
    pub meta: Option<Metadata>,
    pub train_trials: Vec<TrialPair>,
    pub eval_trials: Vec<TrialPair>,
    /// Files read, for the manifest.
    pub inputs: Vec<PathBuf>,
}

pub fn load_workspace(cfg: &ExperimentConfig) -> Result<Workspace> {
    let d = &cfg.data;
    let mut inputs = Vec::new();
    let (asv, cm, meta) = match (&d.asv, &d.synth) {
        (Some(asv_path), _) => {
            let asv = read_embeddings(asv_path)?;
            inputs.push(asv_path.clone());
            let cm = match &d.cm {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(read_embeddings(p)?)
                }
                None => None,
            };
            let meta = match &d.metadata {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(read_metadata(p)?)
                }
                None => None,
            };
            (asv, cm, meta)
        }
        (None, Some(s)) => {
            let g = synth_generate(s)?;
            (g.asv, Some(g.cm), Some(g.meta))
        }
        (None, None) => {
            return Err(Error::Config("data section needs either `asv` (with `cm`, `metadata`) or `synth`".into()))
        }
    };
    let generated = match (&meta, d.train_trials.is_none() || cfg.eval.trials.is_none()) {
        (Some(m), true) => Some(split_trials(m, d.holdout_fraction, &d.trials)?),
        _ => None,
    };
    let (gen_train, gen_eval) = generated.unzip();
    let train_trials = match (&d.train_trials, gen_train) {
        (Some(p), _) => {
            inputs.push(p.clone());
            read_trials(p)?
        }
        (None, Some(t)) => t,
        (None, None) => return Err(Error::Config("need `train_trials` or `metadata` to build training trials".into())),
    };
    let eval_trials = match &cfg.eval.trials {
        Some(p) => {
            inputs.push(p.clone());
            read_trials(p)?
        }
        None => gen_eval.unwrap_or_default(),
    };
    Ok(Workspace {
        asv,
        cm,
        meta,
        train_trials,
        eval_trials,
        inputs,
    })
}

/// Training and held-out evaluation trials from one metadata table. The
/// held-out trials use a seed derived from the training one.
pub fn split_trials(meta: &Metadata, fraction: f64, opts: &TrialOptions) -> Result<(Vec<TrialPair>, Vec<TrialPair>)> {
    let (train_recs, eval_recs) = holdout_split(&meta.records, fraction)?;
    let train = generate_trials(&train_recs, opts)?;
    let eval = if eval_recs.is_empty() {
        Vec::new()
    } else {
        let eval_opts = TrialOptions {
            seed: derive_seed(opts.seed, "eval"),
            ..*opts
        };
        generate_trials(&eval_recs, &eval_opts)?
    };
    Ok((train, eval))
}

impl Workspace {
    fn sources(&self, spec: TargetSpec) -> Result<Option<TargetSources<'_>>> {
        if spec.reg.is_none() && spec.attr.is_none() {
            return Ok(None);
        }
        let meta = self
            .meta
            .as_ref()
            .ok_or_else(|| Error::Config("multi-task variants need `metadata`".into()))?;
        let cm = self
            .cm
            .as_ref()
            .ok_or_else(|| Error::Config("multi-task variants need spoof embeddings (`cm`)".into()))?;
        Ok(Some(TargetSources { meta, cm, spec }))
    }

    pub fn train_set(&self, spec: TargetSpec) -> Result<Dataset<'_>> {
        Dataset::new(&self.train_trials, &self.asv, self.sources(spec)?)
    }

    /// Training trials whose enrollment speaker has spoofed speech.
    pub fn spoof_domain_set(&self, spec: TargetSpec) -> Result<Dataset<'_>> {
        let full = self.train_set(spec)?;
        let Some(meta) = &self.meta else {
            return Ok(full);
        };
        let spoofed: BTreeSet<&str> = meta
            .records
            .iter()
            .filter(|r| !r.is_bonafide())
            .map(|r| r.speaker_id.as_str())
            .collect();
        Ok(full.filter(|t| meta.find(&t.enroll_id).is_some_and(|r| spoofed.contains(r.speaker_id.as_str()))))
    }

    pub fn eval_set(&self) -> Result<Dataset<'_>> {
        if self.eval_trials.is_empty() {
            return Err(Error::Config("no evaluation trials (set eval.trials or a holdout fraction)".into()));
        }
        Dataset::new(&self.eval_trials, &self.asv, None)
    }
}

/// Fills data-dependent model dimensions.
pub fn resolve_model(cfg: &mut ExperimentConfig, ws: &Workspace) -> Result<()> {
    let m = &mut cfg.model;
    m.input_dim = 2 * ws.asv.dim();
    m.reg_target_dim = None;
    m.attr_classes = None;
    if m.variant.has_regression() {
        let cm = ws.cm.as_ref().ok_or_else(|| Error::Config("regression variants need `cm` embeddings".into()))?;
        let extra = match cfg.data.reg_target {
            RegTarget::Spoof => 0,
            RegTarget::SpoofWithAttack => {
                let meta = ws.meta.as_ref().ok_or_else(|| Error::Config("attack targets need metadata".into()))?;
                meta.vocab(AttributeKind::Attack)?.len() + 1
            }
        };
        m.reg_target_dim = Some(cm.dim() + extra);
    }
    if m.variant.has_attribute() {
        let meta = ws.meta.as_ref().ok_or_else(|| Error::Config("attribute variants need metadata".into()))?;
        m.attr_classes = Some(meta.vocab(cfg.data.attr_kind)?.len() + 1);
    }
    m.validate()
}

pub fn run_train(cfg: &ExperimentConfig, ws: &Workspace) -> Result<(Model, TrainLog)> {
    let data = ws.train_set(cfg.target_spec())?;
    let mut model = Model::new(cfg.model.clone())?;
    let log = train(&mut model, &data, &cfg.train)?;
    Ok((model, log))
}

pub fn run_adapt(cfg: &ExperimentConfig, ws: &Workspace, model: &mut Model, adapt_cfg: &AdaptConfig) -> Result<TrainLog> {
    let spec = TargetSpec {
        reg: model.variant().has_regression().then_some(cfg.data.reg_target),
        attr: model.variant().has_attribute().then_some(cfg.data.attr_kind),
    };
    let data = ws.spoof_domain_set(spec)?;
    adapt(model, &data, adapt_cfg, &cfg.train)
}

pub fn run_eval(cfg: &ExperimentConfig, ws: &Workspace, model: &Model) -> Result<(EvalReport, Vec<f64>)> {
    let data = ws.eval_set()?;
    evaluate(model, &data, &cfg.scoring)
}

/// Runs the configured sweep. α sweeps rescore `model` (trained first if
/// absent); other parameters retrain one model per (variant, grid value),
/// each from the same seeds.
pub fn run_sweep(cfg: &ExperimentConfig, ws: &Workspace, model: Option<&Model>) -> Result<SweepTable> {
    let section = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("no sweep section / --grid given".into()))?;
    let grid = parse_grid(&section.grid)?;
    let variants = if section.variants.is_empty() {
        vec![cfg.model.variant]
    } else {
        section.variants.clone()
    };
    for v in &variants {
        grid.check_variant(*v)?;
    }
    let eval = ws.eval_set()?;
    let labels = labels_of(eval.trials());
    if grid.param == SweepParam::Alpha {
        let trained;
        let m = match model {
            Some(m) => m,
            None => {
                trained = run_train(cfg, ws)?.0;
                &trained
            }
        };
        let post = posteriors(m, &eval)?;
        return alpha_sweep(&grid, m.variant(), m.config().attr_classes, &post, &labels, &cfg.scoring);
    }
    let points: Vec<(Variant, crate::sweep::GridValue)> = variants
        .iter()
        .flat_map(|v| grid.values.iter().map(move |g| (*v, *g)))
        .collect();
    let rows = points
        .par_iter()
        .map(|(variant, value)| {
            let mut c = cfg.clone();
            c.model.variant = *variant;
            match grid.param {
                SweepParam::Lambda => c.train.loss_weights.lambda = value.real(),
                SweepParam::Gamma => c.train.loss_weights.gamma = value.real(),
                SweepParam::Epsilon => c.train.smoothing_epsilon = value.real(),
                SweepParam::AttrKind => c.data.attr_kind = value.kind(),
                SweepParam::Alpha => unreachable!(),
            }
            resolve_model(&mut c, ws)?;
            let (m, _) = run_train(&c, ws)?;
            let (report, _) = evaluate(&m, &eval, &c.scoring)?;
            Ok(SweepRow {
                variant: *variant,
                value: *value,
                attr_dim: m.config().attr_classes,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { param: grid.param, rows })
}

/// Runs `f` on a pool of `threads` workers (0 = all cores).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// What was run, on which inputs, producing which outputs. Together with
/// the resolved configuration it embeds, this is enough to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(command: Vec<String>, seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            tool: "gsasv".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.outputs.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            seed: 3,
            data: DataSection {
                synth: Some(SynthConfig {
                    asv_dim: 8,
                    cm_dim: 6,
                    ..SynthConfig::preset("tiny").unwrap()
                }),
                ..DataSection::default()
            },
            model: ModelConfig {
                hidden_dims: vec![8, 8],
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        };
        c.derive_seeds();
        c
    }

    #[test]
    fn config_rejects_unknown_keys_and_round_trips() {
        let p = Path::new("x.json");
        assert!(matches!(ExperimentConfig::from_json(r#"{"sed": 1}"#, p), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_json(r#"{"model": {"widht": 3}}"#, p).is_err());
        let c = tiny();
        let back = ExperimentConfig::from_json(&c.to_json(), p).unwrap();
        assert_eq!(back, c);
        let d = ExperimentConfig::from_json("{}", p).unwrap();
        assert_eq!(d.scoring.alpha, 0.95);
        assert_eq!(d.train.batch_size, 128);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let run = || {
            let mut c = tiny();
            c.model.variant = Variant::SpsAttr;
            let ws = load_workspace(&c).unwrap();
            resolve_model(&mut c, &ws).unwrap();
            let (m, log) = run_train(&c, &ws).unwrap();
            let (r, s) = run_eval(&c, &ws, &m).unwrap();
            (crate::checkpoint::encode(&m), log, r, s)
        };
        let a = run();
        let b = with_threads(3, run).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resolve_fills_dimensions() {
        let mut c = tiny();
        c.model.variant = Variant::HpsAttr;
        c.data.attr_kind = AttributeKind::Synthesizer;
        let ws = load_workspace(&c).unwrap();
        resolve_model(&mut c, &ws).unwrap();
        assert_eq!(c.model.input_dim, 16);
        assert_eq!(c.model.reg_target_dim, Some(6));
        assert_eq!(c.model.attr_classes, Some(12));
        c.data.reg_target = RegTarget::SpoofWithAttack;
        resolve_model(&mut c, &ws).unwrap();
        assert_eq!(c.model.reg_target_dim, Some(6 + 4));
    }

    #[test]
    fn spoof_domain_subset_excludes_bonafide_only_speakers() {
        let mut c = tiny();
        c.data.synth.as_mut().unwrap().supplement_speakers = 2;
        let ws = load_workspace(&c).unwrap();
        let all = ws.train_set(TargetSpec::default()).unwrap();
        let sub = ws.spoof_domain_set(TargetSpec::default()).unwrap();
        assert!(sub.len() < all.len());
        assert!(sub.trials().iter().all(|t| t.enroll_id.starts_with("spk")));
        assert!(all.trials().iter().any(|t| t.enroll_id.starts_with("sup")));
    }

    #[test]
    fn sweeps_have_one_row_per_point() {
        let mut c = tiny();
        c.model.variant = Variant::SpsAttr;
        let ws = load_workspace(&c).unwrap();
        resolve_model(&mut c, &ws).unwrap();
        c.sweep = Some(SweepSection {
            grid: "epsilon=0,0.5,1".into(),
            variants: vec![Variant::SpsAttr, Variant::HpsAttr],
        });
        let t = run_sweep(&c, &ws, None).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert_eq!(t, run_sweep(&c, &ws, None).unwrap());
        c.sweep = Some(SweepSection {
            grid: "gamma=0.5".into(),
            variants: vec![Variant::Sps],
        });
        assert!(matches!(run_sweep(&c, &ws, None), Err(Error::Config(_))));
    }
}
