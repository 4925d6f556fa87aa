//! Parameter grids and result tables.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::metadata::AttributeKind;
use crate::data::trials::TrialLabel;
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::scoring::{llr_scores, report_from_scores, EvalReport, PosteriorTriple, ScoringConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Lambda,
    Gamma,
    Epsilon,
    AttrKind,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
            SweepParam::Epsilon => "epsilon",
            SweepParam::AttrKind => "attr_kind",
        }
    }

    /// Whether each grid point needs a freshly trained model.
    pub fn retrains(self) -> bool {
        self != SweepParam::Alpha
    }
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => SweepParam::Alpha,
            "lambda" => SweepParam::Lambda,
            "gamma" => SweepParam::Gamma,
            "epsilon" => SweepParam::Epsilon,
            "attr_kind" | "attr" => SweepParam::AttrKind,
            _ => {
                return Err(Error::Config(format!(
                    "unknown sweep parameter `{s}` (alpha, lambda, gamma, epsilon, attr_kind)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridValue {
    Real(f64),
    Kind(AttributeKind),
}

impl fmt::Display for GridValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridValue::Real(v) => write!(f, "{v}"),
            GridValue::Kind(k) => write!(f, "{k}"),
        }
    }
}

impl GridValue {
    pub fn real(self) -> f64 {
        match self {
            GridValue::Real(v) => v,
            GridValue::Kind(_) => unreachable!("numeric sweep holds real values"),
        }
    }

    pub fn kind(self) -> AttributeKind {
        match self {
            GridValue::Kind(k) => k,
            GridValue::Real(_) => unreachable!("attribute sweep holds kinds"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub param: SweepParam,
    pub values: Vec<GridValue>,
}

/// Rounds away binary noise accumulated by `start + i·step`.
fn tidy(v: f64) -> f64 {
    let r = (v * 1e12).round() / 1e12;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn parse_real(s: &str, spec: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("bad number `{s}` in grid `{spec}`")))
}

/// Parses `name=start:step:end` (inclusive), `name=v1,v2,...`, or for
/// attribute sweeps `attr_kind=attack,vocoder,...` (`attr_kind=all` for all four).
pub fn parse_grid(spec: &str) -> Result<Grid> {
    let (name, rest) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid `{spec}` must look like name=values")))?;
    let param: SweepParam = name.trim().parse()?;
    let rest = rest.trim();
    let values = if param == SweepParam::AttrKind {
        if rest == "all" {
            AttributeKind::ALL.iter().map(|k| GridValue::Kind(*k)).collect()
        } else {
            rest.split(',')
                .map(|s| s.trim().parse().map(GridValue::Kind))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Config(e.to_string()))?
        }
    } else if rest.contains(':') {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("range grid `{spec}` must be start:step:end")));
        }
        let (start, step, end) = (parse_real(parts[0], spec)?, parse_real(parts[1], spec)?, parse_real(parts[2], spec)?);
        if !(step > 0.0) || end < start {
            return Err(Error::Config(format!("range grid `{spec}` needs step > 0 and end ≥ start")));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| GridValue::Real(tidy(start + i as f64 * step))).collect()
    } else {
        rest.split(',').map(|s| parse_real(s, spec).map(GridValue::Real)).collect::<Result<_>>()?
    };
    if values.is_empty() {
        return Err(Error::Config(format!("grid `{spec}` is empty")));
    }
    let grid = Grid { param, values };
    grid.validate()?;
    Ok(grid)
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if self.param == SweepParam::AttrKind {
            return Ok(());
        }
        for v in &self.values {
            let x = v.real();
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Config(format!(
                    "{}={x} outside [0, 1]",
                    self.param.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Rejects variants the parameter has no effect on.
    pub fn check_variant(&self, v: Variant) -> Result<()> {
        let ok = match self.param {
            SweepParam::Alpha => true,
            SweepParam::Lambda => v.has_regression(),
            SweepParam::Gamma | SweepParam::Epsilon | SweepParam::AttrKind => v.has_attribute(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "sweeping {} has no effect on a {v} model",
                self.param.as_str()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: Variant,
    pub value: GridValue,
    pub attr_dim: Option<usize>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

pub const TABLE_COLUMNS: [&str; 3] = ["eer_joint", "eer_bonafide", "eer_spoof"];

impl SweepTable {
    pub fn header(&self) -> String {
        format!(
            "variant\t{}\tattr_dim\t{}",
            self.param.as_str(),
            TABLE_COLUMNS.join("\t")
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        let eer = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.variant,
                r.value,
                r.attr_dim.map_or("-".to_string(), |d| d.to_string()),
                eer(r.report.eer_joint),
                eer(r.report.eer_bonafide),
                eer(r.report.eer_spoof)
            )
            .unwrap();
        }
        s
    }
}

/// Rescoring sweep over α: one set of posteriors, one row per grid value.
pub fn alpha_sweep(
    grid: &Grid,
    variant: Variant,
    attr_dim: Option<usize>,
    post: &[PosteriorTriple],
    labels: &[TrialLabel],
    base: &ScoringConfig,
) -> Result<SweepTable> {
    if grid.param != SweepParam::Alpha {
        return Err(Error::Config("alpha_sweep needs an alpha grid".into()));
    }
    let rows = grid
        .values
        .iter()
        .map(|v| {
            let cfg = ScoringConfig { alpha: v.real(), ..*base };
            let scores = llr_scores(post, &cfg);
            Ok(SweepRow {
                variant,
                value: *v,
                attr_dim,
                report: report_from_scores(&scores, labels, cfg.alpha)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        param: SweepParam::Alpha,
        rows,
    })
}
