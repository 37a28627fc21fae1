//! Run configuration: one JSON file, then flag overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sepeff::data::{encode_strategy_centered, ingest_csv, read_treatment_centered_csv};
use sepeff::estimators::sha256_hex;
use sepeff::sim::{correct_specs, long_follow_up_dgp, long_follow_up_specs, misspecified_specs, two_period_dgp};
use sepeff::{ArmPair, DgpSpec, EffectKind, Error, EstimatorKind, ModelSpec, Result, Scenario, Schema, TrialDataset};

/// Either an inline value or a string naming a builtin or a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Inline(T),
    Named(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Columns z and r: assignment and adherence.
    #[default]
    Strategy,
    /// Column a: the treatment actually taken.
    Treatment,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub format: Encoding,
    pub schema: Option<Source<Schema>>,
    pub specs: Option<Source<Vec<ModelSpec>>>,
    /// `all` or pairs such as `1,0`.
    pub arms: Option<Vec<String>>,
    pub estimators: Option<Vec<EstimatorKind>>,
    pub effect: Option<EffectKind>,
    pub draws: Option<usize>,
    pub level: Option<f64>,
    pub dgp: Option<Source<DgpSpec>>,
    pub n: Option<usize>,
    pub four_arm: bool,
    pub replications: Option<usize>,
    pub scenario: Option<Source<Scenario>>,
    pub seed: Option<u64>,
    /// Output directory, or the primary artifact's path. Not part of the
    /// fingerprint, so the same run in two places compares equal.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    /// Directory that relative paths in the file are read against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig { base: PathBuf::from("."), ..Default::default() });
        };
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        // Flag values are relative to the working directory, file values to
        // the file; resolve the file's now.
        cfg.data = cfg.data.map(|p| cfg.base.join(p));
        cfg.out = cfg.out.map(|p| cfg.base.join(p));
        Ok(cfg)
    }

    /// Hex digest of the effective configuration.
    pub fn fingerprint(&self, command: &str) -> String {
        let body = serde_json::to_vec(&(command, self)).expect("config serializes");
        sha256_hex(&body)[..16].to_string()
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let path = self.base.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    /// A JSON file holding either `T` itself or an artifact with `T` under `key`.
    fn read_wrapped<T: DeserializeOwned>(&self, name: &str, key: &str) -> Result<T> {
        let v: serde_json::Value = self.read_json(name)?;
        let v = v.get(key).cloned().unwrap_or(v);
        serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: {}", name, e)))
    }

    pub fn dgp(&self) -> Result<DgpSpec> {
        match &self.dgp {
            None => Err(Error::Config("no data-generating process given (--dgp)".into())),
            Some(Source::Inline(d)) => Ok(d.clone()),
            Some(Source::Named(s)) => match s.as_str() {
                "two_period" => Ok(two_period_dgp()),
                "long_follow_up" => Ok(long_follow_up_dgp()),
                path => self.read_wrapped(path, "dgp"),
            },
        }
    }

    pub fn specs(&self) -> Result<Vec<ModelSpec>> {
        match &self.specs {
            None => Ok(correct_specs()),
            Some(Source::Inline(v)) => Ok(v.clone()),
            Some(Source::Named(s)) => match s.as_str() {
                "saturated" => Ok(correct_specs()),
                "misspecified" => Ok(misspecified_specs(&correct_specs())),
                "long_follow_up" => Ok(long_follow_up_specs()),
                path => self.read_json(path),
            },
        }
    }

    pub fn schema(&self) -> Result<Schema> {
        match &self.schema {
            Some(Source::Inline(s)) => Ok(s.clone()),
            Some(Source::Named(p)) => {
                // Either a bare schema or an artifact holding one.
                let v: serde_json::Value = self.read_json(p)?;
                match v.get("dgp") {
                    Some(d) => Ok(serde_json::from_value::<DgpSpec>(d.clone()).map_err(|e| Error::Config(format!("{}: {}", p, e)))?.schema),
                    None => self.read_wrapped(p, "schema"),
                }
            }
            None if self.dgp.is_some() => Ok(self.dgp()?.schema),
            None => Err(Error::Config("no schema given (--schema)".into())),
        }
    }

    pub fn arms(&self) -> Result<Vec<ArmPair>> {
        match &self.arms {
            None => Ok(ArmPair::all().to_vec()),
            Some(v) => {
                let mut out = Vec::new();
                for s in v {
                    if s == "all" {
                        out.extend(ArmPair::all());
                    } else {
                        out.push(parse_arm(s)?);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn estimators(&self, default: &[EstimatorKind]) -> Vec<EstimatorKind> {
        self.estimators.clone().unwrap_or_else(|| default.to_vec())
    }

    pub fn data(&self) -> Result<TrialDataset> {
        let path = self.data.as_ref().ok_or_else(|| Error::Config("no data file given (--data)".into()))?;
        let schema = self.schema()?;
        let ds = match self.format {
            Encoding::Strategy => ingest_csv(path, &schema)?,
            Encoding::Treatment => {
                let (h, recs) = read_treatment_centered_csv(std::fs::File::open(path)?, &schema)?;
                encode_strategy_centered(&recs, &schema, h)?
            }
        };
        if ds.is_empty() {
            return Err(Error::Input(vec![format!("{} holds no individuals", path.display())]));
        }
        Ok(ds)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let mut sc = match &self.scenario {
            Some(Source::Inline(s)) => s.clone(),
            Some(Source::Named(p)) => self.read_json(p)?,
            None => Scenario {
                dgp: self.dgp()?,
                specs: self.specs()?,
                estimators: self.estimators(&[EstimatorKind::PlugIn, EstimatorKind::WeightedY, EstimatorKind::OneStep]),
                n: self.n.unwrap_or(1000),
                replications: 200,
                bootstraps: 200,
                level: 0.95,
                seed: 0,
                arms: self.arms()?,
            },
        };
        if let Some(r) = self.replications {
            sc.replications = r;
        }
        if let Some(d) = self.draws {
            sc.bootstraps = d;
        }
        if let Some(l) = self.level {
            sc.level = l;
        }
        if let Some(s) = self.seed {
            sc.seed = s;
        }
        if self.scenario.is_some() {
            if let Some(n) = self.n {
                sc.n = n;
            }
        }
        Ok(sc)
    }
}

pub fn parse_arm(s: &str) -> Result<ArmPair> {
    let digits: Vec<u8> = s.chars().filter(|c| c.is_ascii_digit()).map(|c| c as u8 - b'0').collect();
    match digits.as_slice() {
        [y, d] if *y <= 1 && *d <= 1 => Ok(ArmPair::new(*y, *d)),
        _ => Err(Error::Config(format!("arm `{}` is not a pair of 0/1 values", s))),
    }
}

/// `zy:1` is the Z_Y effect at z_D = 1, `zd:0` the Z_D effect at z_Y = 0.
pub fn parse_effect(s: &str) -> Result<EffectKind> {
    let bad = || Error::Config(format!("effect `{}` is not zy:<0|1> or zd:<0|1>", s));
    let (which, at) = s.split_once(':').ok_or_else(bad)?;
    let at: u8 = match at {
        "0" => 0,
        "1" => 1,
        _ => return Err(bad()),
    };
    match which.to_ascii_lowercase().as_str() {
        "zy" | "z_y" => Ok(EffectKind::ZY { z_d: at }),
        "zd" | "z_d" => Ok(EffectKind::ZD { z_y: at }),
        _ => Err(bad()),
    }
}
