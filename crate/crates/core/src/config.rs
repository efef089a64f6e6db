//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::backbones::BackboneScale;
use crate::error::{Error, Result};
use crate::model::{Variant, VariantConfig};
use crate::optim::DEFAULT_LR_MAX;
use crate::supervision::{SigmaSchedule, DEFAULT_PAF_WIDTH};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub lr_max: f64,
    pub sigma: SigmaSchedule,
    pub paf_width: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
}

impl TrainSettings {
    pub fn for_variant(v: Option<Variant>) -> Self {
        Self {
            lr_max: DEFAULT_LR_MAX,
            sigma: SigmaSchedule::default(),
            paf_width: DEFAULT_PAF_WIDTH,
            batch_size: v.map(Variant::batch_size).unwrap_or(20),
            epochs: 200,
            seed: 0,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: VariantConfig,
    pub train: TrainSettings,
}

pub const KEYS: [&str; 19] = [
    "name",
    "high_res",
    "high_backbone",
    "low_backbone",
    "passes",
    "skeleton",
    "upscaling",
    "limbs",
    "keypoints",
    "backbone_se_ratio",
    "detection_se_ratio",
    "dropout",
    "lr_max",
    "sigma_schedule",
    "paf_width",
    "batch_size",
    "epochs",
    "seed",
    "augment",
];

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        source_name: "config".into(),
        line,
        msg: msg.into(),
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

pub fn parse_limbs(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (a, b) = pair
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("limb '{pair}' is not of the form a-b")))?;
            let n = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("limb '{pair}' has a non-integer end")))
            };
            Ok((n(a)?, n(b)?))
        })
        .collect()
}

pub fn parse_sigma_schedule(v: &str) -> Result<SigmaSchedule> {
    let steps = v
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|step| {
            let (e, s) = step
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("sigma step '{step}' is not epoch:sigma")))?;
            let f = |t: &str| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("sigma step '{step}' is not numeric")))
            };
            Ok((f(e)?, f(s)?))
        })
        .collect::<Result<Vec<_>>>()?;
    SigmaSchedule::new(steps).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    pub fn named(v: Variant) -> Self {
        Self {
            variant: VariantConfig::named(v),
            train: TrainSettings::for_variant(Some(v)),
        }
    }

    /// Parse config text. A `name` matching a variant starts from that
    /// variant's defaults; any other name starts from RT's.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| cfg_err(line, format!("expected key=value, got '{body}'")))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(cfg_err(line, format!("unknown key '{k}'")));
            }
            if kv.insert(k, (line, v.trim())).is_some() {
                return Err(cfg_err(line, format!("duplicate key '{k}'")));
            }
        }
        let named = kv.get("name").and_then(|(_, v)| v.parse::<Variant>().ok());
        let mut cfg = Self::named(named.unwrap_or(Variant::RT));
        if let Some((_, v)) = kv.get("name") {
            cfg.variant.name = v.to_string();
        }
        for (&k, &(line, v)) in &kv {
            let wrap = |e: Error| cfg_err(line, format!("{k}: {e}"));
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| cfg_err(line, format!("{k}: '{v}' is not a number")))
            };
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| cfg_err(line, format!("{k}: '{v}' is not an integer")))
            };
            let flag = |v: &str| {
                parse_bool(v).ok_or_else(|| cfg_err(line, format!("{k}: '{v}' is not a boolean")))
            };
            let var = &mut cfg.variant;
            let tr = &mut cfg.train;
            match k {
                "name" => {}
                "high_res" => var.high_res = int(v)?,
                "high_backbone" => var.high_backbone = v.parse::<BackboneScale>().map_err(wrap)?,
                "low_backbone" => {
                    var.low_backbone = match v.to_ascii_lowercase().as_str() {
                        "none" | "-" | "" => None,
                        _ => Some(v.parse::<BackboneScale>().map_err(wrap)?),
                    }
                }
                "passes" => var.keypoint_passes = int(v)?,
                "skeleton" => var.skeleton_pass = flag(v)?,
                "upscaling" => var.upscaling = flag(v)?,
                "limbs" => var.limbs = parse_limbs(v).map_err(wrap)?,
                "keypoints" => var.keypoints = int(v)?,
                "backbone_se_ratio" => var.backbone_se_ratio = num(v)?,
                "detection_se_ratio" => var.detection_se_ratio = num(v)?,
                "dropout" => var.dropout_rate = num(v)?,
                "lr_max" => tr.lr_max = num(v)?,
                "sigma_schedule" => tr.sigma = parse_sigma_schedule(v).map_err(wrap)?,
                "paf_width" => tr.paf_width = num(v)?,
                "batch_size" => tr.batch_size = int(v)?,
                "epochs" => tr.epochs = int(v)?,
                "seed" => {
                    tr.seed = v
                        .parse::<u64>()
                        .map_err(|_| cfg_err(line, format!("seed: '{v}'")))?
                }
                "augment" => tr.augment = flag(v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                source_name: path.display().to_string(),
                line,
                msg,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        let t = &self.train;
        if !(t.lr_max > 0.0) {
            return Err(Error::Config(format!(
                "lr_max must be positive, got {}",
                t.lr_max
            )));
        }
        if !(t.paf_width > 0.0) {
            return Err(Error::Config(format!(
                "paf_width must be positive, got {}",
                t.paf_width
            )));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        t.sigma.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Every key, resolved.
    pub fn to_text(&self) -> String {
        let v = &self.variant;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "name={}", v.name);
        let _ = writeln!(s, "high_res={}", v.high_res);
        let _ = writeln!(s, "high_backbone={}", v.high_backbone);
        let _ = writeln!(
            s,
            "low_backbone={}",
            v.low_backbone
                .map(|b| b.to_string())
                .unwrap_or_else(|| "none".into())
        );
        let _ = writeln!(s, "passes={}", v.keypoint_passes);
        let _ = writeln!(s, "skeleton={}", v.skeleton_pass);
        let _ = writeln!(s, "upscaling={}", v.upscaling);
        let limbs: Vec<String> = v.limbs.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        let _ = writeln!(s, "limbs={}", limbs.join(";"));
        let _ = writeln!(s, "keypoints={}", v.keypoints);
        let _ = writeln!(s, "backbone_se_ratio={}", v.backbone_se_ratio);
        let _ = writeln!(s, "detection_se_ratio={}", v.detection_se_ratio);
        let _ = writeln!(s, "dropout={}", v.dropout_rate);
        let _ = writeln!(s, "lr_max={}", t.lr_max);
        let steps: Vec<String> = t
            .sigma
            .steps
            .iter()
            .map(|(e, s)| format!("{e}:{s}"))
            .collect();
        let _ = writeln!(s, "sigma_schedule={}", steps.join(","));
        let _ = writeln!(s, "paf_width={}", t.paf_width);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "epochs={}", t.epochs);
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "augment={}", t.augment);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = RunConfig::named(Variant::II);
        c.variant.skeleton_pass = false;
        c.train.sigma = parse_sigma_schedule("0:5,10:2.5").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = RunConfig::parse("name=I\n\nbogus=1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn named_defaults() {
        let c = RunConfig::parse("name=IV").unwrap();
        assert_eq!(c.variant.high_res, 600);
        assert_eq!(c.train.batch_size, 5);
        let c = RunConfig::parse("name=tiny\nhigh_res=64\nlow_backbone=none").unwrap();
        assert_eq!(c.variant.name, "tiny");
        assert!(c.variant.low_backbone.is_none());
    }
}
