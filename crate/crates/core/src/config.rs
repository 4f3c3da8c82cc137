//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{EvalProtocol, Negatives, TieRule};
use crate::train::TrainConfig;

pub const RESOLVED_FILE: &str = "config.resolved";

/// Split `key = value` lines, dropping blank lines and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(idx + 1, format!("expected `key = value`, got `{line}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(idx + 1, "empty key"));
        }
        out.push((idx + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub protocol: EvalProtocol,
    pub data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            protocol: EvalProtocol::default(),
            data: None,
        }
    }
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{v}` for `{key}`"))),
    }
}

pub fn parse_cutoffs(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|c| c.trim().parse().map_err(|_| Error::Config(format!("bad cutoff `{c}`"))))
        .collect()
}

impl RunConfig {
    /// Apply one setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            return Ok(());
        }
        let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
        let p = &mut self.protocol;
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "negatives" => {
                p.negatives = if value == "full" {
                    Negatives::FullCatalog
                } else {
                    Negatives::Sampled(value.parse().map_err(|_| bad())?)
                }
            }
            "cutoffs" => p.cutoffs = parse_cutoffs(value)?,
            "eval_seed" => p.seed = value.parse().map_err(|_| bad())?,
            "tie_rule" => {
                p.tie_rule = match value {
                    "pessimistic" => TieRule::Pessimistic,
                    "expected" => TieRule::Expected,
                    _ => return Err(bad()),
                }
            }
            "max_history" => p.max_history = value.parse().map_err(|_| bad())?,
            "include_valid" => p.include_valid = bool_value(key, value)?,
            "eval_batch_size" => p.batch_size = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, k, v) in parse_pairs(text)? {
            cfg.set(&k, &v).map_err(|e| Error::parse(line, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.protocol.validate()
    }

    /// Every setting, one per line; reading it back reproduces this config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(d) = &self.data {
            s.push_str(&format!("data = {}\n", d.display()));
        }
        for (k, v) in self.train.to_pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        let p = &self.protocol;
        let neg = match p.negatives {
            Negatives::Sampled(n) => n.to_string(),
            Negatives::FullCatalog => "full".into(),
        };
        let cutoffs: Vec<String> = p.cutoffs.iter().map(usize::to_string).collect();
        s.push_str(&format!("negatives = {neg}\n"));
        s.push_str(&format!("cutoffs = {}\n", cutoffs.join(",")));
        s.push_str(&format!("eval_seed = {}\n", p.seed));
        s.push_str(&format!("tie_rule = {}\n", p.tie_rule.name()));
        s.push_str(&format!("max_history = {}\n", p.max_history));
        s.push_str(&format!("include_valid = {}\n", p.include_valid));
        s.push_str(&format!("eval_batch_size = {}\n", p.batch_size));
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;

    #[test]
    fn parse_with_comments() {
        let cfg = RunConfig::from_text("# run\nvariant = ivaec  # ablation\nlambda=5\n\ncutoffs = 1, 5\n").unwrap();
        assert_eq!(cfg.train.variant, Variant::Ivaec);
        assert_eq!(cfg.train.lambda, 5.0);
        assert_eq!(cfg.protocol.cutoffs, vec![1, 5]);
    }

    #[test]
    fn unknown_key_names_line() {
        match RunConfig::from_text("d = 8\nlearning_rat = 0.1\n") {
            Err(Error::Parse { line: 2, message }) => assert!(message.contains("learning_rat")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RunConfig::from_text("just words\n").is_err());
    }

    #[test]
    fn resolved_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("negatives", "full").unwrap();
        cfg.set("tie_rule", "expected").unwrap();
        cfg.set("data", "runs/split.txt").unwrap();
        cfg.set("L", "7").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
}
