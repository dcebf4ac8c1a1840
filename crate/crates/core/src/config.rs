//! Run configuration: energy weights, schedule and paths as `key = value`
//! lines.

use std::path::{Path, PathBuf};

use crate::energy::{key_values, EnergyParams, Preset, PARAM_KEYS};
use crate::error::{Error, Result};
use crate::hierarchy::Schedule;

const SCHEDULE_KEYS: [&str; 11] = [
    "levels",
    "gn_iters",
    "pcg_iters",
    "patch_iters",
    "grid_step",
    "subdomain_px",
    "ring_px",
    "lm_boost",
    "single_level",
    "occlusion",
    "illumination",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Preset the weights started from, if any.
    pub preset: Option<Preset>,
    pub params: EnergyParams,
    pub schedule: Schedule,
    pub inputs: Vec<PathBuf>,
    pub calib: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            preset: Some(Preset::Live),
            params: EnergyParams::preset(Preset::Live),
            schedule: Schedule::default(),
            inputs: Vec::new(),
            calib: None,
            out_dir: None,
        }
    }
}

impl Config {
    /// Parses a config document on top of the defaults. A `preset` line is
    /// applied before any explicit weight, wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let pairs = key_values(text)?;
        let mut seen = std::collections::HashSet::new();
        for (lineno, key, _) in &pairs {
            if !seen.insert(*key) {
                return Err(Error::Config(format!("line {lineno}: duplicate key `{key}`")));
            }
        }
        if let Some((_, _, value)) = pairs.iter().find(|(_, k, _)| *k == "preset") {
            cfg.set_preset(value.parse()?);
        }
        for (lineno, key, value) in pairs {
            if key == "preset" {
                continue;
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {lineno}: {msg}")),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn set_preset(&mut self, preset: Preset) {
        self.preset = Some(preset);
        self.params = EnergyParams::preset(preset);
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a number")))
        };
        let count = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a non-negative integer")))
        };
        let flag = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("`{key}`: `{v}` is not a boolean"))),
            }
        };
        let s = &mut self.schedule;
        match key {
            "preset" => self.set_preset(value.parse()?),
            k if PARAM_KEYS.contains(&k) => {
                self.params.set(k, num(value)?)?;
            }
            "levels" => s.levels = count(value)?,
            "gn_iters" => s.gn_iters = parse_list(value).map_err(|m| Error::Config(format!("`gn_iters`: {m}")))?,
            "pcg_iters" => s.pcg_iters = count(value)?,
            "patch_iters" => s.patch_iters = count(value)?,
            "grid_step" => s.grid_step = count(value)?,
            "subdomain_px" => s.subdomain_px = count(value)?,
            "ring_px" => s.ring_px = count(value)?,
            "lm_boost" => s.lm_boost = num(value)?,
            "single_level" => s.single_level = flag(value)?,
            "occlusion" => s.occlusion = flag(value)?,
            "illumination" => s.illumination = flag(value)?,
            "inputs" => {
                self.inputs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "calib" => self.calib = non_empty_path(value),
            "out_dir" => self.out_dir = non_empty_path(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.schedule.validate()
    }

    /// Serializes every setting; `parse` restores an equal config.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        if let Some(p) = self.preset {
            out += &format!("preset = {p}\n");
        }
        out += &self.params.to_config_string();
        let s = &self.schedule;
        let list = s.gn_iters.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        out += &format!(
            "levels = {}\ngn_iters = {list}\npcg_iters = {}\npatch_iters = {}\ngrid_step = {}\n\
             subdomain_px = {}\nring_px = {}\nlm_boost = {:?}\nsingle_level = {}\nocclusion = {}\nillumination = {}\n",
            s.levels,
            s.pcg_iters,
            s.patch_iters,
            s.grid_step,
            s.subdomain_px,
            s.ring_px,
            s.lm_boost,
            s.single_level,
            s.occlusion,
            s.illumination
        );
        if !self.inputs.is_empty() {
            let joined = self.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
            out += &format!("inputs = {joined}\n");
        }
        if let Some(c) = &self.calib {
            out += &format!("calib = {}\n", c.display());
        }
        if let Some(o) = &self.out_dir {
            out += &format!("out_dir = {}\n", o.display());
        }
        out
    }

    /// All keys a config file may contain.
    pub fn keys() -> impl Iterator<Item = &'static str> {
        std::iter::once("preset")
            .chain(PARAM_KEYS)
            .chain(SCHEDULE_KEYS)
            .chain(["inputs", "calib", "out_dir"])
    }
}

/// Comma-separated counts, e.g. `2,2,5,5,5`.
pub fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    let items: Vec<usize> = value
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("`{}` is not a count", t.trim())))
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn non_empty_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}
