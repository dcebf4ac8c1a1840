use std::fmt;
use std::str::FromStr;

use crate::domain::Flow;
use crate::error::{Error, Result};

/// Term weights of the scene flow energy.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyParams {
    pub w_reg: f64,
    pub w_photo: f64,
    pub w_grad: f64,
    pub w_epi: f64,
    pub w_smooth: f64,
    pub w_mag: f64,
    pub w_s: f64,
    pub w_m: f64,
    pub w_d: f64,
    pub m_s: f64,
    pub m_m: f64,
    pub m_d: f64,
    /// Pseudo-Huber smoothing constant.
    pub eps_huber: f64,
    /// Outlier threshold on the mean absolute check residual.
    pub eps_color: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Live two-webcam setup.
    Live,
    /// Facial performance sequences.
    Facial,
    /// High quality stereo sequences.
    StereoHq,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Live, Preset::Facial, Preset::StereoHq];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Live => "live",
            Preset::Facial => "facial",
            Preset::StereoHq => "stereo-hq",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (expected live, facial or stereo-hq)")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Keys accepted in a parameter file, in serialization order.
pub const PARAM_KEYS: [&str; 14] = [
    "w_reg", "w_photo", "w_grad", "w_epi", "w_smooth", "w_mag", "w_s", "w_m", "w_d", "m_s", "m_m",
    "m_d", "eps_huber", "eps_color",
];

impl EnergyParams {
    pub fn preset(p: Preset) -> Self {
        // (w_reg, w_photo, w_grad, w_epi, w_s, w_m, w_d, m_s, m_m, m_d)
        let t = match p {
            Preset::Live => [1.0, 1.0, 2.0, 0.0, 5.0, 5.0, 0.5, 5.0, 100.0, 1000.0],
            Preset::Facial => [0.5, 0.5, 5.0, 0.5, 0.75, 0.5, 0.01, 0.5, 10.0, 100.0],
            Preset::StereoHq => [5.0, 1.0, 5.0, 0.5, 0.5, 1.0, 1.0, 0.1, 10000.0, 10000.0],
        };
        EnergyParams {
            w_reg: t[0],
            w_photo: t[1],
            w_grad: t[2],
            w_epi: t[3],
            w_smooth: 1.0,
            w_mag: 1.0,
            w_s: t[4],
            w_m: t[5],
            w_d: t[6],
            m_s: t[7],
            m_m: t[8],
            m_d: t[9],
            eps_huber: 0.001,
            eps_color: 0.2,
        }
    }

    pub fn smooth_weight(&self, flow: Flow) -> f64 {
        match flow {
            Flow::Stereo => self.w_s,
            Flow::Motion => self.w_m,
            Flow::Difference => self.w_d,
        }
    }

    pub fn mag_weight(&self, flow: Flow) -> f64 {
        match flow {
            Flow::Stereo => self.m_s,
            Flow::Motion => self.m_m,
            Flow::Difference => self.m_d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for key in PARAM_KEYS {
            let v = self.get(key).unwrap();
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter(format!("{key} must be finite and >= 0, got {v}")));
            }
        }
        if self.eps_huber <= 0.0 {
            return Err(Error::InvalidParameter(
                "eps_huber must be > 0 (the penalty is not differentiable at 0 otherwise)".into(),
            ));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        Some(match key {
            "w_reg" => self.w_reg,
            "w_photo" => self.w_photo,
            "w_grad" => self.w_grad,
            "w_epi" => self.w_epi,
            "w_smooth" => self.w_smooth,
            "w_mag" => self.w_mag,
            "w_s" => self.w_s,
            "w_m" => self.w_m,
            "w_d" => self.w_d,
            "m_s" => self.m_s,
            "m_m" => self.m_m,
            "m_d" => self.m_d,
            "eps_huber" => self.eps_huber,
            "eps_color" => self.eps_color,
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let slot = match key {
            "w_reg" => &mut self.w_reg,
            "w_photo" => &mut self.w_photo,
            "w_grad" => &mut self.w_grad,
            "w_epi" => &mut self.w_epi,
            "w_smooth" => &mut self.w_smooth,
            "w_mag" => &mut self.w_mag,
            "w_s" => &mut self.w_s,
            "w_m" => &mut self.w_m,
            "w_d" => &mut self.w_d,
            "m_s" => &mut self.m_s,
            "m_m" => &mut self.m_m,
            "m_d" => &mut self.m_d,
            "eps_huber" => &mut self.eps_huber,
            "eps_color" => &mut self.eps_color,
            _ => return Err(Error::Config(format!("unknown parameter `{key}`"))),
        };
        *slot = value;
        Ok(())
    }

    /// Parses `key = value` lines on top of the `live` preset. A `preset`
    /// line, if present, must come first. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut params = EnergyParams::default();
        for (lineno, key, value) in key_values(text)? {
            if key == "preset" {
                params = EnergyParams::preset(value.parse()?);
                continue;
            }
            let v: f64 = value
                .parse()
                .map_err(|_| Error::Config(format!("line {lineno}: `{value}` is not a number")))?;
            params.set(key, v).map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
        }
        params.validate()?;
        Ok(params)
    }

    pub fn to_config_string(&self) -> String {
        PARAM_KEYS
            .iter()
            .map(|k| format!("{k} = {:?}\n", self.get(k).unwrap()))
            .collect()
    }
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams::preset(Preset::Live)
    }
}

/// Splits a key=value document into `(line number, key, value)` triples.
pub(crate) fn key_values(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table() {
        let live = EnergyParams::preset(Preset::Live);
        assert_eq!(
            (live.w_reg, live.w_photo, live.w_grad, live.w_epi),
            (1.0, 1.0, 2.0, 0.0)
        );
        assert_eq!((live.w_s, live.w_m, live.w_d), (5.0, 5.0, 0.5));
        assert_eq!((live.m_s, live.m_m, live.m_d), (5.0, 100.0, 1000.0));
        assert_eq!((live.w_smooth, live.w_mag), (1.0, 1.0));
        assert_eq!((live.eps_huber, live.eps_color), (0.001, 0.2));

        let facial = EnergyParams::preset(Preset::Facial);
        assert_eq!((facial.w_reg, facial.w_grad, facial.w_d, facial.m_d), (0.5, 5.0, 0.01, 100.0));
        let hq = EnergyParams::preset(Preset::StereoHq);
        assert_eq!((hq.w_reg, hq.m_s, hq.m_m, hq.m_d), (5.0, 0.1, 10000.0, 10000.0));
    }

    #[test]
    fn parse_and_round_trip() {
        let p = EnergyParams::parse("preset = facial\n# comment\nw_epi = 0.25\nm_s=3\n").unwrap();
        assert_eq!(p.w_epi, 0.25);
        assert_eq!(p.m_s, 3.0);
        assert_eq!(p.w_grad, 5.0);
        let back = EnergyParams::parse(&p.to_config_string()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn parse_rejects_unknown_and_bad_values() {
        assert!(EnergyParams::parse("w_bogus = 1").is_err());
        assert!(EnergyParams::parse("w_reg = abc").is_err());
        assert!(EnergyParams::parse("w_reg").is_err());
        assert!(EnergyParams::parse("w_reg = -1").is_err());
        assert!(EnergyParams::parse("eps_huber = 0").is_err());
        assert!(EnergyParams::parse("preset = nope").is_err());
    }
}
