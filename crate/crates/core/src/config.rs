//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write;

use sha2::{Digest, Sha256};

use crate::autoencoder::AeConfig;
use crate::generator::GenConfig;
use crate::guidance::{GuidanceConfig, Placement};
use crate::recognizer::MarConfig;
use crate::{Error, Result};

/// Every accepted key with its desk-scale default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data.num", "2000"),
    ("data.max_classes", "32"),
    ("ae.latent_dim", "16"),
    ("ae.width", "32"),
    ("ae.lr", "0.001"),
    ("ae.batch_size", "32"),
    ("ae.epochs", "8"),
    ("mar.embed_dim", "64"),
    ("mar.width", "64"),
    ("mar.layers", "1"),
    ("mar.heads", "4"),
    ("mar.tau", "0.1"),
    ("mar.max_tokens", "24"),
    ("mar.max_frames", "128"),
    ("mar.lr", "0.001"),
    ("mar.batch_size", "32"),
    ("mar.epochs", "8"),
    ("mar.streams", "j+b+m"),
    ("mar.symmetric", "false"),
    ("gen.width", "64"),
    ("gen.layers", "2"),
    ("gen.heads", "4"),
    ("gen.head_width", "64"),
    ("gen.head_blocks", "2"),
    ("gen.ode_steps", "25"),
    ("gen.ar_steps", "8"),
    ("gen.max_len", "32"),
    ("gen.lr", "0.001"),
    ("gen.batch_size", "32"),
    ("gen.head_repeats", "4"),
    ("gen.epochs", "20"),
    ("guidance.enabled", "true"),
    ("guidance.gamma", "1.0"),
    ("guidance.weights", "0.25,0.25,0.25,0.25"),
    ("guidance.eps", "1e-8"),
    ("guidance.placement", "per-ar-step"),
    ("eval.prompts", "200"),
    ("eval.rprecision_runs", "5"),
    ("eval.mmodality_prompts", "10"),
    ("eval.mmodality_repeats", "10"),
    ("eval.edit_samples", "20"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// SHA-256 of the config file bytes, hex.
    pub hash: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults parse")
    }
}

fn known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment. Unknown keys, missing
    /// `=` and duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !known(k) {
                return Err(Error::config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if seen.contains(&k) {
                return Err(Error::config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            seen.push(k);
            values.insert(k.to_string(), v.to_string());
        }
        let cfg = Self {
            values,
            hash: hex(&Sha256::digest(text.as_bytes())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    /// Command-line override of a single key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::config(format!("unknown key `{key}`")));
        }
        let old = self.values.insert(key.to_string(), value.to_string());
        if let Err(e) = self.validate() {
            if let Some(old) = old {
                self.values.insert(key.to_string(), old);
            }
            return Err(e);
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not a config key"))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::config(format!("`{key}` must be {what}, got `{}`", self.get(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parsed(key, "a number")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "on" => Ok(true),
            "false" | "off" => Ok(false),
            v => Err(Error::config(format!("`{key}` must be true/false or on/off, got `{v}`"))),
        }
    }

    fn validate(&self) -> Result<()> {
        for (k, _) in DEFAULTS {
            match *k {
                "mar.streams" => {
                    parse_streams(self.get(k))?;
                }
                "guidance.weights" => {
                    self.weights()?;
                }
                "guidance.placement" => {
                    self.get(k).parse::<Placement>().map_err(|e| Error::config(e.to_string()))?;
                }
                "guidance.enabled" | "mar.symmetric" => {
                    self.bool(k)?;
                }
                _ if k.ends_with("lr") || k.ends_with("tau") || k.ends_with("gamma") || k.ends_with("eps") => {
                    self.f64(k)?;
                }
                _ => {
                    self.usize(k)?;
                }
            }
        }
        let wrap = |r: Result<()>| r.map_err(|e| Error::config(e.to_string()));
        wrap(self.ae()?.validate())?;
        wrap(self.mar()?.validate())?;
        wrap(self.gen()?.validate())?;
        wrap(self.guidance()?.validate())
    }

    fn weights(&self) -> Result<[f64; 4]> {
        let parts: Vec<&str> = self.get("guidance.weights").split(',').map(str::trim).collect();
        let bad = || Error::config(format!("`guidance.weights` needs four numbers, got `{}`", self.get("guidance.weights")));
        if parts.len() != 4 {
            return Err(bad());
        }
        let mut w = [0.0; 4];
        for (slot, p) in w.iter_mut().zip(parts) {
            *slot = p.parse().map_err(|_| bad())?;
        }
        Ok(w)
    }

    pub fn ae(&self) -> Result<AeConfig> {
        Ok(AeConfig {
            latent_dim: self.usize("ae.latent_dim")?,
            width: self.usize("ae.width")?,
            lr: self.f64("ae.lr")?,
            batch_size: self.usize("ae.batch_size")?,
        })
    }

    pub fn mar(&self) -> Result<MarConfig> {
        Ok(MarConfig {
            embed_dim: self.usize("mar.embed_dim")?,
            width: self.usize("mar.width")?,
            layers: self.usize("mar.layers")?,
            heads: self.usize("mar.heads")?,
            tau: self.f64("mar.tau")?,
            max_tokens: self.usize("mar.max_tokens")?,
            max_frames: self.usize("mar.max_frames")?,
            lr: self.f64("mar.lr")?,
            batch_size: self.usize("mar.batch_size")?,
            streams: parse_streams(self.get("mar.streams"))?,
            symmetric: self.bool("mar.symmetric")?,
        })
    }

    pub fn gen(&self) -> Result<GenConfig> {
        Ok(GenConfig {
            width: self.usize("gen.width")?,
            layers: self.usize("gen.layers")?,
            heads: self.usize("gen.heads")?,
            head_width: self.usize("gen.head_width")?,
            head_blocks: self.usize("gen.head_blocks")?,
            ode_steps: self.usize("gen.ode_steps")?,
            ar_steps: self.usize("gen.ar_steps")?,
            max_len: self.usize("gen.max_len")?,
            lr: self.f64("gen.lr")?,
            batch_size: self.usize("gen.batch_size")?,
            head_repeats: self.usize("gen.head_repeats")?,
            classifier_free: false,
        })
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        Ok(GuidanceConfig {
            gamma: self.f64("guidance.gamma")?,
            weights: self.weights()?,
            eps: self.f64("guidance.eps")?,
            placement: self.get("guidance.placement").parse().map_err(|e: Error| Error::config(e.to_string()))?,
        })
    }

    /// The merged effective configuration, one `key=value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// `"j+b+m"`-style stream selection.
pub fn parse_streams(s: &str) -> Result<[bool; 3]> {
    let mut out = [false; 3];
    for part in s.split('+').map(str::trim) {
        let i = ["j", "b", "m"]
            .iter()
            .position(|&n| n == part)
            .ok_or_else(|| Error::config(format!("unknown stream `{part}` in `{s}`; use j, b and m joined by +")))?;
        if out[i] {
            return Err(Error::config(format!("stream `{part}` listed twice in `{s}`")));
        }
        out[i] = true;
    }
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
