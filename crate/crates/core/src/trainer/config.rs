//! Training configuration and its flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::RampUpSchedule;
use crate::masking::MaskSpec;
use crate::network::NetworkConfig;

/// Which side of the cross pseudo-label pair sees the masked input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McpcDirection {
    /// Unmasked predictions are supervised by pseudo-labels from the other
    /// branch's masked-input prediction.
    #[default]
    MaskedTeaches,
    /// Masked-input predictions are supervised by pseudo-labels from the
    /// other branch's unmasked prediction.
    UnmaskedTeaches,
}

impl FromStr for McpcDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked-teaches" => Ok(McpcDirection::MaskedTeaches),
            "unmasked-teaches" => Ok(McpcDirection::UnmaskedTeaches),
            other => Err(Error::Config(format!("mcpc.direction must be `masked-teaches` or `unmasked-teaches`, got `{other}`"))),
        }
    }
}

impl fmt::Display for McpcDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            McpcDirection::MaskedTeaches => "masked-teaches",
            McpcDirection::UnmaskedTeaches => "unmasked-teaches",
        })
    }
}

/// On/off switches for the three unlabeled-data terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub mcpc: bool,
    pub cfc: bool,
    pub cmd: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        mcpc: true,
        cfc: true,
        cmd: true,
    };
    pub const NONE: Toggles = Toggles {
        mcpc: false,
        cfc: false,
        cmd: false,
    };

    pub fn any(&self) -> bool {
        self.mcpc || self.cfc || self.cmd
    }

    /// Short label such as `mcpc+cmd`, or `none`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = [("mcpc", self.mcpc), ("cfc", self.cfc), ("cmd", self.cmd)]
            .iter()
            .filter(|(_, b)| *b)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub total_iters: u64,
    pub lr0: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub mask: MaskSpec,
    pub ema_alpha: f64,
    pub beta_max: f64,
    /// Fraction of `total_iters` over which the consistency weight ramps up.
    pub rampup_fraction: f64,
    pub direction: McpcDirection,
    pub toggles: Toggles,
    /// Recompute the difficulty weights every this many iterations.
    pub diff_every: u64,
    /// Periodic checkpoint interval; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// Periodic validation interval; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Evaluate the average of both students instead of student A alone.
    pub eval_ensemble: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            total_iters: 2000,
            lr0: 0.01,
            momentum: 0.9,
            poly_power: 0.9,
            seed: 0,
            mask: MaskSpec::default(),
            ema_alpha: 0.99,
            beta_max: 1.0,
            rampup_fraction: 0.4,
            direction: McpcDirection::MaskedTeaches,
            toggles: Toggles::ALL,
            diff_every: 100,
            checkpoint_every: 500,
            eval_every: 0,
            eval_ensemble: false,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in echo order.
pub const CONFIG_KEYS: &[&str] = &[
    "model.num_classes",
    "model.base_channels",
    "train.iters",
    "train.lr",
    "train.momentum",
    "train.poly_power",
    "train.seed",
    "mask.ratio",
    "mask.patch_edge",
    "mask.seed",
    "ema.alpha",
    "rampup.beta_max",
    "rampup.fraction",
    "mcpc.direction",
    "modules.mcpc",
    "modules.cfc",
    "modules.cmd",
    "weights.diff_every",
    "run.checkpoint_every",
    "run.eval_every",
    "eval.ensemble",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for {key}"))),
    }
}

impl TrainConfig {
    pub fn rampup(&self) -> RampUpSchedule {
        RampUpSchedule::for_run(self.beta_max, self.total_iters, self.rampup_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.mask.validate()?;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check(self.total_iters >= 1, "train.iters must be >= 1")?;
        check(self.lr0 > 0.0 && self.lr0.is_finite(), "train.lr must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "train.momentum must be in [0,1)")?;
        check(self.poly_power >= 0.0, "train.poly_power must be >= 0")?;
        check((0.0..=1.0).contains(&self.ema_alpha), "ema.alpha must be in [0,1]")?;
        check(self.beta_max > 0.0 && self.beta_max.is_finite(), "rampup.beta_max must be positive")?;
        check(
            self.rampup_fraction > 0.0 && self.rampup_fraction <= 1.0,
            "rampup.fraction must be in (0,1]",
        )?;
        check(self.diff_every >= 1, "weights.diff_every must be >= 1")?;
        Ok(())
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "model.num_classes" => self.network.num_classes = parse(key, value)?,
            "model.base_channels" => self.network.base_channels = parse(key, value)?,
            "train.iters" => self.total_iters = parse(key, value)?,
            "train.lr" => self.lr0 = parse(key, value)?,
            "train.momentum" => self.momentum = parse(key, value)?,
            "train.poly_power" => self.poly_power = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "mask.ratio" => self.mask.ratio = parse(key, value)?,
            "mask.patch_edge" => self.mask.patch_edge = parse(key, value)?,
            "mask.seed" => self.mask.seed = parse(key, value)?,
            "ema.alpha" => self.ema_alpha = parse(key, value)?,
            "rampup.beta_max" => self.beta_max = parse(key, value)?,
            "rampup.fraction" => self.rampup_fraction = parse(key, value)?,
            "mcpc.direction" => self.direction = value.parse()?,
            "modules.mcpc" => self.toggles.mcpc = parse_bool(key, value)?,
            "modules.cfc" => self.toggles.cfc = parse_bool(key, value)?,
            "modules.cmd" => self.toggles.cmd = parse_bool(key, value)?,
            "weights.diff_every" => self.diff_every = parse(key, value)?,
            "run.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "run.eval_every" => self.eval_every = parse(key, value)?,
            "eval.ensemble" => self.eval_ensemble = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model.num_classes" => self.network.num_classes.to_string(),
            "model.base_channels" => self.network.base_channels.to_string(),
            "train.iters" => self.total_iters.to_string(),
            "train.lr" => self.lr0.to_string(),
            "train.momentum" => self.momentum.to_string(),
            "train.poly_power" => self.poly_power.to_string(),
            "train.seed" => self.seed.to_string(),
            "mask.ratio" => self.mask.ratio.to_string(),
            "mask.patch_edge" => self.mask.patch_edge.to_string(),
            "mask.seed" => self.mask.seed.to_string(),
            "ema.alpha" => self.ema_alpha.to_string(),
            "rampup.beta_max" => self.beta_max.to_string(),
            "rampup.fraction" => self.rampup_fraction.to_string(),
            "mcpc.direction" => self.direction.to_string(),
            "modules.mcpc" => self.toggles.mcpc.to_string(),
            "modules.cfc" => self.toggles.cfc.to_string(),
            "modules.cmd" => self.toggles.cmd.to_string(),
            "weights.diff_every" => self.diff_every.to_string(),
            "run.checkpoint_every" => self.checkpoint_every.to_string(),
            "run.eval_every" => self.eval_every.to_string(),
            "eval.ensemble" => self.eval_ensemble.to_string(),
            _ => return None,
        })
    }

    /// Apply every pair from [`parse_config_text`] in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, key, value) in parse_config_text(text)? {
            self.set(&key, &value)
                .map_err(|e| Error::Config(format!("line {line}: {}", e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    /// Full `key = value` echo that [`TrainConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

/// Split config text into `(line number, key, value)`; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
