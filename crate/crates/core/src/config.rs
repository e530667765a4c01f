//! Training configuration and ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::persona::PersonaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Token embedding width.
    pub d_w: usize,
    /// Entity embedding width.
    pub d_e: usize,
    /// News/user representation width.
    pub d_r: usize,
    /// Hidden width of additive attention and the click head.
    pub d_attn: usize,
    /// Contrastive projection output width.
    pub d_p: usize,
    pub heads: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_w: 300,
            d_e: 100,
            d_r: 256,
            d_attn: 200,
            d_p: 128,
            heads: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Negatives per positive.
    pub neg_ratio: usize,
    pub lr: f64,
    pub dropout: f64,
    /// Title dropout applied when forming the title view for contrastive learning.
    pub cl_dropout: f64,
    pub lambda: f64,
    pub tau: f64,
    pub top_k: usize,
    pub top_g: usize,
    /// Persona capacity; `None` means `top_g * top_k`.
    pub n_e: Option<usize>,
    pub n_w: usize,
    pub n_u: usize,
    pub dims: ModelDims,
    pub epochs: usize,
    pub seed: u64,
    pub use_persona: bool,
    pub use_cl: bool,
    pub abstract_as_title: bool,
    /// Build personas from title entities only instead of title then abstract.
    pub title_entities_only: bool,
    /// Held-out fraction (latest impressions) when no dev file is given.
    pub dev_fraction: f64,
    /// Run per-sample work on the rayon pool when the `parallel` feature is on.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            neg_ratio: 4,
            lr: 8e-5,
            dropout: 0.2,
            cl_dropout: 0.2,
            lambda: 1.0,
            tau: 0.05,
            top_k: 4,
            top_g: 20,
            n_e: None,
            n_w: 20,
            n_u: 20,
            dims: ModelDims::default(),
            epochs: 5,
            seed: 42,
            use_persona: true,
            use_cl: true,
            abstract_as_title: false,
            title_entities_only: false,
            dev_fraction: 0.1,
            parallel: true,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "neg_ratio",
    "lr",
    "dropout",
    "cl_dropout",
    "lambda",
    "tau",
    "top_k",
    "top_g",
    "n_e",
    "n_w",
    "n_u",
    "dims",
    "epochs",
    "seed",
    "use_persona",
    "use_cl",
    "abstract_as_title",
    "title_entities_only",
    "dev_fraction",
    "parallel",
];

impl TrainConfig {
    /// Settings for the smaller news corpus: λ = 0.5, K = 2, G = 10.
    pub fn adressa() -> Self {
        TrainConfig {
            lambda: 0.5,
            top_k: 2,
            top_g: 10,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            Error::Config(format!(
                "{}; valid keys: {}",
                e.message(),
                CONFIG_KEYS.join(", ")
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn persona(&self) -> Result<PersonaConfig> {
        PersonaConfig::new(
            self.top_g,
            self.top_k,
            self.n_e.unwrap_or(self.top_g * self.top_k),
        )
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.flags() == (self.use_persona, self.use_cl, self.abstract_as_title))
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.use_persona, self.use_cl, self.abstract_as_title) = v.flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.abstract_as_title && self.use_cl {
            return bad("abstract_as_title requires use_cl = false".into());
        }
        if self.batch_size == 0 || self.neg_ratio == 0 || self.n_w == 0 || self.n_u == 0 {
            return bad("batch_size, neg_ratio, n_w and n_u must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.cl_dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad("dev_fraction must lie in [0, 1)".into());
        }
        let d = &self.dims;
        if [d.d_w, d.d_e, d.d_r, d.d_attn, d.d_p, d.heads].contains(&0) {
            return bad("all dimensions must be positive".into());
        }
        if !d.d_r.is_multiple_of(d.heads) {
            return bad(format!("d_r = {} is not divisible by {} heads", d.d_r, d.heads));
        }
        self.persona()?;
        Ok(())
    }
}

/// The complete model and its five ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoPersona,
    NoCl,
    NoBoth,
    NoClAbstract,
    NoBothAbstract,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoPersona,
        Variant::NoCl,
        Variant::NoBoth,
        Variant::NoClAbstract,
        Variant::NoBothAbstract,
    ];

    pub const ABLATIONS: [Variant; 5] = [
        Variant::NoPersona,
        Variant::NoCl,
        Variant::NoBoth,
        Variant::NoClAbstract,
        Variant::NoBothAbstract,
    ];

    /// `(use_persona, use_cl, abstract_as_title)`
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Full => (true, true, false),
            Variant::NoPersona => (false, true, false),
            Variant::NoCl => (true, false, false),
            Variant::NoBoth => (false, false, false),
            Variant::NoClAbstract => (true, false, true),
            Variant::NoBothAbstract => (false, false, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPersona => "no-persona",
            Variant::NoCl => "no-cl",
            Variant::NoBoth => "no-both",
            Variant::NoClAbstract => "no-cl+abstract",
            Variant::NoBothAbstract => "no-both+abstract",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}
