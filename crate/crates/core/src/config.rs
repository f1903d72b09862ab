//! Model hyperparameters, ablation switches and the flat `key = value` format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the history is denoised before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BdmVariant {
    /// Relevance score plus Gumbel-Softmax keep factor.
    Full,
    /// Keep factor fixed to 1.
    Off,
    /// Keep factor fixed to 1 and the history pre-filtered so that at most
    /// this many exposures survive before each click.
    KeepExposures(usize),
}

/// How per-field behavior representations are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SfeVariant {
    /// Gated general/specific fusion carved into a micro-MLP per field.
    Full,
    /// Mean of the fused field vectors concatenated with the item embedding,
    /// projected to the common dimension.
    AvgConcat,
    /// Mean of the fused field vectors carved into one micro-MLP.
    AvgMicro,
    /// Item embedding concatenated with each fused field vector, projected.
    Concat,
    /// Specific vector only; the general vector is not used.
    SpecificOnly,
}

/// On/off switches of the correlation mixers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfmSwitches {
    pub behavior: bool,
    pub channel: bool,
    pub feature: bool,
    pub gelu: bool,
    pub adjacent: bool,
    pub dilated: bool,
    pub shifted: bool,
}

impl Default for CfmSwitches {
    fn default() -> Self {
        CfmSwitches {
            behavior: true,
            channel: true,
            feature: true,
            gelu: true,
            adjacent: true,
            dilated: true,
            shifted: true,
        }
    }
}

/// How the sequence embedding is aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamVariant {
    Full,
    /// Uniform `1/n` field weights.
    AvgPool,
    /// Field weights from the behavior features alone, no target term.
    Untargeted,
    /// Scalar gate per behavior instead of a channel-wise gate.
    ScalarScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub bdm: BdmVariant,
    pub sfe: SfeVariant,
    pub cfm: CfmSwitches,
    pub sam: SamVariant,
    /// When false every situational embedding is replaced by zeros.
    pub situation: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            bdm: BdmVariant::Full,
            sfe: SfeVariant::Full,
            cfm: CfmSwitches::default(),
            sam: SamVariant::Full,
            situation: true,
        }
    }
}

/// Named ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoBdm,
    KeepExposures(usize),
    SfeAvgConcat,
    SfeAvgMicro,
    SfeConcat,
    SfeSpecificOnly,
    BehaviorOnly,
    ChannelOnly,
    FeatureOnly,
    NoFeatureMixer,
    NoChannelMixer,
    NoBehaviorMixer,
    NoGelu,
    SamAvgPool,
    SamUntargeted,
    SamScalarScore,
    NoSituation,
}

pub const KEEP_EXPOSURE_GRID: [usize; 6] = [2, 4, 8, 12, 16, 20];

impl Variant {
    /// Every preset, `KeepExposures` expanded over its grid.
    pub fn all() -> Vec<Variant> {
        use Variant::*;
        let mut v = vec![Full, NoBdm];
        v.extend(KEEP_EXPOSURE_GRID.iter().map(|&x| KeepExposures(x)));
        v.extend([
            SfeAvgConcat,
            SfeAvgMicro,
            SfeConcat,
            SfeSpecificOnly,
            BehaviorOnly,
            ChannelOnly,
            FeatureOnly,
            NoFeatureMixer,
            NoChannelMixer,
            NoBehaviorMixer,
            NoGelu,
            SamAvgPool,
            SamUntargeted,
            SamScalarScore,
            NoSituation,
        ]);
        v
    }

    pub fn id(&self) -> String {
        use Variant::*;
        match self {
            Full => "full".into(),
            NoBdm => "no-bdm".into(),
            KeepExposures(x) => format!("keep-exposures-{x}"),
            SfeAvgConcat => "sfe-avg-concat".into(),
            SfeAvgMicro => "sfe-avg-micro".into(),
            SfeConcat => "sfe-concat".into(),
            SfeSpecificOnly => "sfe-specific-only".into(),
            BehaviorOnly => "cfm-behavior-only".into(),
            ChannelOnly => "cfm-channel-only".into(),
            FeatureOnly => "cfm-feature-only".into(),
            NoFeatureMixer => "cfm-no-feature".into(),
            NoChannelMixer => "cfm-no-channel".into(),
            NoBehaviorMixer => "cfm-no-behavior".into(),
            NoGelu => "cfm-no-gelu".into(),
            SamAvgPool => "sam-avg-pool".into(),
            SamUntargeted => "sam-untargeted".into(),
            SamScalarScore => "sam-scalar-score".into(),
            NoSituation => "no-situation".into(),
        }
    }

    pub fn ablation(&self) -> Ablation {
        use Variant::*;
        let mut a = Ablation::default();
        let only = |behavior, channel, feature| CfmSwitches {
            behavior,
            channel,
            feature,
            ..CfmSwitches::default()
        };
        match *self {
            Full => {}
            NoBdm => a.bdm = BdmVariant::Off,
            KeepExposures(x) => a.bdm = BdmVariant::KeepExposures(x),
            SfeAvgConcat => a.sfe = SfeVariant::AvgConcat,
            SfeAvgMicro => a.sfe = SfeVariant::AvgMicro,
            SfeConcat => a.sfe = SfeVariant::Concat,
            SfeSpecificOnly => a.sfe = SfeVariant::SpecificOnly,
            BehaviorOnly => a.cfm = only(true, false, false),
            ChannelOnly => a.cfm = only(false, true, false),
            FeatureOnly => a.cfm = only(false, false, true),
            NoFeatureMixer => a.cfm = only(true, true, false),
            NoChannelMixer => a.cfm = only(true, false, true),
            NoBehaviorMixer => a.cfm = only(false, true, true),
            NoGelu => a.cfm.gelu = false,
            SamAvgPool => a.sam = SamVariant::AvgPool,
            SamUntargeted => a.sam = SamVariant::Untargeted,
            SamScalarScore => a.sam = SamVariant::ScalarScore,
            NoSituation => a.situation = false,
        }
        a
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(x) = s.strip_prefix("keep-exposures-") {
            let x = x
                .parse()
                .map_err(|_| Error::Config(format!("bad exposure count in variant `{s}`")))?;
            return Ok(Variant::KeepExposures(x));
        }
        Variant::all()
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Every hyperparameter of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// History length `L`.
    pub seq_len: usize,
    /// Mixer window `L_w`; divides `seq_len`.
    pub window: usize,
    /// Number of situational fields `n`.
    pub num_fields: usize,
    /// Common embedding dimension `d2`.
    pub d_common: usize,
    /// Layer count `D` of the carved micro-MLP.
    pub micro_depth: usize,
    /// Number of stacked mixer blocks `M`.
    pub mixer_depth: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    pub hidden_behavior: usize,
    pub hidden_channel: usize,
    pub hidden_feature: usize,
    pub head_hidden: Vec<usize>,
    /// Vocabulary sizes; each includes the padding id 0.
    pub item_vocab: usize,
    pub user_vocab: usize,
    pub context_vocab: usize,
    pub situ_vocab: Vec<usize>,
    /// Which situational field carries the behavior type.
    pub behavior_field: usize,
    pub ablation: Ablation,
    /// Emit shifted-mixer rows as `Remain ‖ segments` instead of in place.
    pub shifted_literal_order: bool,
    /// Divide the pooled sequence embedding by the real history length.
    pub pool_by_count: bool,
    /// Share behavior/channel mixer weights across the field planes.
    pub share_planes: bool,
    pub init_std: f64,
    pub seed: u64,
}

/// Behavior-type ids in the behavior field.
pub const BEHAVIOR_EXPOSURE: usize = 1;
pub const BEHAVIOR_CLICK: usize = 2;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 300,
            window: 30,
            num_fields: 5,
            d_common: 8,
            micro_depth: 2,
            mixer_depth: 4,
            tau: 1.0,
            hidden_behavior: 10,
            hidden_channel: 16,
            hidden_feature: 8,
            head_hidden: vec![32, 16],
            item_vocab: 1001,
            user_vocab: 1001,
            context_vocab: 9,
            situ_vocab: vec![3, 25, 5, 3, 5],
            behavior_field: 0,
            ablation: Ablation::default(),
            shifted_literal_order: false,
            pool_by_count: false,
            share_planes: true,
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Situational embedding dimension `d1 = D · (d2² + d2)`: exactly the
    /// number of weights and biases of `D` square `d2 → d2` layers.
    pub fn d_situ(&self) -> usize {
        self.micro_depth * (self.d_common * self.d_common + self.d_common)
    }

    /// Hidden width of the fusion gate MLP.
    pub fn gate_hidden(&self) -> usize {
        ((self.d_common + self.d_situ()) / 2).max(1)
    }

    pub fn segments(&self) -> usize {
        self.seq_len / self.window
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 || self.window == 0 || !self.seq_len.is_multiple_of(self.window) {
            return fail(format!(
                "seq_len {} must be a positive multiple of window {}",
                self.seq_len, self.window
            ));
        }
        if self.ablation.cfm.behavior && self.ablation.cfm.shifted && self.segments() < 2 {
            return fail(format!(
                "shifted mixer needs seq_len / window >= 2, got {}",
                self.segments()
            ));
        }
        if self.num_fields == 0 || self.situ_vocab.len() != self.num_fields {
            return fail(format!(
                "num_fields {} must be >= 1 and match situ_vocab length {}",
                self.num_fields,
                self.situ_vocab.len()
            ));
        }
        if self.mixer_depth == 0 || self.micro_depth == 0 || self.d_common == 0 {
            return fail("mixer_depth, micro_depth and d_common must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.hidden_behavior == 0 || self.hidden_channel == 0 || self.hidden_feature == 0 {
            return fail("mixer hidden sizes must be >= 1".into());
        }
        if self.head_hidden.contains(&0) {
            return fail("head hidden widths must be >= 1".into());
        }
        let vocabs = [
            ("item_vocab", self.item_vocab),
            ("user_vocab", self.user_vocab),
            ("context_vocab", self.context_vocab),
        ];
        for (name, v) in vocabs {
            if v < 2 {
                return fail(format!("{name} must be >= 2 (padding plus one id), got {v}"));
            }
        }
        if let Some(v) = self.situ_vocab.iter().find(|&&v| v < 2) {
            return fail(format!("situational vocabularies must be >= 2, got {v}"));
        }
        if self.behavior_field >= self.num_fields {
            return fail(format!("behavior_field {} out of range", self.behavior_field));
        }
        if !(self.init_std > 0.0) {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let a = &mut self.ablation;
        match key {
            "seq_len" => self.seq_len = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "num_fields" => self.num_fields = parse(key, value)?,
            "d_common" | "d2" => self.d_common = parse(key, value)?,
            "micro_depth" => self.micro_depth = parse(key, value)?,
            "d_situ" | "d1" => {
                let d1: usize = parse(key, value)?;
                if d1 != self.d_situ() {
                    return Err(Error::Config(format!(
                        "d1 = {d1} contradicts d1 = D·(d2²+d2) = {}·({}+{}) = {}",
                        self.micro_depth,
                        self.d_common * self.d_common,
                        self.d_common,
                        self.d_situ()
                    )));
                }
            }
            "mixer_depth" => self.mixer_depth = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "hidden_behavior" => self.hidden_behavior = parse(key, value)?,
            "hidden_channel" => self.hidden_channel = parse(key, value)?,
            "hidden_feature" => self.hidden_feature = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse_list(key, value)?,
            "item_vocab" => self.item_vocab = parse(key, value)?,
            "user_vocab" => self.user_vocab = parse(key, value)?,
            "context_vocab" => self.context_vocab = parse(key, value)?,
            "situ_vocab" => {
                self.situ_vocab = parse_list(key, value)?;
                self.num_fields = self.situ_vocab.len();
            }
            "behavior_field" => self.behavior_field = parse(key, value)?,
            "variant" => *a = value.parse::<Variant>()?.ablation(),
            "bdm" => {
                a.bdm = match value {
                    "full" => BdmVariant::Full,
                    "off" => BdmVariant::Off,
                    v => match v.strip_prefix("keep:") {
                        Some(x) => BdmVariant::KeepExposures(parse(key, x)?),
                        None => return Err(Error::Config(format!("bad bdm value `{v}`"))),
                    },
                }
            }
            "sfe" => {
                a.sfe = match value {
                    "full" => SfeVariant::Full,
                    "avg-concat" => SfeVariant::AvgConcat,
                    "avg-micro" => SfeVariant::AvgMicro,
                    "concat" => SfeVariant::Concat,
                    "specific-only" => SfeVariant::SpecificOnly,
                    v => return Err(Error::Config(format!("bad sfe value `{v}`"))),
                }
            }
            "sam" => {
                a.sam = match value {
                    "full" => SamVariant::Full,
                    "avg-pool" => SamVariant::AvgPool,
                    "untargeted" => SamVariant::Untargeted,
                    "scalar-score" => SamVariant::ScalarScore,
                    v => return Err(Error::Config(format!("bad sam value `{v}`"))),
                }
            }
            "cfm.behavior" => a.cfm.behavior = parse(key, value)?,
            "cfm.channel" => a.cfm.channel = parse(key, value)?,
            "cfm.feature" => a.cfm.feature = parse(key, value)?,
            "cfm.gelu" => a.cfm.gelu = parse(key, value)?,
            "cfm.adjacent" => a.cfm.adjacent = parse(key, value)?,
            "cfm.dilated" => a.cfm.dilated = parse(key, value)?,
            "cfm.shifted" => a.cfm.shifted = parse(key, value)?,
            "situation" => a.situation = parse(key, value)?,
            "shifted_literal_order" => self.shifted_literal_order = parse(key, value)?,
            "pool_by_count" => self.pool_by_count = parse(key, value)?,
            "share_planes" => self.share_planes = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Serializes every field as `key = value` lines readable by [`set`](Self::set).
    pub fn to_kv(&self) -> String {
        let a = &self.ablation;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let bdm = match a.bdm {
            BdmVariant::Full => "full".to_string(),
            BdmVariant::Off => "off".to_string(),
            BdmVariant::KeepExposures(x) => format!("keep:{x}"),
        };
        let sfe = match a.sfe {
            SfeVariant::Full => "full",
            SfeVariant::AvgConcat => "avg-concat",
            SfeVariant::AvgMicro => "avg-micro",
            SfeVariant::Concat => "concat",
            SfeVariant::SpecificOnly => "specific-only",
        };
        let sam = match a.sam {
            SamVariant::Full => "full",
            SamVariant::AvgPool => "avg-pool",
            SamVariant::Untargeted => "untargeted",
            SamVariant::ScalarScore => "scalar-score",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("seq_len", self.seq_len.to_string());
        kv("window", self.window.to_string());
        kv("d_common", self.d_common.to_string());
        kv("micro_depth", self.micro_depth.to_string());
        kv("mixer_depth", self.mixer_depth.to_string());
        kv("tau", format!("{:?}", self.tau));
        kv("hidden_behavior", self.hidden_behavior.to_string());
        kv("hidden_channel", self.hidden_channel.to_string());
        kv("hidden_feature", self.hidden_feature.to_string());
        kv("head_hidden", list(&self.head_hidden));
        kv("item_vocab", self.item_vocab.to_string());
        kv("user_vocab", self.user_vocab.to_string());
        kv("context_vocab", self.context_vocab.to_string());
        kv("situ_vocab", list(&self.situ_vocab));
        kv("behavior_field", self.behavior_field.to_string());
        kv("bdm", bdm);
        kv("sfe", sfe.to_string());
        kv("sam", sam.to_string());
        kv("cfm.behavior", a.cfm.behavior.to_string());
        kv("cfm.channel", a.cfm.channel.to_string());
        kv("cfm.feature", a.cfm.feature.to_string());
        kv("cfm.gelu", a.cfm.gelu.to_string());
        kv("cfm.adjacent", a.cfm.adjacent.to_string());
        kv("cfm.dilated", a.cfm.dilated.to_string());
        kv("cfm.shifted", a.cfm.shifted.to_string());
        kv("situation", a.situation.to_string());
        kv("shifted_literal_order", self.shifted_literal_order.to_string());
        kv("pool_by_count", self.pool_by_count.to_string());
        kv("share_planes", self.share_planes.to_string());
        kv("init_std", format!("{:?}", self.init_std));
        kv("seed", self.seed.to_string());
        s
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

/// Splits a config file into `(line number, key, value)` triples, skipping
/// blank lines and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
