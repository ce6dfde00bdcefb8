//! Multi-scale contextualization.
//!
//! The hidden dimension is cut into `n` contiguous groups. Group `i` is
//! passed through unchanged when its scope `k_i` is zero, and otherwise
//! through a dense 1-D convolution of kernel size `k_i`, zero-padded by
//! `(k_i - 1) / 2` on both sides. The group outputs are concatenated back
//! in order, so the layer maps `[.., length, d_model]` to the same shape.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Scopes accepted without an explicit override.
pub const STANDARD_SCOPES: [usize; 5] = [0, 1, 3, 5, 7];

/// Ordered per-group kernel sizes; 0 marks an identity group.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KSeries(Vec<usize>);

impl KSeries {
    /// Builds a series restricted to the standard scopes `{0, 1, 3, 5, 7}`.
    pub fn new(scopes: Vec<usize>) -> Result<Self> {
        Self::build(scopes, false)
    }

    /// Like [`KSeries::new`] but admits odd scopes above 7.
    pub fn with_large_scopes(scopes: Vec<usize>) -> Result<Self> {
        Self::build(scopes, true)
    }

    fn build(scopes: Vec<usize>, allow_large: bool) -> Result<Self> {
        if scopes.is_empty() {
            return Err(Error::KSeries {
                entry: String::new(),
                reason: "at least one group is required".into(),
            });
        }
        for &k in &scopes {
            check_scope(k, allow_large)?;
        }
        Ok(KSeries(scopes))
    }

    /// Parses the comma-separated form, e.g. `"0,0,1,1,3,5,5,7"`.
    pub fn parse(text: &str, allow_large: bool) -> Result<Self> {
        let scopes = text
            .split(',')
            .map(|entry| {
                entry.trim().parse::<usize>().map_err(|_| Error::KSeries {
                    entry: entry.to_string(),
                    reason: "not a non-negative integer".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(scopes, allow_large)
    }

    /// All-identity series with `n` groups.
    pub fn identity(n: usize) -> Self {
        KSeries(vec![0; n.max(1)])
    }

    pub fn scopes(&self) -> &[usize] {
        &self.0
    }

    /// Number of dimension groups.
    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|&k| k == 0)
    }

    /// Re-checks every scope, e.g. after deserialization.
    pub fn validate(&self, allow_large: bool) -> Result<()> {
        Self::build(self.0.clone(), allow_large).map(|_| ())
    }
}

fn check_scope(k: usize, allow_large: bool) -> Result<()> {
    if k != 0 && k.is_multiple_of(2) {
        return Err(Error::KSeries {
            entry: k.to_string(),
            reason: "scopes must be zero or odd so both-side padding keeps the length".into(),
        });
    }
    if !allow_large && !STANDARD_SCOPES.contains(&k) {
        return Err(Error::KSeries {
            entry: k.to_string(),
            reason: format!(
                "scope outside {STANDARD_SCOPES:?}; larger odd scopes need an explicit override"
            ),
        });
    }
    Ok(())
}

impl fmt::Display for KSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}")?;
        }
        Ok(())
    }
}

impl FromStr for KSeries {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KSeries::parse(s, false)
    }
}

impl Serialize for KSeries {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

// Deserialization only enforces the odd-or-zero rule; the standard-scope
// restriction is applied by config validation, which knows the override.
impl<'de> Deserialize<'de> for KSeries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        KSeries::parse(&text, true).map_err(serde::de::Error::custom)
    }
}

/// Named k-series families compared in the scales experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleVariant {
    Small,
    Large,
    Balanced,
}

impl ScaleVariant {
    pub const ALL: [ScaleVariant; 3] = [
        ScaleVariant::Small,
        ScaleVariant::Large,
        ScaleVariant::Balanced,
    ];

    pub fn kseries(self) -> KSeries {
        let scopes = match self {
            ScaleVariant::Small => vec![0, 0, 1, 1, 3, 3, 5, 5],
            ScaleVariant::Large => vec![0, 0, 1, 1, 5, 5, 7, 7],
            ScaleVariant::Balanced => vec![0, 0, 1, 1, 3, 5, 5, 7],
        };
        KSeries(scopes)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleVariant::Small => "small",
            ScaleVariant::Large => "large",
            ScaleVariant::Balanced => "balanced",
        }
    }
}

impl FromStr for ScaleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(ScaleVariant::Small),
            "large" => Ok(ScaleVariant::Large),
            "balanced" => Ok(ScaleVariant::Balanced),
            other => Err(Error::Config(format!("unknown k-series variant {other:?}"))),
        }
    }
}

/// Series suited to text whose dominant UTF-8 width is `dominant_group`:
/// small scopes for one-byte scripts, large ones for three- and four-byte
/// scripts, and the balanced mix otherwise.
pub fn recommend_kseries(dominant_group: usize) -> KSeries {
    match dominant_group {
        0 | 1 => ScaleVariant::Small.kseries(),
        2 => ScaleVariant::Balanced.kseries(),
        _ => ScaleVariant::Large.kseries(),
    }
}

/// Recommendation from a byte-group histogram (`counts[g]` = codepoints of
/// width `g`). A corpus where no group holds a strict majority counts as
/// mixed and gets the balanced series.
pub fn recommend_for_histogram(counts: &[usize; 5]) -> KSeries {
    let total: usize = counts.iter().sum();
    let mut best = 1;
    for g in 2..=4 {
        if counts[g] >= counts[best] {
            best = g;
        }
    }
    if total == 0 || counts[best] * 2 <= total {
        ScaleVariant::Balanced.kseries()
    } else {
        recommend_kseries(best)
    }
}

#[derive(Debug, Clone)]
struct Group {
    k: usize,
    conv: Option<(ParamId, ParamId)>,
}

/// Grouped contextualizer placed in front of encoder self-attention.
#[derive(Debug, Clone)]
pub struct MscLayer {
    d_model: usize,
    group_width: usize,
    k_series: KSeries,
    groups: Vec<Group>,
}

impl MscLayer {
    /// Registers the layer's parameters in `store` under `prefix`. Identity
    /// groups allocate nothing. Convolution weights are drawn uniformly from
    /// `±(k * width)^(-1/2)`; biases start at zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        k_series: &KSeries,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = k_series.n();
        if !d_model.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by the {n} groups of the k-series"
            )));
        }
        k_series.validate(true)?;
        let w = d_model / n;
        let groups = k_series
            .scopes()
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let conv = (k > 0).then(|| {
                    let bound = 1.0 / ((k * w) as f64).sqrt();
                    let weight =
                        store.uniform(format!("{prefix}.group{i}.weight"), &[k, w, w], bound, rng);
                    let bias = store.insert(format!("{prefix}.group{i}.bias"), Tensor::zeros(&[w]));
                    (weight, bias)
                });
                Group { k, conv }
            })
            .collect();
        Ok(MscLayer {
            d_model,
            group_width: w,
            k_series: k_series.clone(),
            groups,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn group_width(&self) -> usize {
        self.group_width
    }

    pub fn k_series(&self) -> &KSeries {
        &self.k_series
    }

    /// Number of groups with a convolution.
    pub fn conv_groups(&self) -> usize {
        self.groups.iter().filter(|g| g.conv.is_some()).count()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.groups
            .iter()
            .filter_map(|g| g.conv)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Applies the layer to `x` of shape `[length, d_model]` or
    /// `[batch, length, d_model]`. `keep` has one flag per position (false
    /// for padding). Convolution groups see zeros at padded positions and
    /// emit zeros there; identity groups return their slice untouched.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        keep: &[bool],
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if !(2..=3).contains(&shape.len()) || shape[shape.len() - 1] != self.d_model {
            return Err(Error::shape(
                "msc_forward",
                format!("input {shape:?} for d_model {}", self.d_model),
            ));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        if rows != keep.len() {
            return Err(Error::shape(
                "msc_forward",
                format!("{} mask flags for {rows} positions", keep.len()),
            ));
        }
        let w = self.group_width;
        let mut parts = Vec::with_capacity(self.groups.len());
        for (i, group) in self.groups.iter().enumerate() {
            let slice = tape.narrow(x, i * w, w)?;
            let part = match group.conv {
                None => slice,
                Some((weight, bias)) => {
                    let masked = tape.row_mask(slice, keep)?;
                    let (weight, bias) = (tape.param(store, weight), tape.param(store, bias));
                    let y = tape.conv1d(masked, weight, bias, (group.k - 1) / 2)?;
                    tape.row_mask(y, keep)?
                }
            };
            parts.push(part);
        }
        tape.concat(&parts)
    }
}

/// Builds a standalone layer with its own parameter store, seeded
/// deterministically.
pub fn new_msc(d_model: usize, k_series: &KSeries, seed: u64) -> Result<(MscLayer, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = MscLayer::new(&mut store, "msc", d_model, k_series, &mut rng)?;
    Ok((layer, store))
}
