//! Transform-op catalog, brute-force pipeline enumeration, and rendering of
//! pipelines to candidate source text.
//!
//! A pipeline is one to three *variable* ops drawn from the catalog followed
//! by a constant tail (`Resize((64, 64))`, `ToTensor()`, `Normalize(..)`).
//! Enumeration walks ordered op combinations in lexicographic catalog order
//! and wraps around once the combination space is exhausted; parameters are
//! resampled on every visit from a per-pipeline ChaCha stream.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag of [`default_catalog`]. Bump whenever an op, domain or
/// template changes so campaign results stay comparable.
pub const CATALOG_VERSION: &str = "torchvision-v1";

pub const MIN_ARITY: usize = 1;
pub const MAX_ARITY: usize = 3;

/// Module alias every rendered call is qualified with.
pub const MODULE_ALIAS: &str = "transforms";
const IMPORT_LINE: &str = "import torchvision.transforms as transforms";

/// Real-valued parameters are quantized to this many decimals when sampled.
const REAL_DECIMALS: i32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("arity must be between 1 and 3, got {0}")]
    ArityOutOfRange(usize),
    #[error("pipeline count must be at least 1")]
    ZeroCount,
    #[error("catalog has {ops} ops, too few for arity {arity} without repeating an op")]
    CatalogTooSmall { ops: usize, arity: usize },
    #[error("op `{0}` is not in the catalog")]
    UnknownOp(String),
    #[error("value bound to `{op}.{param}` lies outside its domain")]
    OutOfDomain { op: String, param: String },
    #[error("op `{op}` expects {expected} values, got {got}")]
    ValueCount { op: String, expected: usize, got: usize },
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("catalog file: {0}")]
    Parse(String),
}

/// Parameter domain. Real and integer intervals are closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Real { lo: f64, hi: f64 },
    Int { lo: i64, hi: i64 },
    /// Literals rendered verbatim (e.g. `3`, `'bilinear'`).
    Choice { values: Vec<String> },
    Tuple { items: Vec<Domain> },
}

impl Domain {
    fn check(&self) -> Result<(), String> {
        match self {
            Domain::Real { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) {
                    return Err("real bounds must be finite".into());
                }
                if lo > hi {
                    return Err(format!("real interval [{lo}, {hi}] has lo > hi"));
                }
            }
            Domain::Int { lo, hi } => {
                if lo > hi {
                    return Err(format!("integer interval [{lo}, {hi}] has lo > hi"));
                }
            }
            Domain::Choice { values } => {
                if values.is_empty() {
                    return Err("enumeration is empty".into());
                }
            }
            Domain::Tuple { items } => {
                if items.is_empty() {
                    return Err("tuple has no sub-domains".into());
                }
                for item in items {
                    item.check()?;
                }
            }
        }
        Ok(())
    }

    /// Uniform draw from the domain.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        match self {
            Domain::Real { lo, hi } => {
                let raw = if lo == hi { *lo } else { rng.random_range(*lo..=*hi) };
                let scale = 10f64.powi(REAL_DECIMALS);
                ParamValue::Real(((raw * scale).round() / scale).clamp(*lo, *hi))
            }
            Domain::Int { lo, hi } => ParamValue::Int(rng.random_range(*lo..=*hi)),
            Domain::Choice { values } => {
                ParamValue::Choice(values[rng.random_range(0..values.len())].clone())
            }
            Domain::Tuple { items } => {
                ParamValue::Tuple(items.iter().map(|d| d.sample(rng)).collect())
            }
        }
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match (self, value) {
            (Domain::Real { lo, hi }, ParamValue::Real(v)) => *lo <= *v && *v <= *hi,
            (Domain::Int { lo, hi }, ParamValue::Int(v)) => lo <= v && v <= hi,
            (Domain::Choice { values }, ParamValue::Choice(v)) => values.contains(v),
            (Domain::Tuple { items }, ParamValue::Tuple(vs)) => {
                items.len() == vs.len() && items.iter().zip(vs).all(|(d, v)| d.contains(v))
            }
            _ => false,
        }
    }

    /// Flattened numeric bounds, one entry per scalar leaf. Choice leaves
    /// contribute the min/max of their numeric literals, if any.
    pub fn numeric_bounds(&self) -> Vec<Option<(f64, f64)>> {
        match self {
            Domain::Real { lo, hi } => vec![Some((*lo, *hi))],
            Domain::Int { lo, hi } => vec![Some((*lo as f64, *hi as f64))],
            Domain::Choice { values } => {
                let nums: Vec<f64> = values.iter().filter_map(|v| v.parse().ok()).collect();
                if nums.is_empty() {
                    vec![None]
                } else {
                    let lo = nums.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = nums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    vec![Some((lo, hi))]
                }
            }
            Domain::Tuple { items } => items.iter().flat_map(|d| d.numeric_bounds()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamValue {
    Real(f64),
    Int(i64),
    Choice(String),
    Tuple(Vec<ParamValue>),
}

impl ParamValue {
    /// Source-text form. Reals always carry a decimal point.
    pub fn render(&self) -> String {
        match self {
            ParamValue::Real(v) => format!("{v:?}"),
            ParamValue::Int(v) => v.to_string(),
            ParamValue::Choice(v) => v.clone(),
            ParamValue::Tuple(vs) => {
                let parts: Vec<String> = vs.iter().map(ParamValue::render).collect();
                format!("({})", parts.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderStyle {
    Positional,
    Keyword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub domain: Domain,
    pub style: RenderStyle,
}

/// One catalog entry. `template` holds a `{name}` slot per parameter, e.g.
/// `RandomPosterize(bits={bits}, p={p})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformOpSpec {
    pub name: String,
    pub template: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
}

impl TransformOpSpec {
    fn check(&self) -> Result<(), String> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(format!("op name `{}` is not an identifier", self.name));
        }
        if !self.template.starts_with(&format!("{}(", self.name)) || !self.template.ends_with(')') {
            return Err(format!("template of `{}` must be a call `{}(..)`", self.name, self.name));
        }
        let mut names = BTreeSet::new();
        for p in &self.params {
            if !names.insert(p.name.as_str()) {
                return Err(format!("duplicate parameter `{}` in `{}`", p.name, self.name));
            }
            p.domain.check().map_err(|e| format!("{}.{}: {e}", self.name, p.name))?;
        }
        let slots = template_slots(&self.template);
        if slots.len() != self.params.len() {
            return Err(format!(
                "template of `{}` has {} slots for {} params",
                self.name,
                slots.len(),
                self.params.len()
            ));
        }
        for p in &self.params {
            let keyword = format!("{}={{{}}}", p.name, p.name);
            match p.style {
                RenderStyle::Keyword if !self.template.contains(&keyword) => {
                    return Err(format!("`{}.{}` is keyword style but template lacks `{keyword}`", self.name, p.name));
                }
                RenderStyle::Positional if self.template.contains(&keyword) => {
                    return Err(format!("`{}.{}` is positional but rendered as keyword", self.name, p.name));
                }
                _ => {}
            }
            if !slots.iter().any(|s| s == &p.name) {
                return Err(format!("template of `{}` has no slot for `{}`", self.name, p.name));
            }
        }
        Ok(())
    }

    /// Fills the template. `values` must be in parameter order.
    pub fn render(&self, values: &[ParamValue]) -> Result<String, SpaceError> {
        if values.len() != self.params.len() {
            return Err(SpaceError::ValueCount {
                op: self.name.clone(),
                expected: self.params.len(),
                got: values.len(),
            });
        }
        let mut out = self.template.clone();
        for (spec, value) in self.params.iter().zip(values) {
            if !spec.domain.contains(value) {
                return Err(SpaceError::OutOfDomain { op: self.name.clone(), param: spec.name.clone() });
            }
            out = out.replacen(&format!("{{{}}}", spec.name), &value.render(), 1);
        }
        Ok(out)
    }

    pub fn sample_values<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<ParamValue> {
        self.params.iter().map(|p| p.domain.sample(rng)).collect()
    }
}

fn template_slots(template: &str) -> Vec<String> {
    let mut slots = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                slots.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    slots
}

/// Constant terminal stages shared by every brute-force pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedTail {
    pub resize: (u32, u32),
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for FixedTail {
    /// 64x64 resize; CIFAR-10 channel statistics for normalization.
    fn default() -> Self {
        FixedTail { resize: (64, 64), mean: [0.4914, 0.4822, 0.4465], std: [0.247, 0.2435, 0.2616] }
    }
}

impl FixedTail {
    fn render_with_resize(&self, resize: (u32, u32)) -> [String; 3] {
        let tuple = |v: &[f64; 3]| format!("({:?}, {:?}, {:?})", v[0], v[1], v[2]);
        [
            format!("{MODULE_ALIAS}.Resize(({}, {}))", resize.0, resize.1),
            format!("{MODULE_ALIAS}.ToTensor()"),
            format!("{MODULE_ALIAS}.Normalize(mean={}, std={})", tuple(&self.mean), tuple(&self.std)),
        ]
    }

    pub fn render_calls(&self) -> [String; 3] {
        self.render_with_resize(self.resize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: String,
    pub tail: FixedTail,
    #[serde(rename = "op")]
    pub ops: Vec<TransformOpSpec>,
}

impl Catalog {
    pub fn check(&self) -> Result<(), SpaceError> {
        if self.ops.is_empty() {
            return Err(SpaceError::InvalidCatalog("no ops".into()));
        }
        let mut names = BTreeSet::new();
        for op in &self.ops {
            if !names.insert(op.name.as_str()) {
                return Err(SpaceError::InvalidCatalog(format!("duplicate op `{}`", op.name)));
            }
            op.check().map_err(SpaceError::InvalidCatalog)?;
        }
        if self.tail.resize.0 == 0 || self.tail.resize.1 == 0 {
            return Err(SpaceError::InvalidCatalog("tail resize must be positive".into()));
        }
        Ok(())
    }

    pub fn op(&self, name: &str) -> Option<&TransformOpSpec> {
        self.ops.iter().find(|o| o.name == name)
    }

    pub fn from_toml(text: &str) -> Result<Catalog, SpaceError> {
        let catalog: Catalog = toml::from_str(text).map_err(|e| SpaceError::Parse(e.to_string()))?;
        catalog.check()?;
        Ok(catalog)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("catalog is always representable as TOML")
    }
}

fn real(name: &str, lo: f64, hi: f64) -> ParamSpec {
    ParamSpec { name: name.into(), domain: Domain::Real { lo, hi }, style: RenderStyle::Keyword }
}

fn int(name: &str, lo: i64, hi: i64) -> ParamSpec {
    ParamSpec { name: name.into(), domain: Domain::Int { lo, hi }, style: RenderStyle::Keyword }
}

fn prob() -> ParamSpec {
    real("p", 0.0, 1.0)
}

fn op(name: &str, template: &str, params: Vec<ParamSpec>) -> TransformOpSpec {
    TransformOpSpec { name: name.into(), template: template.into(), params }
}

/// The versioned built-in catalog ([`CATALOG_VERSION`]).
///
/// Every op operates on PIL images so it can precede the `ToTensor` tail.
/// Crop sizes stay within CIFAR-10's 32 px so no op needs padding to run.
pub fn default_catalog() -> Catalog {
    let ops = vec![
        op("RandomHorizontalFlip", "RandomHorizontalFlip(p={p})", vec![prob()]),
        op("RandomVerticalFlip", "RandomVerticalFlip(p={p})", vec![prob()]),
        op(
            "RandomRotation",
            "RandomRotation({degrees})",
            vec![ParamSpec {
                name: "degrees".into(),
                domain: Domain::Real { lo: 0.0, hi: 45.0 },
                style: RenderStyle::Positional,
            }],
        ),
        op(
            "RandomResizedCrop",
            "RandomResizedCrop(size={size}, scale={scale})",
            vec![
                int("size", 24, 32),
                ParamSpec {
                    name: "scale".into(),
                    domain: Domain::Tuple {
                        items: vec![Domain::Real { lo: 0.08, hi: 0.5 }, Domain::Real { lo: 0.6, hi: 1.0 }],
                    },
                    style: RenderStyle::Keyword,
                },
            ],
        ),
        op("RandomCrop", "RandomCrop(size={size}, padding={padding})", vec![int("size", 24, 32), int("padding", 0, 8)]),
        op("CenterCrop", "CenterCrop(size={size})", vec![int("size", 24, 32)]),
        op(
            "ColorJitter",
            "ColorJitter(brightness={brightness}, contrast={contrast}, saturation={saturation}, hue={hue})",
            vec![
                real("brightness", 0.0, 0.5),
                real("contrast", 0.0, 0.5),
                real("saturation", 0.0, 0.5),
                real("hue", 0.0, 0.1),
            ],
        ),
        op(
            "GaussianBlur",
            "GaussianBlur(kernel_size={kernel_size}, sigma={sigma})",
            vec![
                ParamSpec {
                    name: "kernel_size".into(),
                    domain: Domain::Choice { values: vec!["3".into(), "5".into(), "7".into()] },
                    style: RenderStyle::Keyword,
                },
                real("sigma", 0.1, 2.0),
            ],
        ),
        op("RandomPosterize", "RandomPosterize(bits={bits}, p={p})", vec![int("bits", 2, 8), prob()]),
        op("RandomSolarize", "RandomSolarize(threshold={threshold}, p={p})", vec![int("threshold", 64, 255), prob()]),
        op(
            "RandomAffine",
            "RandomAffine(degrees={degrees}, translate={translate})",
            vec![
                real("degrees", 0.0, 30.0),
                ParamSpec {
                    name: "translate".into(),
                    domain: Domain::Tuple {
                        items: vec![Domain::Real { lo: 0.0, hi: 0.2 }, Domain::Real { lo: 0.0, hi: 0.2 }],
                    },
                    style: RenderStyle::Keyword,
                },
            ],
        ),
        op("RandomGrayscale", "RandomGrayscale(p={p})", vec![prob()]),
        op(
            "RandomPerspective",
            "RandomPerspective(distortion_scale={distortion_scale}, p={p})",
            vec![real("distortion_scale", 0.0, 0.6), prob()],
        ),
        op(
            "RandomAdjustSharpness",
            "RandomAdjustSharpness(sharpness_factor={sharpness_factor}, p={p})",
            vec![real("sharpness_factor", 0.0, 3.0), prob()],
        ),
        op("RandomAutocontrast", "RandomAutocontrast(p={p})", vec![prob()]),
        op("RandomInvert", "RandomInvert(p={p})", vec![prob()]),
        op("RandomEqualize", "RandomEqualize(p={p})", vec![prob()]),
        op(
            "Resize",
            "Resize({size})",
            vec![ParamSpec {
                name: "size".into(),
                domain: Domain::Choice {
                    values: ["32", "64", "96", "128", "160", "192", "224", "256"].map(String::from).to_vec(),
                },
                style: RenderStyle::Positional,
            }],
        ),
    ];
    Catalog { version: CATALOG_VERSION.into(), tail: FixedTail::default(), ops }
}

/// A catalog op with its parameters bound, in parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundOp {
    pub op: String,
    pub values: Vec<ParamValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    variable_ops: Vec<BoundOp>,
    fixed_tail: FixedTail,
    rng_seed: u64,
    index: u64,
}

impl PipelineSpec {
    pub fn new(variable_ops: Vec<BoundOp>, fixed_tail: FixedTail, rng_seed: u64, index: u64) -> Result<Self, SpaceError> {
        if !(MIN_ARITY..=MAX_ARITY).contains(&variable_ops.len()) {
            return Err(SpaceError::ArityOutOfRange(variable_ops.len()));
        }
        Ok(PipelineSpec { variable_ops, fixed_tail, rng_seed, index })
    }

    pub fn arity(&self) -> usize {
        self.variable_ops.len()
    }

    pub fn variable_ops(&self) -> &[BoundOp] {
        &self.variable_ops
    }

    pub fn fixed_tail(&self) -> &FixedTail {
        &self.fixed_tail
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Position within its enumeration.
    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn op_names(&self) -> Vec<&str> {
        self.variable_ops.iter().map(|b| b.op.as_str()).collect()
    }
}

fn permutations(n: usize, k: usize) -> u64 {
    (0..k).map(|i| (n - i) as u64).product()
}

/// The `rank`-th ordered selection of `k` distinct indices out of `0..n`, in
/// lexicographic order.
fn unrank_permutation(n: usize, k: usize, mut rank: u64) -> Vec<usize> {
    let mut available: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let block = permutations(n - j - 1, k - j - 1);
        let pick = (rank / block) as usize;
        rank %= block;
        out.push(available.remove(pick));
    }
    out
}

/// Stream id for pipeline `index` of a given arity.
fn stream_id(arity: usize, index: u64) -> u64 {
    ((arity as u64) << 48) | index
}

/// Emits `count` pipelines of `arity` variable ops.
///
/// Op combinations are ordered selections without repeats, visited in
/// lexicographic catalog order and cycled from the start once exhausted.
pub fn enumerate_pipelines(catalog: &Catalog, arity: usize, count: usize, seed: u64) -> Result<Vec<PipelineSpec>, SpaceError> {
    if !(MIN_ARITY..=MAX_ARITY).contains(&arity) {
        return Err(SpaceError::ArityOutOfRange(arity));
    }
    if count == 0 {
        return Err(SpaceError::ZeroCount);
    }
    let m = catalog.ops.len();
    if m < arity {
        return Err(SpaceError::CatalogTooSmall { ops: m, arity });
    }
    let space = permutations(m, arity);
    let mut out = Vec::with_capacity(count);
    for index in 0..count as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id(arity, index));
        let ops = unrank_permutation(m, arity, index % space)
            .into_iter()
            .map(|i| {
                let spec = &catalog.ops[i];
                BoundOp { op: spec.name.clone(), values: spec.sample_values(&mut rng) }
            })
            .collect();
        out.push(PipelineSpec { variable_ops: ops, fixed_tail: catalog.tail.clone(), rng_seed: seed, index });
    }
    Ok(out)
}

/// Assembles a `transform` function from already-rendered variable calls and
/// the tail. Calls are given without the module prefix.
pub fn render_compose(variable_calls: &[String], tail: &FixedTail, tail_resize: (u32, u32)) -> String {
    let mut body = String::new();
    for call in variable_calls {
        body.push_str(&format!("        {MODULE_ALIAS}.{call},\n"));
    }
    for call in tail.render_with_resize(tail_resize) {
        body.push_str(&format!("        {call},\n"));
    }
    format!("{IMPORT_LINE}\n\n\ndef transform():\n    return {MODULE_ALIAS}.Compose([\n{body}    ])\n")
}

pub fn render_pipeline(catalog: &Catalog, pipeline: &PipelineSpec) -> Result<String, SpaceError> {
    let mut calls = Vec::with_capacity(pipeline.arity());
    for bound in &pipeline.variable_ops {
        let spec = catalog.op(&bound.op).ok_or_else(|| SpaceError::UnknownOp(bound.op.clone()))?;
        calls.push(spec.render(&bound.values)?);
    }
    Ok(render_compose(&calls, &pipeline.fixed_tail, pipeline.fixed_tail.resize))
}

/// Output file name for a rendered brute-force pipeline.
pub fn candidate_file_name(arity: usize, index: u64) -> String {
    format!("bf_{arity}_{index}.txt")
}
