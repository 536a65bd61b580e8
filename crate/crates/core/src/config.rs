//! Network descriptions: strict JSON parsing, shape inference and variant
//! substitution.
//!
//! ```json
//! {
//!   "name": "tiny",
//!   "input": {"channels": 8, "disparity": 12, "height": 16, "width": 32},
//!   "layers": [
//!     {"id": "c1", "kind": "conv3d", "variant": "full", "k": 3, "stride": 2,
//!      "out_channels": 16, "bias": false, "bn": true},
//!     {"id": "up", "kind": "deconv3d", "variant": "full", "k": [3, 4, 4],
//!      "stride": 2, "out_channels": 8, "bias": false, "bn": true,
//!      "output_padding": 0, "concat_from": "input"}
//!   ],
//!   "fixed_costs": [{"name": "backbone", "stage": "2d", "params": 1000, "macs": 50000}]
//! }
//! ```
//!
//! Layers read the previous layer's output unless `input_from` names an
//! earlier layer (or `"input"`). `concat_from` appends another tensor's
//! channels to that input; `adds_from` marks a residual sum with a tensor of
//! the output's shape. `in_channels`, when given, must match the inferred
//! channel count.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::conv::{deconv_extent, strided_extent, BankSpec, Kernel3, VariantKind};
use crate::error::{ensure, Error, Result};
use crate::tensor::Shape4;

/// Reference name for the network input in `input_from` / `concat_from` / `adds_from`.
pub const INPUT_ID: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv3d,
    Deconv3d,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv3d => "conv3d",
            LayerKind::Deconv3d => "deconv3d",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub variant: VariantKind,
    pub kernel: Kernel3,
    pub stride: usize,
    pub out_channels: usize,
    pub bias: bool,
    pub bn: bool,
    pub in_channels: Option<usize>,
    pub output_padding: Option<usize>,
    pub input_from: Option<String>,
    pub concat_from: Option<String>,
    pub adds_from: Option<String>,
}

impl LayerSpec {
    /// A stride-1 convolution reading the previous layer.
    pub fn conv(id: &str, variant: VariantKind, k: usize, out_channels: usize) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            kind: LayerKind::Conv3d,
            variant,
            kernel: Kernel3::cube(k)?,
            stride: 1,
            out_channels,
            bias: false,
            bn: false,
            in_channels: None,
            output_padding: None,
            input_from: None,
            concat_from: None,
            adds_from: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        ensure!(!id.is_empty(), "layer id must not be empty");
        ensure!(id != INPUT_ID, "layer id `{INPUT_ID}` is reserved for the network input");
        ensure!(self.stride >= 1, "layer `{id}`: field `stride` must be >= 1");
        ensure!(self.out_channels >= 1, "layer `{id}`: field `out_channels` must be >= 1");
        if self.kind == LayerKind::Deconv3d {
            ensure!(
                self.variant == VariantKind::Full,
                "layer `{id}`: field `variant`: deconv3d supports only `full`, got `{}`",
                self.variant
            );
            if let Some(op) = self.output_padding {
                ensure!(
                    op < self.stride,
                    "layer `{id}`: field `output_padding` ({op}) must be smaller than stride ({})",
                    self.stride
                );
            }
        } else {
            ensure!(
                self.output_padding.is_none(),
                "layer `{id}`: field `output_padding` is only valid on deconv3d layers"
            );
        }
        Ok(())
    }

    /// Output shape for input `x`, without checking the variant's channel rules.
    pub fn output_shape(&self, x: Shape4) -> Result<Shape4> {
        let sp = x.spatial();
        let k = self.kernel.dims();
        let mut out = [0; 3];
        for i in 0..3 {
            out[i] = match self.kind {
                LayerKind::Conv3d => strided_extent(sp[i], self.stride),
                LayerKind::Deconv3d => deconv_extent(sp[i], k[i], self.stride, self.output_padding)
                    .map_err(|e| Error::validation(format!("layer `{}`: {e}", self.id)))?,
            };
        }
        Ok(Shape4::with_spatial(self.out_channels, out))
    }

    /// Weight allocation for this layer applied to input `x`.
    pub fn bank_spec(&self, x: Shape4) -> BankSpec {
        let d_out = strided_extent(x.d, self.stride);
        BankSpec::new(self.variant, x.c, self.out_channels, self.kernel)
            .with_disparity(x.d, d_out)
            .with_bias(self.bias)
            .with_bn(self.bn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Stage {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "other")]
    Other,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::TwoD => "2d",
            Stage::ThreeD => "3d",
            Stage::Other => "other",
        })
    }
}

/// Cost of a network part that is not modeled layer by layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FixedCost {
    pub name: String,
    pub stage: Stage,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub name: String,
    pub input: Shape4,
    pub layers: Vec<LayerSpec>,
    pub fixed_costs: Vec<FixedCost>,
}

/// Input and output shape of one layer after inference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShapes {
    pub id: String,
    pub input: Shape4,
    pub output: Shape4,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.name.is_empty(), "field `name` must not be empty");
        ensure!(!self.layers.is_empty(), "field `layers` must contain at least one layer");
        self.input.validate()?;
        let mut seen = HashSet::new();
        for l in &self.layers {
            l.validate()?;
            ensure!(seen.insert(l.id.as_str()), "duplicate layer id `{}`", l.id);
        }
        self.infer_shapes()?;
        Ok(())
    }

    /// Per-layer input/output shapes, checking every channel and spatial join.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShapes>> {
        let mut known: HashMap<&str, Shape4> = HashMap::new();
        known.insert(INPUT_ID, self.input);
        let mut prev = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let id = &l.id;
            let lookup = |field: &str, r: &str| -> Result<Shape4> {
                known.get(r).copied().ok_or_else(|| {
                    Error::validation(format!("layer `{id}`: field `{field}` references unknown or later layer `{r}`"))
                })
            };
            let mut x = match &l.input_from {
                Some(r) => lookup("input_from", r)?,
                None => prev,
            };
            if let Some(r) = &l.concat_from {
                let other = lookup("concat_from", r)?;
                ensure!(
                    other.spatial() == x.spatial(),
                    "layer `{id}`: field `concat_from`: `{r}` has shape {other}, which cannot be concatenated with input {x}"
                );
                x.c += other.c;
            }
            if let Some(c) = l.in_channels {
                ensure!(
                    c == x.c,
                    "layer `{id}`: field `in_channels`: declared {c} but the preceding output has {} channels",
                    x.c
                );
            }
            if l.variant == VariantKind::DwSC {
                ensure!(
                    l.out_channels == x.c,
                    "layer `{id}`: DwSC preserves channels, so out_channels ({}) must equal in_channels ({})",
                    l.out_channels,
                    x.c
                );
            }
            let y = l.output_shape(x)?;
            if let Some(r) = &l.adds_from {
                let other = lookup("adds_from", r)?;
                ensure!(
                    other == y,
                    "layer `{id}`: field `adds_from`: `{r}` has shape {other} but the layer output is {y}"
                );
            }
            known.insert(id, y);
            prev = y;
            out.push(LayerShapes { id: id.clone(), input: x, output: y });
        }
        Ok(out)
    }

    /// Replace the variant of every conv3d layer; deconv3d layers stay full.
    pub fn substitute_variant(&self, target: VariantKind) -> Result<Self> {
        let mut cfg = self.clone();
        for l in cfg.layers.iter_mut().filter(|l| l.kind == LayerKind::Conv3d) {
            l.variant = target;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_input(&self, input: Shape4) -> Result<Self> {
        let cfg = Self { input, ..self.clone() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }

    /// Canonical JSON text in the documented schema.
    pub fn to_json(&self) -> String {
        let doc = ConfigJson {
            name: &self.name,
            input: InputJson {
                channels: self.input.c,
                disparity: self.input.d,
                height: self.input.h,
                width: self.input.w,
            },
            layers: self.layers.iter().map(LayerJson::from).collect(),
            fixed_costs: &self.fixed_costs,
        };
        serde_json::to_string_pretty(&doc).expect("config serializes") + "\n"
    }
}

#[derive(Serialize)]
struct ConfigJson<'a> {
    name: &'a str,
    input: InputJson,
    layers: Vec<LayerJson<'a>>,
    #[serde(skip_serializing_if = "<[FixedCost]>::is_empty")]
    fixed_costs: &'a [FixedCost],
}

#[derive(Serialize)]
struct InputJson {
    channels: usize,
    disparity: usize,
    height: usize,
    width: usize,
}

#[derive(Serialize)]
#[serde(untagged)]
enum KernelJson {
    Cube(usize),
    Dims([usize; 3]),
}

#[derive(Serialize)]
struct LayerJson<'a> {
    id: &'a str,
    kind: LayerKind,
    variant: VariantKind,
    k: KernelJson,
    stride: usize,
    out_channels: usize,
    bias: bool,
    bn: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_from: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    concat_from: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adds_from: Option<&'a str>,
}

impl<'a> From<&'a LayerSpec> for LayerJson<'a> {
    fn from(l: &'a LayerSpec) -> Self {
        Self {
            id: &l.id,
            kind: l.kind,
            variant: l.variant,
            k: if l.kernel.is_cube() { KernelJson::Cube(l.kernel.kd) } else { KernelJson::Dims(l.kernel.dims()) },
            stride: l.stride,
            out_channels: l.out_channels,
            bias: l.bias,
            bn: l.bn,
            in_channels: l.in_channels,
            output_padding: l.output_padding,
            input_from: l.input_from.as_deref(),
            concat_from: l.concat_from.as_deref(),
            adds_from: l.adds_from.as_deref(),
        }
    }
}

/// Field access on one JSON object that records which keys were used, so
/// leftovers can be reported as unknown.
struct Fields<'a> {
    map: &'a Map<String, Value>,
    ctx: String,
    used: HashSet<&'static str>,
}

impl<'a> Fields<'a> {
    fn new(v: &'a Value, ctx: String) -> Result<Self> {
        let map = v
            .as_object()
            .ok_or_else(|| Error::validation(format!("{ctx}: expected a JSON object")))?;
        Ok(Self { map, ctx, used: HashSet::new() })
    }

    fn get(&mut self, key: &'static str) -> Option<&'a Value> {
        self.used.insert(key);
        self.map.get(key)
    }

    fn err(&self, key: &str, msg: impl fmt::Display) -> Error {
        Error::validation(format!("{}: field `{key}` {msg}", self.ctx))
    }

    fn req(&mut self, key: &'static str) -> Result<&'a Value> {
        self.get(key).ok_or_else(|| self.err(key, "is missing"))
    }

    fn string(&mut self, key: &'static str) -> Result<String> {
        let v = self.req(key)?;
        v.as_str().map(str::to_string).ok_or_else(|| self.err(key, "must be a string"))
    }

    fn opt_string(&mut self, key: &'static str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.as_str().map(|s| Some(s.to_string())).ok_or_else(|| self.err(key, "must be a string")),
        }
    }

    fn as_uint(&self, key: &str, v: &Value) -> Result<u64> {
        v.as_u64().ok_or_else(|| self.err(key, format!("must be a non-negative integer, got {v}")))
    }

    fn positive(&mut self, key: &'static str) -> Result<usize> {
        let v = self.req(key)?;
        let n = self.as_uint(key, v)?;
        if n == 0 {
            return Err(self.err(key, "must be >= 1"));
        }
        usize::try_from(n).map_err(|_| self.err(key, "is too large"))
    }

    fn opt_uint(&mut self, key: &'static str) -> Result<Option<usize>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => {
                let n = self.as_uint(key, v)?;
                usize::try_from(n).map(Some).map_err(|_| self.err(key, "is too large"))
            }
        }
    }

    fn uint64(&mut self, key: &'static str) -> Result<u64> {
        let v = self.req(key)?;
        self.as_uint(key, v)
    }

    fn boolean(&mut self, key: &'static str) -> Result<bool> {
        let v = self.req(key)?;
        v.as_bool().ok_or_else(|| self.err(key, "must be true or false"))
    }

    fn kernel(&mut self, key: &'static str) -> Result<Kernel3> {
        let v = self.req(key)?;
        let dims: Vec<u64> = match v {
            Value::Array(a) => a.iter().map(|x| self.as_uint(key, x)).collect::<Result<_>>()?,
            other => vec![self.as_uint(key, other)?; 3],
        };
        if dims.len() != 3 || dims.contains(&0) {
            return Err(self.err(key, "must be a positive integer or an array [kd, kh, kw] of positive integers"));
        }
        Kernel3::new(dims[0] as usize, dims[1] as usize, dims[2] as usize)
    }

    fn finish(self) -> Result<()> {
        let mut unknown: Vec<&String> = self.map.keys().filter(|k| !self.used.contains(k.as_str())).collect();
        unknown.sort();
        match unknown.first() {
            None => Ok(()),
            Some(k) => Err(Error::validation(format!("{}: unknown field `{k}`", self.ctx))),
        }
    }
}

fn parse_layer(v: &Value, index: usize) -> Result<LayerSpec> {
    // The id comes first so every later diagnostic can name the layer.
    let id = v
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::validation(format!("layers[{index}]: field `id` is missing or not a string")))?
        .to_string();
    let mut f = Fields::new(v, format!("layer `{id}`"))?;
    f.get("id");
    let kind = match f.string("kind")?.as_str() {
        "conv3d" => LayerKind::Conv3d,
        "deconv3d" => LayerKind::Deconv3d,
        other => return Err(f.err("kind", format!("has unknown value `{other}` (expected conv3d or deconv3d)"))),
    };
    let variant_text = f.string("variant")?;
    let variant = variant_text
        .parse::<VariantKind>()
        .map_err(|_| f.err("variant", format!("has unknown value `{variant_text}` (expected full, fwsc, dwsc or fdwsc)")))?;
    let layer = LayerSpec {
        kind,
        variant,
        kernel: f.kernel("k")?,
        stride: f.positive("stride")?,
        out_channels: f.positive("out_channels")?,
        bias: f.boolean("bias")?,
        bn: f.boolean("bn")?,
        in_channels: f.opt_uint("in_channels")?,
        output_padding: f.opt_uint("output_padding")?,
        input_from: f.opt_string("input_from")?,
        concat_from: f.opt_string("concat_from")?,
        adds_from: f.opt_string("adds_from")?,
        id,
    };
    f.finish()?;
    layer.validate()?;
    Ok(layer)
}

fn parse_fixed(v: &Value, index: usize) -> Result<FixedCost> {
    let mut f = Fields::new(v, format!("fixed_costs[{index}]"))?;
    let name = f.string("name")?;
    let stage = match f.string("stage")?.as_str() {
        "2d" => Stage::TwoD,
        "3d" => Stage::ThreeD,
        "other" => Stage::Other,
        s => return Err(f.err("stage", format!("has unknown value `{s}` (expected 2d, 3d or other)"))),
    };
    let cost = FixedCost { name, stage, params: f.uint64("params")?, macs: f.uint64("macs")? };
    f.finish()?;
    Ok(cost)
}

/// Parse and fully validate a config document.
pub fn parse_config(text: &str) -> Result<NetworkConfig> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::validation(format!("config syntax error: {e}")))?;
    let mut f = Fields::new(&root, "config".into())?;
    let name = f.string("name")?;
    let input = {
        let v = f.req("input")?;
        let mut g = Fields::new(v, "config: field `input`".into())?;
        let s = Shape4 {
            c: g.positive("channels")?,
            d: g.positive("disparity")?,
            h: g.positive("height")?,
            w: g.positive("width")?,
        };
        g.finish()?;
        s
    };
    let layers = f
        .req("layers")?
        .as_array()
        .ok_or_else(|| Error::validation("config: field `layers` must be an array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| parse_layer(v, i))
        .collect::<Result<Vec<_>>>()?;
    let fixed_costs = match f.get("fixed_costs") {
        None => Vec::new(),
        Some(v) => v
            .as_array()
            .ok_or_else(|| Error::validation("config: field `fixed_costs` must be an array"))?
            .iter()
            .enumerate()
            .map(|(i, v)| parse_fixed(v, i))
            .collect::<Result<Vec<_>>>()?,
    };
    f.finish()?;
    let cfg = NetworkConfig { name, input, layers, fixed_costs };
    cfg.validate()?;
    Ok(cfg)
}
