//! Model zoo (MLP, LeNet, a width/depth ladder of small CNNs), the named
//! parameter registry and the checkpoint container.

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::container::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Lenet,
    /// The capacity ladder: `depth` 3×3 convolutions in two pooled stages,
    /// channel widths `8·width` and `16·width`.
    Conv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Input shape `[C, H, W]`.
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(default = "one")]
    pub width: usize,
    #[serde(default = "two")]
    pub depth: usize,
    /// Hidden layer sizes, MLP only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hidden: Vec<usize>,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl ModelSpec {
    pub fn mlp(input: [usize; 3], hidden: &[usize], classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp,
            input,
            classes,
            width: 1,
            depth: hidden.len(),
            hidden: hidden.to_vec(),
        }
    }

    pub fn lenet(width: usize) -> Self {
        Self {
            arch: Architecture::Lenet,
            input: [1, 28, 28],
            classes: 10,
            width,
            depth: 2,
            hidden: Vec::new(),
        }
    }

    pub fn conv(depth: usize, width: usize) -> Self {
        Self {
            arch: Architecture::Conv,
            input: [1, 28, 28],
            classes: 10,
            width,
            depth,
            hidden: Vec::new(),
        }
    }

    /// Short identifier such as `lenet-w1`, `conv4-w2` or `mlp-300-100`.
    pub fn id(&self) -> String {
        match self.arch {
            Architecture::Mlp => {
                let mut s = "mlp".to_string();
                for h in &self.hidden {
                    s.push_str(&format!("-{h}"));
                }
                s
            }
            Architecture::Lenet => format!("lenet-w{}", self.width),
            Architecture::Conv => format!("conv{}-w{}", self.depth, self.width),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("a classifier needs at least two classes"));
        }
        if self.input.contains(&0) {
            return Err(Error::contract(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.width == 0 {
            return Err(Error::contract("width multiplier must be positive"));
        }
        match self.arch {
            Architecture::Mlp if self.hidden.contains(&0) => {
                Err(Error::contract("MLP hidden sizes must be positive"))
            }
            Architecture::Conv if self.depth < 2 || !self.depth.is_multiple_of(2) => Err(Error::contract(
                format!("conv ladder depth must be even and >= 2, got {}", self.depth),
            )),
            _ => self.layers().map(|_| ()),
        }
    }

    /// Expands a `ModelSpec` into its layer sequence, checking spatial sizes.
    pub fn layers(&self) -> Result<Vec<Layer>> {
        let [_, h, w] = self.input;
        let mut layers = Vec::new();
        match self.arch {
            Architecture::Mlp => {
                layers.push(Layer::Flatten);
                for (i, &hdim) in self.hidden.iter().enumerate() {
                    layers.push(Layer::Dense {
                        name: format!("fc{}", i + 1),
                        out: hdim,
                    });
                    layers.push(Layer::Relu);
                }
                layers.push(Layer::Dense {
                    name: format!("fc{}", self.hidden.len() + 1),
                    out: self.classes,
                });
            }
            Architecture::Lenet => {
                // conv5(same) -> pool -> conv5(valid) -> pool
                if h % 2 != 0 || w % 2 != 0 || h / 2 < 6 || w / 2 < 6 {
                    return Err(Error::contract(format!(
                        "lenet needs even input extents >= 12, got {h}x{w}"
                    )));
                }
                let wm = self.width;
                layers.extend([
                    Layer::Conv { name: "conv1".into(), out: 6 * wm, kernel: 5, padding: Padding::Same },
                    Layer::Relu,
                    Layer::Pool,
                    Layer::Conv { name: "conv2".into(), out: 16 * wm, kernel: 5, padding: Padding::Valid },
                    Layer::Relu,
                    Layer::Pool,
                    Layer::Flatten,
                    Layer::Dense { name: "fc1".into(), out: 120 * wm },
                    Layer::Relu,
                    Layer::Dense { name: "fc2".into(), out: self.classes },
                ]);
            }
            Architecture::Conv => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::contract(format!(
                        "conv ladder needs input extents divisible by 4, got {h}x{w}"
                    )));
                }
                let per_stage = self.depth / 2;
                let mut idx = 1;
                for stage_width in [8 * self.width, 16 * self.width] {
                    for _ in 0..per_stage {
                        layers.push(Layer::Conv {
                            name: format!("conv{idx}"),
                            out: stage_width,
                            kernel: 3,
                            padding: Padding::Same,
                        });
                        layers.push(Layer::Relu);
                        idx += 1;
                    }
                    layers.push(Layer::Pool);
                }
                layers.extend([
                    Layer::Flatten,
                    Layer::Dense { name: "fc1".into(), out: 64 * self.width },
                    Layer::Relu,
                    Layer::Dense { name: "fc2".into(), out: self.classes },
                ]);
            }
        }
        Ok(layers)
    }

    /// Parameter shapes in registry order: `(name, shape, prunable)`.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>, bool)>> {
        let mut shapes = Vec::new();
        let [mut c, mut h, mut w] = self.input;
        let mut flat: Option<usize> = None;
        for layer in self.layers()? {
            match layer {
                Layer::Conv { name, out, kernel, padding } => {
                    shapes.push((format!("{name}.weight"), vec![out, c, kernel, kernel], true));
                    shapes.push((format!("{name}.bias"), vec![out], false));
                    if padding == Padding::Valid {
                        h -= kernel - 1;
                        w -= kernel - 1;
                    }
                    c = out;
                }
                Layer::Pool => {
                    h /= 2;
                    w /= 2;
                }
                Layer::Flatten => flat = Some(c * h * w),
                Layer::Dense { name, out } => {
                    let fan_in = flat.expect("dense after flatten");
                    shapes.push((format!("{name}.weight"), vec![fan_in, out], true));
                    shapes.push((format!("{name}.bias"), vec![out], false));
                    flat = Some(out);
                }
                Layer::Relu => {}
            }
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv {
        name: String,
        out: usize,
        kernel: usize,
        padding: Padding,
    },
    Dense {
        name: String,
        out: usize,
    },
    Relu,
    Pool,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor<f32>,
    pub prunable: bool,
}

/// Ordered registry of named parameters. Weights are prunable; biases never.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>, prunable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param { value, prunable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Number of named entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn num_prunable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.prunable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Fails unless `other` has the same names, order, shapes and flags.
    pub fn check_aligned(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::contract(format!(
                "registry mismatch: {} vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, a), (nb, b)) in self.entries.iter().zip(&other.entries) {
            if na != nb || a.value.shape() != b.value.shape() || a.prunable != b.prunable {
                return Err(Error::contract(format!(
                    "registry mismatch: `{na}` {:?} vs `{nb}` {:?}",
                    a.value.shape(),
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape` in registry order.
    pub fn record(&self, tape: &mut Tape<f32>, requires_grad: bool) -> Vec<Var> {
        self.entries
            .values()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.all_finite())
    }
}

/// Deterministic He-normal fan-in initialization; biases start at zero.
pub fn init(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape, prunable) in spec.param_shapes()? {
        let value = if prunable {
            let fan_in: usize = if shape.len() == 4 {
                shape[1..].iter().product()
            } else {
                shape[0]
            };
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            Tensor::new(shape, data)?
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, value, prunable)?;
    }
    Ok(params)
}

/// Records the forward pass of `spec` on `tape`. `vars` are the parameter
/// leaves in registry order; returns the logits node.
pub fn forward(tape: &mut Tape<f32>, spec: &ModelSpec, vars: &[Var], input: Var) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1..] != spec.input[..] {
        return Err(Error::Shape {
            op: "predict",
            lhs: shape,
            rhs: spec.input.to_vec(),
        });
    }
    let mut params = vars.iter().copied();
    let mut next = |what: &str| {
        params
            .next()
            .ok_or_else(|| Error::contract(format!("missing parameter for {what}")))
    };
    let mut x = input;
    for layer in spec.layers()? {
        x = match layer {
            Layer::Conv { name, padding, .. } => {
                let (k, b) = (next(&name)?, next(&name)?);
                let y = tape.conv2d(x, k, padding)?;
                tape.add_bias(y, b)?
            }
            Layer::Dense { name, .. } => {
                let (wv, b) = (next(&name)?, next(&name)?);
                let y = tape.matmul(x, wv)?;
                tape.add_bias(y, b)?
            }
            Layer::Relu => tape.relu(x)?,
            Layer::Pool => tape.maxpool2x2(x)?,
            Layer::Flatten => tape.flatten(x)?,
        };
    }
    Ok(x)
}

/// Logits `(batch, classes)` for `batch` of shape `(batch, C, H, W)`.
pub fn predict(params: &ParamSet, spec: &ModelSpec, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, false);
    let x = tape.leaf(batch.clone(), false);
    let logits = forward(&mut tape, spec, &vars, x)?;
    Ok(tape.value(logits).clone())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"BTCK";
const CHECKPOINT_VERSION: u16 = 1;

/// Serialized model: spec, init seed and every named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&self.spec.id());
        w.str(&serde_json::to_string(&self.spec).expect("spec serializes"));
        w.u64(self.seed);
        write_params(&mut w, &self.params);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, origin)?;
        let id = r.str()?;
        let spec: ModelSpec = serde_json::from_str(&r.str()?)?;
        if spec.id() != id {
            return Err(r.invalid(&format!("spec id `{id}` disagrees with stored spec")));
        }
        let seed = r.u64()?;
        let params = read_params(&mut r)?;
        r.expect_end()?;
        Ok(Self { spec, seed, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = container::read_file(path)?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn write_params(w: &mut Writer, params: &ParamSet) {
    w.u32(params.len() as u32);
    for (name, p) in params.iter() {
        w.str(name);
        w.u8(p.prunable as u8);
        w.tensor(&p.value);
    }
}

pub(crate) fn read_params(r: &mut Reader<'_>) -> Result<ParamSet> {
    let n = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name = r.str()?;
        let prunable = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.invalid(&format!("bad prunable flag {other}"))),
        };
        let value = r.tensor::<f32>()?;
        params
            .insert(name, value, prunable)
            .map_err(|e| r.invalid(&e.to_string()))?;
    }
    Ok(params)
}
