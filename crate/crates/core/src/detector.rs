//! A small FCOS-style anchor-free detector.
//!
//! Layout: a backbone of named stages (each a run of 3×3 convs, the first
//! strided), a shared head trunk, then two 1×1 branches: per-class logits
//! and four box distances per output cell. Stage boundaries are named
//! `input` (also accepted as `none`) followed by the stage names; they are
//! the places where the network can be frozen or split into lower layers
//! `f` and upper layers `h`.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Tape, Tensor};

/// Bias given to freshly created class channels: σ(−4) ≈ 0.018.
pub const NEW_CLASS_BIAS: f64 = -4.0;
/// Initial box-branch bias, in stride units, so the relu starts in its live region.
const REG_BIAS_INIT: f64 = 1.0;
/// Fixed input normalization applied before the first conv: (x − mean)·scale.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_SCALE: f64 = 4.0;
/// Half-width of the uniform init used for class-branch weights.
const CLS_WEIGHT_INIT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    /// Output channels of each 3×3 conv; the first conv has stride 2.
    pub convs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Output channels of each 3×3 trunk conv.
    pub head_trunk: Vec<usize>,
    pub num_classes: usize,
    pub grid: usize,
}

impl DetectorSpec {
    /// Three stages of two convs (8, 16, 32 channels), a two-conv trunk at 32
    /// channels and an 8×8 grid over a 64×64 RGB input.
    pub fn toy(num_classes: usize) -> Self {
        let stage = |name: &str, c: usize| StageSpec { name: name.into(), convs: vec![c, c] };
        DetectorSpec {
            input_size: 64,
            in_channels: 3,
            stages: vec![stage("stage1", 8), stage("stage2", 16), stage("stage3", 32)],
            head_trunk: vec![32, 32],
            num_classes,
            grid: 8,
        }
    }

    pub fn stride(&self) -> usize {
        self.input_size / self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("detector needs at least one class"));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.convs.is_empty()) {
            return Err(Error::invalid("every stage needs at least one conv"));
        }
        if self.head_trunk.is_empty() {
            return Err(Error::invalid("head trunk needs at least one conv"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.stages {
            if s.name == "input" || s.name == "none" || !seen.insert(s.name.as_str()) {
                return Err(Error::invalid(format!("stage name '{}' is reserved or repeated", s.name)));
            }
        }
        let mut size = self.input_size;
        for _ in &self.stages {
            size = (size + 2 - 3) / 2 + 1;
        }
        if size != self.grid || self.input_size % self.grid != 0 {
            return Err(Error::invalid(format!(
                "backbone maps {} px to a {size}×{size} grid, spec says {}",
                self.input_size, self.grid
            )));
        }
        Ok(())
    }

    /// Names of every boundary, bottom to top.
    pub fn boundary_names(&self) -> Vec<String> {
        std::iter::once("input".to_string()).chain(self.stages.iter().map(|s| s.name.clone())).collect()
    }

    pub fn boundary(&self, name: &str) -> Result<Boundary> {
        if name == "input" || name == "none" {
            return Ok(Boundary(0));
        }
        self.stages
            .iter()
            .position(|s| s.name == name)
            .map(|i| Boundary(i + 1))
            .ok_or_else(|| Error::invalid(format!("unknown stage boundary '{name}'")))
    }

    pub fn boundary_name(&self, b: Boundary) -> &str {
        if b.0 == 0 {
            "input"
        } else {
            &self.stages[b.0 - 1].name
        }
    }

    pub fn top_boundary(&self) -> Boundary {
        Boundary(self.stages.len())
    }
}

/// Number of backbone stages below a boundary; `Boundary(0)` is the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Boundary(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Stage(usize),
    Trunk,
    ClassBranch,
    BoxBranch,
}

/// Static geometry of one conv layer for a single example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub segment: Segment,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_hw: usize,
    pub out_hw: usize,
    pub relu: bool,
}

impl LayerInfo {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> u64 {
        (self.cout * self.cin * self.kernel * self.kernel + self.cout) as u64
    }

    /// Multiply-accumulates for one example: `Cout·H'·W'·Cin·kh·kw`.
    pub fn macs(&self) -> u64 {
        (self.cout * self.out_hw * self.out_hw * self.cin * self.kernel * self.kernel) as u64
    }

    /// True when the layer sits below `b` (part of the lower layers).
    pub fn below(&self, b: Boundary) -> bool {
        matches!(self.segment, Segment::Stage(i) if i < b.0)
    }
}

/// Ordered named parameter map.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: String, t: Tensor) {
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Registers every tensor on `tape`; trainable ones become leaves.
    pub fn bind(&self, tape: &Tape) -> ParamStore {
        let mut out = ParamStore::default();
        for (n, t) in self.iter() {
            out.insert(n.to_string(), tape.watch(t));
        }
        out
    }

    /// Bitwise equality of names, order, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// Pre-sigmoid scores, `[B, C, S, S]`; channel `i` is global class `i + 1`.
    pub class_logits: Tensor,
    /// Left/top/right/bottom distances in pixels, non-negative, `[B, 4, S, S]`.
    pub box_regress: Tensor,
    /// Trunk output shared by both branches, `[B, F, S, S]`.
    pub trunk_features: Tensor,
}

#[derive(Clone, Debug)]
pub struct Latent {
    pub features: Tensor,
    pub split: Boundary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Layer geometry shared by a detector and its teacher snapshots.
#[derive(Clone, Debug)]
pub struct Architecture {
    spec: DetectorSpec,
    layers: Vec<LayerInfo>,
}

impl Architecture {
    pub fn new(spec: DetectorSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut cin = spec.in_channels;
        let mut hw = spec.input_size;
        for (si, stage) in spec.stages.iter().enumerate() {
            for (ci, &cout) in stage.convs.iter().enumerate() {
                let stride = if ci == 0 { 2 } else { 1 };
                let out_hw = (hw + 2 - 3) / stride + 1;
                layers.push(LayerInfo {
                    name: format!("{}.conv{}", stage.name, ci + 1),
                    segment: Segment::Stage(si),
                    cin,
                    cout,
                    kernel: 3,
                    stride,
                    pad: 1,
                    in_hw: hw,
                    out_hw,
                    relu: true,
                });
                cin = cout;
                hw = out_hw;
            }
        }
        for (ti, &cout) in spec.head_trunk.iter().enumerate() {
            layers.push(LayerInfo {
                name: format!("trunk.conv{}", ti + 1),
                segment: Segment::Trunk,
                cin,
                cout,
                kernel: 3,
                stride: 1,
                pad: 1,
                in_hw: hw,
                out_hw: hw,
                relu: true,
            });
            cin = cout;
        }
        let branch = |name: &str, segment, cout| LayerInfo {
            name: name.into(),
            segment,
            cin,
            cout,
            kernel: 1,
            stride: 1,
            pad: 0,
            in_hw: hw,
            out_hw: hw,
            relu: false,
        };
        layers.push(branch("head.cls", Segment::ClassBranch, spec.num_classes));
        layers.push(branch("head.reg", Segment::BoxBranch, 4));
        Ok(Architecture { spec, layers })
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    fn conv(&self, tape: &Tape, params: &ParamStore, layer: &LayerInfo, x: &Tensor) -> Result<Tensor> {
        let w = params.get(&layer.weight_name())?;
        let b = params.get(&layer.bias_name())?;
        let centered;
        let x = if layer.name == self.layers[0].name {
            centered = tape.add_scalar(&tape.scale(x, INPUT_SCALE), -INPUT_MEAN * INPUT_SCALE);
            &centered
        } else {
            x
        };
        let y = tape.add_channel_bias(&tape.conv2d(x, w, layer.stride, layer.pad)?, b)?;
        Ok(if layer.relu { tape.relu(&y) } else { y })
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = &self.spec;
        let ok = images.rank() == 4
            && images.shape()[1] == s.in_channels
            && images.shape()[2] == s.input_size
            && images.shape()[3] == s.input_size;
        if !ok {
            return Err(Error::shape(format!(
                "expected images [B, {}, {}, {}], got {:?}",
                s.in_channels,
                s.input_size,
                s.input_size,
                images.shape()
            )));
        }
        Ok(())
    }

    /// Expected `[C, H, W]` of a latent produced at `split`.
    pub fn latent_shape(&self, split: Boundary) -> [usize; 3] {
        match self.layers.iter().filter(|l| l.below(split)).last() {
            Some(l) => [l.cout, l.out_hw, l.out_hw],
            None => [self.spec.in_channels, self.spec.input_size, self.spec.input_size],
        }
    }

    pub fn run_lower(&self, tape: &Tape, params: &ParamStore, images: &Tensor, split: Boundary) -> Result<Latent> {
        self.check_images(images)?;
        let mut x = images.clone();
        for layer in self.layers.iter().filter(|l| l.below(split)) {
            x = self.conv(tape, params, layer, &x)?;
        }
        Ok(Latent { features: x, split })
    }

    pub fn run_upper(&self, tape: &Tape, params: &ParamStore, z: &Latent) -> Result<HeadOutputs> {
        let expected = self.latent_shape(z.split);
        let f = &z.features;
        if f.rank() != 4 || f.shape()[1..] != expected {
            return Err(Error::shape(format!(
                "latent {:?} does not match split '{}' (expected [B, {}, {}, {}])",
                f.shape(),
                self.spec.boundary_name(z.split),
                expected[0],
                expected[1],
                expected[2]
            )));
        }
        let mut x = f.clone();
        let mut trunk = None;
        let mut logits = None;
        let mut boxes = None;
        for layer in self.layers.iter().filter(|l| !l.below(z.split)) {
            match layer.segment {
                Segment::Stage(_) | Segment::Trunk => {
                    x = self.conv(tape, params, layer, &x)?;
                    if layer.segment == Segment::Trunk {
                        trunk = Some(x.clone());
                    }
                }
                Segment::ClassBranch => logits = Some(self.conv(tape, params, layer, &x)?),
                Segment::BoxBranch => {
                    let raw = self.conv(tape, params, layer, &x)?;
                    boxes = Some(tape.scale(&tape.relu(&raw), self.spec.stride() as f64));
                }
            }
        }
        match (logits, boxes, trunk) {
            (Some(class_logits), Some(box_regress), Some(trunk_features)) => {
                Ok(HeadOutputs { class_logits, box_regress, trunk_features })
            }
            _ => Err(Error::invalid("architecture is missing a head layer")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    arch: Architecture,
    params: ParamStore,
    frozen: Boundary,
    split: Boundary,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Detector {
    /// Kaiming-uniform convs seeded from `seed`; deterministic given `(spec, seed)`.
    /// Nothing is frozen and the latent split sits at the backbone top.
    pub fn build(spec: DetectorSpec, seed: u64) -> Result<Self> {
        let arch = Architecture::new(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for layer in &arch.layers {
            let fan_in = layer.cin * layer.kernel * layer.kernel;
            let n = layer.cout * fan_in;
            let (w, b) = match layer.segment {
                Segment::ClassBranch => (
                    (0..n).map(|_| rng.random_range(-CLS_WEIGHT_INIT..CLS_WEIGHT_INIT)).collect(),
                    vec![NEW_CLASS_BIAS; layer.cout],
                ),
                Segment::BoxBranch => (kaiming_uniform(&mut rng, n, fan_in), vec![REG_BIAS_INIT; layer.cout]),
                _ => (kaiming_uniform(&mut rng, n, fan_in), vec![0.0; layer.cout]),
            };
            let shape = [layer.cout, layer.cin, layer.kernel, layer.kernel];
            params.insert(layer.weight_name(), Tensor::new(&shape, w)?.with_requires_grad(true));
            params.insert(layer.bias_name(), Tensor::new(&[layer.cout], b)?.with_requires_grad(true));
        }
        let split = arch.spec.top_boundary();
        Ok(Detector { arch, params, frozen: Boundary(0), split })
    }

    /// Reassembles a detector from stored parts, checking every parameter shape.
    pub fn from_parts(spec: DetectorSpec, params: ParamStore, frozen: Boundary, split: Boundary) -> Result<Self> {
        let arch = Architecture::new(spec)?;
        let mut d = Detector { arch, params: ParamStore::default(), frozen, split };
        if frozen > d.spec().top_boundary() || split > d.spec().top_boundary() {
            return Err(Error::invalid("boundary beyond the backbone top"));
        }
        for layer in d.arch.layers.clone() {
            let expect_w = [layer.cout, layer.cin, layer.kernel, layer.kernel];
            let w = params.get(&layer.weight_name())?;
            let b = params.get(&layer.bias_name())?;
            if w.shape() != expect_w || b.shape() != [layer.cout] {
                return Err(Error::shape(format!("parameter shapes of '{}' do not match the spec", layer.name)));
            }
            d.params.insert(layer.weight_name(), w.detach());
            d.params.insert(layer.bias_name(), b.detach());
        }
        d.apply_freeze();
        Ok(d)
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.arch.spec
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.arch.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.spec.num_classes
    }

    pub fn frozen_boundary(&self) -> Boundary {
        self.frozen
    }

    pub fn split_point(&self) -> Boundary {
        self.split
    }

    pub fn total_params(&self) -> u64 {
        self.params.numel()
    }

    pub fn trainable_params(&self) -> u64 {
        self.params.iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.numel() as u64).sum()
    }

    /// Parameters strictly above `b`, i.e. the upper layers for that split.
    pub fn upper_params(&self, b: Boundary) -> ParamStore {
        let mut out = ParamStore::default();
        for layer in self.layers().iter().filter(|l| !l.below(b)) {
            for name in [layer.weight_name(), layer.bias_name()] {
                out.insert(name.clone(), self.params.get(&name).expect("layer params exist").detach());
            }
        }
        out
    }

    /// Replaces a parameter value, keeping its trainability flag.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let current = self.params.get(name)?;
        if current.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}' has shape {:?}, update has {:?}",
                current.shape(),
                value.shape()
            )));
        }
        let rg = current.requires_grad();
        self.params.insert(name.to_string(), value.with_requires_grad(rg));
        Ok(())
    }

    fn apply_freeze(&mut self) {
        let layers = self.arch.layers.clone();
        for layer in &layers {
            let trainable = !layer.below(self.frozen);
            for name in [layer.weight_name(), layer.bias_name()] {
                let t = self.params.get(&name).expect("layer params exist").clone();
                self.params.insert(name, t.with_requires_grad(trainable));
            }
        }
    }

    /// Freezes every layer below `boundary` ("none"/"input" unfreezes all).
    pub fn set_freeze(&mut self, boundary: &str) -> Result<()> {
        self.frozen = self.spec().boundary(boundary)?;
        self.apply_freeze();
        Ok(())
    }

    pub fn set_freeze_at(&mut self, boundary: Boundary) -> Result<()> {
        let name = self.spec().boundary_name(boundary).to_string();
        self.set_freeze(&name)
    }

    pub fn set_split(&mut self, boundary: &str) -> Result<()> {
        self.split = self.spec().boundary(boundary)?;
        Ok(())
    }

    pub fn set_split_at(&mut self, boundary: Boundary) -> Result<()> {
        let name = self.spec().boundary_name(boundary).to_string();
        self.set_split(&name)
    }

    /// Adds `k` class channels. Existing channels keep their exact weights;
    /// new weights come from `seed` and new biases start at [`NEW_CLASS_BIAS`].
    pub fn expand_head(&mut self, k: usize, seed: u64) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("expand_head needs k >= 1"));
        }
        let old_c = self.num_classes();
        let feat = self.layers().iter().find(|l| l.segment == Segment::ClassBranch).map(|l| l.cin).expect("class branch");
        let w = self.params.get("head.cls.weight")?.clone();
        let b = self.params.get("head.cls.bias")?.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wd = w.data().to_vec();
        wd.extend((0..k * feat).map(|_| rng.random_range(-CLS_WEIGHT_INIT..CLS_WEIGHT_INIT)));
        let mut bd = b.data().to_vec();
        bd.extend(std::iter::repeat_n(NEW_CLASS_BIAS, k));

        let mut spec = self.spec().clone();
        spec.num_classes = old_c + k;
        self.arch = Architecture::new(spec)?;
        let rg = w.requires_grad();
        self.params.insert("head.cls.weight".into(), Tensor::new(&[old_c + k, feat, 1, 1], wd)?.with_requires_grad(rg));
        self.params.insert("head.cls.bias".into(), Tensor::new(&[old_c + k], bd)?.with_requires_grad(rg));
        Ok(())
    }

    /// Lower layers only; detached from any tape when the split is frozen.
    pub fn latent_forward(&self, images: &Tensor) -> Result<Latent> {
        self.latent_forward_on(&Tape::new(), &self.params, images)
    }

    pub fn latent_forward_on(&self, tape: &Tape, params: &ParamStore, images: &Tensor) -> Result<Latent> {
        let z = self.arch.run_lower(tape, params, images, self.split)?;
        if self.split <= self.frozen {
            return Ok(Latent { features: z.features.detach(), split: z.split });
        }
        Ok(z)
    }

    pub fn upper_forward(&self, z: &Latent) -> Result<HeadOutputs> {
        self.upper_forward_on(&Tape::new(), &self.params, z)
    }

    pub fn upper_forward_on(&self, tape: &Tape, params: &ParamStore, z: &Latent) -> Result<HeadOutputs> {
        if z.split != self.split {
            return Err(Error::invalid(format!(
                "latent was produced at '{}' but the detector splits at '{}'",
                self.spec().boundary_name(z.split),
                self.spec().boundary_name(self.split)
            )));
        }
        self.arch.run_upper(tape, params, z)
    }

    pub fn forward(&self, images: &Tensor) -> Result<HeadOutputs> {
        self.forward_on(&Tape::new(), &self.params, images)
    }

    pub fn forward_on(&self, tape: &Tape, params: &ParamStore, images: &Tensor) -> Result<HeadOutputs> {
        let z = self.latent_forward_on(tape, params, images)?;
        self.upper_forward_on(tape, params, &z)
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "detector: {} classes, {} params ({} trainable), frozen below '{}', split at '{}'",
            self.num_classes(),
            self.total_params(),
            self.trainable_params(),
            self.spec().boundary_name(self.frozen),
            self.spec().boundary_name(self.split)
        )
    }
}

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Maximum detections kept per image after NMS.
pub const MAX_DETECTIONS: usize = 100;

/// Decodes head outputs into per-image detections: every (cell, class) whose
/// sigmoid score exceeds `score_thr` yields a box around the cell center
/// `((j + 0.5)·s, (i + 0.5)·s)`, clipped to the canvas, followed by greedy
/// per-class NMS in descending score order.
pub fn decode_detections(out: &HeadOutputs, input_size: usize, score_thr: f64, nms_iou: f64) -> Vec<Vec<Detection>> {
    let s = out.class_logits.shape();
    let (batch, classes, grid) = (s[0], s[1], s[2]);
    let stride = input_size as f64 / grid as f64;
    let canvas = input_size as f64;
    let logits = out.class_logits.data();
    let dist = out.box_regress.data();
    let plane = grid * grid;
    let mut result = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut cands = Vec::new();
        for cell in 0..plane {
            let (i, j) = (cell / grid, cell % grid);
            let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            let d = |k: usize| dist[(b * 4 + k) * plane + cell];
            let bbox = [
                (cx - d(0)).clamp(0.0, canvas),
                (cy - d(1)).clamp(0.0, canvas),
                (cx + d(2)).clamp(0.0, canvas),
                (cy + d(3)).clamp(0.0, canvas),
            ];
            if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
                continue;
            }
            for c in 0..classes {
                let score = sigmoid(logits[(b * classes + c) * plane + cell]);
                if score > score_thr {
                    cands.push(Detection { class_id: c + 1, bbox, score });
                }
            }
        }
        cands.sort_by(|x, y| y.score.total_cmp(&x.score));
        let mut kept: Vec<Detection> = Vec::new();
        for d in cands {
            let suppressed = kept.iter().any(|k| k.class_id == d.class_id && box_iou(&k.bbox, &d.bbox) > nms_iou);
            if !suppressed {
                kept.push(d);
                if kept.len() == MAX_DETECTIONS {
                    break;
                }
            }
        }
        result.push(kept);
    }
    result
}
