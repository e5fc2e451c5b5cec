//! Multi-modal pose regression model: four modality encoders, a fusion
//! strategy (plain concat, concat+MLP, or self-attention), and a linear
//! regression head. Coalitions are realized by zeroing the unified
//! features of absent modalities, so every coalition shares one set of
//! shapes and parameters.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ParamId, Tape, Tensor};

// ── Modalities and coalitions ────────────────────────────────────────

/// One of the four input modalities, in the fixed order R, L, M, W.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModalityId {
    R,
    L,
    M,
    W,
}

pub const ALL_MODALITIES: [ModalityId; 4] = [ModalityId::R, ModalityId::L, ModalityId::M, ModalityId::W];

impl ModalityId {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> ModalityId {
        ALL_MODALITIES[i]
    }

    pub fn as_char(self) -> char {
        match self {
            ModalityId::R => 'R',
            ModalityId::L => 'L',
            ModalityId::M => 'M',
            ModalityId::W => 'W',
        }
    }

    pub fn from_char(c: char) -> Option<ModalityId> {
        match c.to_ascii_uppercase() {
            'R' => Some(ModalityId::R),
            'L' => Some(ModalityId::L),
            'M' => Some(ModalityId::M),
            'W' => Some(ModalityId::W),
            _ => None,
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Fixed-size container with one slot per modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerModality<T>(pub [T; 4]);

impl<T> PerModality<T> {
    pub fn from_fn(mut f: impl FnMut(ModalityId) -> T) -> Self {
        PerModality(ALL_MODALITIES.map(&mut f))
    }

    pub fn map<U>(&self, mut f: impl FnMut(ModalityId, &T) -> U) -> PerModality<U> {
        PerModality(ALL_MODALITIES.map(|m| f(m, &self.0[m.index()])))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModalityId, &T)> {
        ALL_MODALITIES.iter().map(move |&m| (m, &self.0[m.index()]))
    }
}

impl<T> std::ops::Index<ModalityId> for PerModality<T> {
    type Output = T;
    fn index(&self, m: ModalityId) -> &T {
        &self.0[m.index()]
    }
}

impl<T> std::ops::IndexMut<ModalityId> for PerModality<T> {
    fn index_mut(&mut self, m: ModalityId) -> &mut T {
        &mut self.0[m.index()]
    }
}

/// Subset of modalities kept in a coalition, packed into 4 bits
/// (bit i = modality with index i present).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoalitionMask(u8);

impl CoalitionMask {
    pub const EMPTY: CoalitionMask = CoalitionMask(0);
    pub const FULL: CoalitionMask = CoalitionMask(0b1111);

    pub fn from_bits(bits: u8) -> CoalitionMask {
        CoalitionMask(bits & 0b1111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn singleton(m: ModalityId) -> CoalitionMask {
        CoalitionMask(1 << m.index())
    }

    pub fn of(mods: &[ModalityId]) -> CoalitionMask {
        let mut bits = 0;
        for m in mods {
            bits |= 1 << m.index();
        }
        CoalitionMask(bits)
    }

    pub fn contains(self, m: ModalityId) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn with(self, m: ModalityId) -> CoalitionMask {
        CoalitionMask(self.0 | (1 << m.index()))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// All 16 masks, empty first.
    pub fn all() -> impl Iterator<Item = CoalitionMask> {
        (0u8..16).map(CoalitionMask)
    }
}

impl fmt::Display for CoalitionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "-");
        }
        for m in ALL_MODALITIES {
            if self.contains(m) {
                write!(f, "{}", m.as_char())?;
            }
        }
        Ok(())
    }
}

// ── Parameters ───────────────────────────────────────────────────────

/// Which slice of the model a parameter belongs to. Fusion and head
/// parameters are shared across modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Modality(ModalityId),
    Shared,
}

struct ParamEntry {
    path: String,
    group: ParamGroup,
    value: Tensor,
}

/// Registry of all trainable parameters, each tagged with its path and
/// modality group.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    path: e.path.clone(),
                    group: e.group,
                    value: e.value.clone(),
                })
                .collect(),
        }
    }
}

impl ParamStore {
    pub fn add(&mut self, path: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { path: path.into(), group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].path
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.path == path).map(ParamId)
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if value.shape() != entry.value.shape() {
            return Err(Error::ParamShapeMismatch {
                what: "parameter update",
                path: entry.path.clone(),
                expected: entry.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn set_data(&mut self, id: ParamId, data: &[f64]) {
        let entry = &mut self.entries[id.0];
        assert_eq!(entry.value.numel(), data.len());
        entry.value = Tensor::new(entry.value.shape().to_vec(), data.to_vec());
    }

    /// (id, shape) pairs for every parameter, the form `Tape::backward` takes.
    pub fn specs(&self) -> Vec<(ParamId, Vec<usize>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.value.shape().to_vec()))
            .collect()
    }

    /// Deep copy of all values keyed by id.
    pub fn snapshot_values(&self) -> std::collections::BTreeMap<ParamId, Tensor> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.value.clone()))
            .collect()
    }

    /// Overwrite values from a snapshot map (shapes must match).
    pub fn restore_values(&mut self, values: &std::collections::BTreeMap<ParamId, Tensor>) {
        for (&id, v) in values {
            self.set_value(id, v.clone()).expect("snapshot shape mismatch");
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

// ── Model configuration ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Concat,
    ConcatMlp,
    Attention,
}

impl FusionKind {
    pub fn parse(s: &str) -> Result<FusionKind> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "concat_mlp" => Ok(FusionKind::ConcatMlp),
            "attention" => Ok(FusionKind::Attention),
            other => Err(Error::UnknownFusion(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::ConcatMlp => "concat_mlp",
            FusionKind::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input width per modality.
    pub input_dims: PerModality<usize>,
    /// Hidden layer widths of each encoder (relu between layers).
    pub hidden: Vec<usize>,
    /// Common feature dimension d produced by every encoder.
    pub unified_dim: usize,
    /// Number of joints j; the head regresses 3 coordinates per joint.
    pub joints: usize,
    pub fusion: FusionKind,
    /// Self-attention layers when fusion = attention.
    pub attn_layers: usize,
    /// Fixed multiplier on the head output. Targets live at millimeter
    /// scale; letting the head work in unit scale keeps weight travel
    /// (and so Adam convergence) independent of the target units.
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
}

fn default_output_scale() -> f64 {
    100.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dims: PerModality([64, 48, 24, 16]),
            hidden: vec![64, 64],
            unified_dim: 32,
            joints: 17,
            fusion: FusionKind::Concat,
            attn_layers: 2,
            output_scale: default_output_scale(),
        }
    }
}

impl ModelConfig {
    fn fused_dim(&self) -> usize {
        match self.fusion {
            FusionKind::Concat => 4 * self.unified_dim,
            FusionKind::ConcatMlp | FusionKind::Attention => self.unified_dim,
        }
    }
}

// ── Model ────────────────────────────────────────────────────────────

/// Regressed joint positions, shape (batch, joints, 3), millimeters.
#[derive(Debug, Clone)]
pub struct PoseOutput {
    pub values: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnLayer {
    wq: Affine,
    wk: Affine,
    wv: Affine,
    wo: Affine,
}

#[derive(Debug, Clone)]
enum FusionParams {
    Concat,
    ConcatMlp { layers: Vec<Affine> },
    Attention { layers: Vec<AttnLayer> },
}

/// Call counters used by scoring invariants and the overhead profiler.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    pub encodes: AtomicU64,
    pub fuses: AtomicU64,
    pub forwards: AtomicU64,
}

impl Clone for ForwardCounters {
    fn clone(&self) -> Self {
        ForwardCounters {
            encodes: AtomicU64::new(self.encodes.load(Ordering::Relaxed)),
            fuses: AtomicU64::new(self.fuses.load(Ordering::Relaxed)),
            forwards: AtomicU64::new(self.forwards.load(Ordering::Relaxed)),
        }
    }
}

#[derive(Clone)]
pub struct MultiModalModel {
    config: ModelConfig,
    store: ParamStore,
    encoders: PerModality<Vec<Affine>>,
    fusion: FusionParams,
    head: Affine,
    pub counters: ForwardCounters,
}

impl MultiModalModel {
    /// Build with Glorot-uniform weights and zero biases from a seeded
    /// generator; construction order is fixed so seeds reproduce bitwise.
    pub fn new(config: ModelConfig, seed: u64) -> MultiModalModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = config.unified_dim;

        let affine = |store: &mut ParamStore,
                          rng: &mut ChaCha8Rng,
                          path: &str,
                          group: ParamGroup,
                          fan_in: usize,
                          fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
            let w = store.add(format!("{path}.w"), group, Tensor::new(vec![fan_in, fan_out], data));
            let b = store.add(format!("{path}.b"), group, Tensor::zeros(&[fan_out]));
            Affine { w, b }
        };

        let encoders = PerModality::from_fn(|m| {
            let mut dims = vec![config.input_dims[m]];
            dims.extend(&config.hidden);
            dims.push(d);
            let group = ParamGroup::Modality(m);
            (0..dims.len() - 1)
                .map(|i| {
                    affine(
                        &mut store,
                        &mut rng,
                        &format!("encoder.{m}.{i}"),
                        group,
                        dims[i],
                        dims[i + 1],
                    )
                })
                .collect()
        });

        let fusion = match config.fusion {
            FusionKind::Concat => FusionParams::Concat,
            FusionKind::ConcatMlp => {
                let dims = [4 * d, d, d, d];
                let layers = (0..3)
                    .map(|i| {
                        affine(
                            &mut store,
                            &mut rng,
                            &format!("fusion.mlp.{i}"),
                            ParamGroup::Shared,
                            dims[i],
                            dims[i + 1],
                        )
                    })
                    .collect();
                FusionParams::ConcatMlp { layers }
            }
            FusionKind::Attention => {
                let layers = (0..config.attn_layers)
                    .map(|i| AttnLayer {
                        wq: affine(&mut store, &mut rng, &format!("fusion.attn.{i}.q"), ParamGroup::Shared, d, d),
                        wk: affine(&mut store, &mut rng, &format!("fusion.attn.{i}.k"), ParamGroup::Shared, d, d),
                        wv: affine(&mut store, &mut rng, &format!("fusion.attn.{i}.v"), ParamGroup::Shared, d, d),
                        wo: affine(&mut store, &mut rng, &format!("fusion.attn.{i}.o"), ParamGroup::Shared, d, d),
                    })
                    .collect();
                FusionParams::Attention { layers }
            }
        };

        let head = affine(
            &mut store,
            &mut rng,
            "head",
            ParamGroup::Shared,
            config.fused_dim(),
            3 * config.joints,
        );

        MultiModalModel {
            config,
            store,
            encoders,
            fusion,
            head,
            counters: ForwardCounters::default(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter ids of one modality group, or of the shared fusion/head
    /// group. Groups partition the full registry.
    pub fn modality_parameters(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.group(id) == group)
            .collect()
    }

    fn apply_affine(&self, tape: Option<&Tape>, layer: Affine, x: &Tensor) -> Result<Tensor> {
        let w = self.leaf(tape, layer.w);
        let b = self.leaf(tape, layer.b);
        let y = tensor::matmul(tape, x, &w)?;
        let bb = tensor::broadcast(tape, &b, y.shape())?;
        tensor::add(tape, &y, &bb)
    }

    fn leaf(&self, tape: Option<&Tape>, id: ParamId) -> Tensor {
        match tape {
            Some(t) => t.leaf_param(id, self.store.value(id)),
            None => self.store.value(id).clone(),
        }
    }

    /// Run one modality encoder: affine+relu stack ending in the
    /// unifying projection to dimension d.
    pub fn encode(&self, tape: Option<&Tape>, modality: ModalityId, input: &Tensor) -> Result<Tensor> {
        if input.shape().len() != 2 || input.shape()[1] != self.config.input_dims[modality] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: input.shape().to_vec(),
                rhs: vec![input.shape().first().copied().unwrap_or(0), self.config.input_dims[modality]],
            });
        }
        self.counters.encodes.fetch_add(1, Ordering::Relaxed);
        let layers = &self.encoders[modality];
        let mut h = input.clone();
        for (i, layer) in layers.iter().enumerate() {
            h = self.apply_affine(tape, *layer, &h)?;
            if i + 1 < layers.len() {
                h = tensor::relu(tape, &h)?;
            }
        }
        Ok(h)
    }

    pub fn encode_all(&self, tape: Option<&Tape>, inputs: &PerModality<Tensor>) -> Result<PerModality<Tensor>> {
        let mut out = Vec::with_capacity(4);
        for m in ALL_MODALITIES {
            out.push(self.encode(tape, m, &inputs[m])?);
        }
        let mut it = out.into_iter();
        Ok(PerModality([
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ]))
    }

    /// Fuse masked features and regress poses.
    pub fn fuse_predict(
        &self,
        tape: Option<&Tape>,
        masked: &PerModality<Tensor>,
        _mask: CoalitionMask,
    ) -> Result<PoseOutput> {
        self.counters.fuses.fetch_add(1, Ordering::Relaxed);
        let batch = masked[ModalityId::R].shape()[0];
        let d = self.config.unified_dim;
        let refs = [
            &masked[ModalityId::R],
            &masked[ModalityId::L],
            &masked[ModalityId::M],
            &masked[ModalityId::W],
        ];
        let fused = match &self.fusion {
            FusionParams::Concat => tensor::concat_lastdim(tape, &refs)?,
            FusionParams::ConcatMlp { layers } => {
                let mut h = tensor::concat_lastdim(tape, &refs)?;
                for (i, layer) in layers.iter().enumerate() {
                    h = self.apply_affine(tape, *layer, &h)?;
                    if i + 1 < layers.len() {
                        h = tensor::relu(tape, &h)?;
                    }
                }
                h
            }
            FusionParams::Attention { .. } => {
                let x = tensor::concat_lastdim(tape, &refs)?.reshape(&[batch, 4, d]);
                let tokens = self.attention_stack(tape, x)?;
                tensor::mean(tape, &tokens, Some(1))?
            }
        };
        let mut flat = self.apply_affine(tape, self.head, &fused)?;
        if self.config.output_scale != 1.0 {
            let scale = Tensor::full(flat.shape(), self.config.output_scale);
            flat = tensor::mul(tape, &flat, &scale)?;
        }
        Ok(PoseOutput {
            values: flat.reshape(&[batch, self.config.joints, 3]),
        })
    }

    /// Single-head self-attention layers with residual + layernorm,
    /// applied to the (batch, 4, d) token stack.
    fn attention_stack(&self, tape: Option<&Tape>, mut x: Tensor) -> Result<Tensor> {
        let layers = match &self.fusion {
            FusionParams::Attention { layers } => layers,
            _ => unreachable!("attention_stack on non-attention fusion"),
        };
        let d = self.config.unified_dim;
        let batch = x.shape()[0];
        let scale = Tensor::full(&[batch, 4, 4], 1.0 / (d as f64).sqrt());
        for layer in layers {
            let q = self.apply_affine(tape, layer.wq, &x)?;
            let k = self.apply_affine(tape, layer.wk, &x)?;
            let v = self.apply_affine(tape, layer.wv, &x)?;
            let kt = tensor::transpose(tape, &k)?;
            let scores = tensor::mul(tape, &tensor::matmul(tape, &q, &kt)?, &scale)?;
            let attn = tensor::softmax_lastdim(tape, &scores)?;
            let ctx = tensor::matmul(tape, &attn, &v)?;
            let projected = self.apply_affine(tape, layer.wo, &ctx)?;
            let residual = tensor::add(tape, &x, &projected)?;
            x = tensor::layernorm_lastdim(tape, &residual)?;
        }
        Ok(x)
    }

    /// encode -> mask -> fuse, the full model on one batch.
    pub fn forward(
        &self,
        tape: Option<&Tape>,
        inputs: &PerModality<Tensor>,
        mask: CoalitionMask,
    ) -> Result<PoseOutput> {
        self.counters.forwards.fetch_add(1, Ordering::Relaxed);
        let features = self.encode_all(tape, inputs)?;
        let masked = apply_mask(&features, mask);
        self.fuse_predict(tape, &masked, mask)
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }
}

/// Zero the features of absent modalities; present features pass through.
/// The zero tensors are fresh constants, so no gradient reaches the
/// encoders of absent modalities.
pub fn apply_mask(features: &PerModality<Tensor>, mask: CoalitionMask) -> PerModality<Tensor> {
    features.map(|m, f| {
        if mask.contains(m) {
            f.clone()
        } else {
            Tensor::zeros(f.shape())
        }
    })
}
