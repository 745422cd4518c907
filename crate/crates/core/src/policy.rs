//! Softmax routing policy over a variable-size candidate set.
//!
//! Each candidate is scored by the same MLP encoder (`feature_dim -> hidden
//! layers -> 1`) and the scores are normalized with a softmax across the
//! candidate list. Training-time augmentation adds `N(0, scale^2)` noise to
//! the post-activation output of one hidden layer (`noise_layer`).
//!
//! Parameters are a flat vector laid out layer by layer: a row-major
//! `out x in` weight matrix followed by `out` biases.

use std::fmt;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::domain::Candidate;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArchitecture {
    pub feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Hidden layer whose output receives augmentation noise.
    pub noise_layer: usize,
}

impl PolicyArchitecture {
    /// Noise goes into the last hidden layer.
    pub fn new(feature_dim: usize, hidden_dims: Vec<usize>, activation: Activation) -> Self {
        let noise_layer = hidden_dims.len().saturating_sub(1);
        Self {
            feature_dim,
            hidden_dims,
            activation,
            noise_layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden dims must be >= 1".into()));
        }
        if self.noise_layer >= self.hidden_dims.len() {
            return Err(Error::Config(format!(
                "noise_layer {} out of range for {} hidden layers",
                self.noise_layer,
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer including the scalar head.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.feature_dim;
        for &h in &self.hidden_dims {
            shapes.push((prev, h));
            prev = h;
        }
        shapes.push((prev, 1));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn noise_width(&self) -> usize {
        self.hidden_dims[self.noise_layer]
    }
}

/// Monotonically increasing snapshot version, rendered as `v000042`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PolicyVersion(pub u64);

impl PolicyVersion {
    pub fn next(self) -> Self {
        PolicyVersion(self.0 + 1)
    }
}

impl fmt::Display for PolicyVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{:06}", self.0)
    }
}

impl std::str::FromStr for PolicyVersion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix('v')
            .and_then(|n| n.parse().ok())
            .map(PolicyVersion)
            .ok_or_else(|| Error::Invalid(format!("bad policy version `{s}`")))
    }
}

impl Serialize for PolicyVersion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyVersion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hidden-layer vector of one candidate at the noise-injection layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenRepresentation(pub Vec<f64>);

/// Immutable parameter snapshot. Updates produce a new snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    architecture: PolicyArchitecture,
    parameters: Vec<f64>,
    version: PolicyVersion,
    seed_lineage: Vec<u64>,
}

/// Intermediate values of one candidate's forward pass.
#[derive(Debug, Clone)]
pub(crate) struct CandidateTrace {
    /// Inputs to each dense layer: `acts[0]` are the raw features.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    candidates: Vec<CandidateTrace>,
    pub(crate) propensities: Vec<f64>,
}

impl PolicySnapshot {
    pub fn from_parameters(
        architecture: PolicyArchitecture,
        parameters: Vec<f64>,
        version: PolicyVersion,
        seed_lineage: Vec<u64>,
    ) -> Result<Self> {
        architecture.validate()?;
        let expected = architecture.parameter_count();
        if parameters.len() != expected {
            return Err(Error::Invalid(format!(
                "parameter vector has length {}, architecture needs {expected}",
                parameters.len()
            )));
        }
        if parameters.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                layer: "parameters".into(),
            });
        }
        Ok(Self {
            architecture,
            parameters,
            version,
            seed_lineage,
        })
    }

    pub fn zeros(architecture: PolicyArchitecture) -> Result<Self> {
        let n = architecture.parameter_count();
        Self::from_parameters(architecture, vec![0.0; n], PolicyVersion(0), Vec::new())
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization for hidden
    /// weights and biases, drawn from the `Init` stream of `seed`. The scoring
    /// head starts at zero, so the untrained policy is uniform.
    pub fn initialize(architecture: PolicyArchitecture, seed: u64) -> Result<Self> {
        Self::initialize_random(architecture, seed, false)
    }

    /// Like [`PolicySnapshot::initialize`], optionally with a random head.
    pub fn initialize_random(architecture: PolicyArchitecture, seed: u64, random_head: bool) -> Result<Self> {
        architecture.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut params = Vec::with_capacity(architecture.parameter_count());
        let shapes = architecture.layer_shapes();
        let n_layers = shapes.len();
        for (l, (fan_in, fan_out)) in shapes.into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for _ in 0..(fan_in * fan_out + fan_out) {
                let v = dist.sample(&mut rng);
                params.push(if l + 1 == n_layers && !random_head { 0.0 } else { v });
            }
        }
        Self::from_parameters(architecture, params, PolicyVersion(0), vec![seed])
    }

    pub fn architecture(&self) -> &PolicyArchitecture {
        &self.architecture
    }

    pub fn parameters(&self) -> &[f64] {
        &self.parameters
    }

    pub fn version(&self) -> PolicyVersion {
        self.version
    }

    pub fn seed_lineage(&self) -> &[u64] {
        &self.seed_lineage
    }

    /// Successor snapshot with new parameters and the next version.
    pub fn with_parameters(&self, parameters: Vec<f64>) -> Result<Self> {
        Self::from_parameters(
            self.architecture.clone(),
            parameters,
            self.version.next(),
            self.seed_lineage.clone(),
        )
    }

    /// Records a seed that contributed to this snapshot's training.
    pub fn with_lineage_seed(mut self, seed: u64) -> Self {
        self.seed_lineage.push(seed);
        self
    }

    fn check_candidates(&self, candidates: &[Candidate]) -> Result<()> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        for c in candidates {
            if c.features.len() != self.architecture.feature_dim {
                return Err(Error::Dimension {
                    expected: self.architecture.feature_dim,
                    got: c.features.len(),
                });
            }
        }
        Ok(())
    }

    /// Noise-free propensities.
    pub fn propensities(&self, candidates: &[Candidate]) -> Result<Vec<f64>> {
        Ok(self.trace(candidates, 0.0, None)?.propensities)
    }

    /// Propensities with Gaussian noise of `noise_scale` injected into every
    /// candidate's hidden representation. With `noise_scale == 0` nothing is
    /// drawn from `rng`.
    pub fn forward(
        &self,
        candidates: &[Candidate],
        noise_scale: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        Ok(self.trace(candidates, noise_scale, Some(rng))?.propensities)
    }

    /// Hidden vector at the noise layer without noise.
    pub fn hidden_representation(&self, candidate: &Candidate) -> Result<HiddenRepresentation> {
        self.check_candidates(std::slice::from_ref(candidate))?;
        let t = self.encode(&candidate.features, 0.0, None)?;
        Ok(HiddenRepresentation(
            t.acts[self.architecture.noise_layer + 1].clone(),
        ))
    }

    pub(crate) fn trace(
        &self,
        candidates: &[Candidate],
        noise_scale: f64,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardTrace> {
        self.check_candidates(candidates)?;
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::Invalid(format!("noise scale must be >= 0, got {noise_scale}")));
        }
        let mut traces = Vec::with_capacity(candidates.len());
        let mut scores = Vec::with_capacity(candidates.len());
        for c in candidates {
            let t = self.encode(&c.features, noise_scale, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
            scores.push(self.head(t.acts.last().expect("at least input layer")));
            traces.push(t);
        }
        let propensities = softmax(&scores);
        if propensities.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                layer: "softmax".into(),
            });
        }
        Ok(ForwardTrace {
            candidates: traces,
            propensities,
        })
    }

    fn encode(
        &self,
        features: &[f64],
        noise_scale: f64,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<CandidateTrace> {
        let arch = &self.architecture;
        let n_hidden = arch.hidden_dims.len();
        let mut acts = Vec::with_capacity(n_hidden + 1);
        let mut pre = Vec::with_capacity(n_hidden);
        acts.push(features.to_vec());
        let mut offset = 0;
        for (l, (fan_in, fan_out)) in arch.layer_shapes().into_iter().take(n_hidden).enumerate() {
            let w = &self.parameters[offset..offset + fan_in * fan_out];
            let b = &self.parameters[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let input = &acts[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>()
                })
                .collect();
            let mut a: Vec<f64> = z.iter().map(|&v| arch.activation.apply(v)).collect();
            if l == arch.noise_layer && noise_scale > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    for v in &mut a {
                        let c: f64 = StandardNormal.sample(r);
                        *v += noise_scale * c;
                    }
                }
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: format!("hidden[{l}]"),
                });
            }
            pre.push(z);
            acts.push(a);
        }
        Ok(CandidateTrace { acts, pre })
    }

    fn head_offset(&self) -> usize {
        self.parameters.len() - self.architecture.layer_shapes().last().map_or(0, |(i, _)| i + 1)
    }

    fn head(&self, last: &[f64]) -> f64 {
        let off = self.head_offset();
        let w = &self.parameters[off..off + last.len()];
        let b = self.parameters[off + last.len()];
        b + w.iter().zip(last).map(|(wi, xi)| wi * xi).sum::<f64>()
    }

    /// Accumulates `sum_i d_scores[i] * d score_i / d theta` into `grad`.
    pub(crate) fn backprop(&self, trace: &ForwardTrace, d_scores: &[f64], grad: &mut [f64]) -> Result<()> {
        debug_assert_eq!(grad.len(), self.parameters.len());
        let shapes = self.architecture.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        let n_hidden = self.architecture.hidden_dims.len();
        for (ct, &ds) in trace.candidates.iter().zip(d_scores) {
            if ds == 0.0 {
                continue;
            }
            // Scalar head.
            let (fan_in, _) = shapes[n_hidden];
            let head = offsets[n_hidden];
            let last = &ct.acts[n_hidden];
            let mut delta: Vec<f64> = Vec::with_capacity(fan_in);
            for k in 0..fan_in {
                grad[head + k] += ds * last[k];
                delta.push(ds * self.parameters[head + k]);
            }
            grad[head + fan_in] += ds;

            for l in (0..n_hidden).rev() {
                let (fan_in, fan_out) = shapes[l];
                let base = offsets[l];
                let dz: Vec<f64> = delta
                    .iter()
                    .zip(&ct.pre[l])
                    .map(|(d, &z)| d * self.architecture.activation.derivative(z))
                    .collect();
                let input = &ct.acts[l];
                let mut next = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = base + o * fan_in;
                    for k in 0..fan_in {
                        grad[row + k] += g * input[k];
                        next[k] += g * self.parameters[row + k];
                    }
                    grad[base + fan_in * fan_out + o] += g;
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        layer: format!("backprop hidden[{l}]"),
                    });
                }
                delta = next;
            }
        }
        Ok(())
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest propensity; ties go to the lowest index.
pub fn argmax_action(propensities: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in propensities.iter().enumerate() {
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((i, p)),
        }
    }
    best.map(|(i, _)| i).ok_or(Error::Empty("propensity vector"))
}

/// Samples an index from a probability vector.
pub fn sample_action<R: Rng + ?Sized>(propensities: &[f64], rng: &mut R) -> Result<usize> {
    if propensities.is_empty() {
        return Err(Error::Empty("propensity vector"));
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in propensities.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding left `acc` slightly below 1; fall back to the last non-zero entry.
    Ok(propensities.iter().rposition(|&p| p > 0.0).unwrap_or(propensities.len() - 1))
}

// ── Checkpoint format ───────────────────────────────────────────────────
//
// All integers and floats little-endian:
//
//   magic        8 bytes  "RPGCKPT\0"
//   format       u32      CHECKPOINT_FORMAT
//   version      u64      policy version number
//   activation   u8       0 = RELU, 1 = TANH
//   feature_dim  u32
//   noise_layer  u32
//   n_hidden     u32, then n_hidden x u32 widths
//   n_lineage    u32, then n_lineage x u64 seeds
//   n_params     u64, then n_params x f64 (IEEE-754 bits)
//   checksum     u64      FNV-1a 64 over every preceding byte

const MAGIC: &[u8; 8] = b"RPGCKPT\0";
pub const CHECKPOINT_FORMAT: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_checkpoint(policy: &PolicySnapshot) -> Vec<u8> {
    let arch = &policy.architecture;
    let mut out = Vec::with_capacity(64 + policy.parameters.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
    out.extend_from_slice(&policy.version.0.to_le_bytes());
    out.push(arch.activation.code());
    out.extend_from_slice(&(arch.feature_dim as u32).to_le_bytes());
    out.extend_from_slice(&(arch.noise_layer as u32).to_le_bytes());
    out.extend_from_slice(&(arch.hidden_dims.len() as u32).to_le_bytes());
    for &h in &arch.hidden_dims {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(policy.seed_lineage.len() as u32).to_le_bytes());
    for &s in &policy.seed_lineage {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(policy.parameters.len() as u64).to_le_bytes());
    for &p in &policy.parameters {
        out.extend_from_slice(&p.to_bits().to_le_bytes());
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// Reads a count and checks the remaining bytes can hold it.
    fn count(&mut self, n: u64, item_size: usize, what: &str) -> Result<usize> {
        let need = (n as u128) * item_size as u128;
        if need > (self.bytes.len() - self.pos) as u128 {
            return Err(Error::Checkpoint(format!("truncated: {what} declares {n} entries")));
        }
        Ok(n as usize)
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<PolicySnapshot> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a policy checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let format = r.u32("format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {format} (expected {CHECKPOINT_FORMAT})"
        )));
    }
    let version = r.u64("version")?;
    let activation = Activation::from_code(r.take(1, "activation")?[0])
        .ok_or_else(|| Error::Checkpoint("unknown activation code".into()))?;
    let feature_dim = r.u32("feature_dim")? as usize;
    let noise_layer = r.u32("noise_layer")? as usize;
    let n_hidden = r.u32("n_hidden")?;
    let n_hidden = r.count(n_hidden.into(), 4, "hidden dims")?;
    let hidden_dims = (0..n_hidden)
        .map(|_| r.u32("hidden dim").map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let n_lineage = r.u32("n_lineage")?;
    let n_lineage = r.count(n_lineage.into(), 8, "seed lineage")?;
    let seed_lineage = (0..n_lineage)
        .map(|_| r.u64("lineage seed"))
        .collect::<Result<Vec<_>>>()?;
    let n_params = r.u64("n_params")?;
    let n_params = r.count(n_params, 8, "parameters")?;
    let parameters = (0..n_params)
        .map(|_| r.u64("parameter").map(f64::from_bits))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != fnv1a(body) {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
    }
    let architecture = PolicyArchitecture {
        feature_dim,
        hidden_dims,
        activation,
        noise_layer,
    };
    PolicySnapshot::from_parameters(architecture, parameters, PolicyVersion(version), seed_lineage)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}
