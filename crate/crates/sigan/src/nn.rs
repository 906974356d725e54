//! Parameter storage, layer building blocks, the Adam optimizer and a
//! finite-difference gradient checker.
//!
//! Parameters live in a [`ParamSet`] keyed by hierarchical names
//! (`"gen.renc.stage1.res.conv2.weight"`). Initialization derives one RNG
//! stream *per tensor name*, so adding or removing a component (say, the
//! attention blocks) never shifts the draws of unrelated tensors — ablation
//! variants share bit-identical common weights for a given seed.

use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::ops::{self, ConvSpec};
use crate::autograd::{Grads, Scalar, Tape, Tensor};

/// Epsilon inside every normalization denominator.
pub const NORM_EPS: f64 = 1e-5;
/// Decay of the running batch-norm statistics (`running = decay*running +
/// (1-decay)*batch`).
pub const BN_DECAY: f64 = 0.9;

/// One named tensor. Non-trainable entries hold state such as running
/// batch-norm statistics; they are serialized but never touched by the
/// optimizer.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub data: ArrayD<S>,
    pub trainable: bool,
}

/// Ordered, named tensor store for one network.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Scalar> {
    entries: IndexMap<String, Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, data: ArrayD<S>, trainable: bool) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), Param { data, trainable }).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Param<S> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<S> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    /// Convert every tensor to another scalar type (used to run `f64`
    /// gradient checks against `f32` training parameters).
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, p) in &self.entries {
            out.insert(name.clone(), p.data.mapv(|v| T::from_f64(v.as_f64())), p.trainable);
        }
        out
    }
}

/// Derive the RNG seed of one parameter tensor from the model seed and the
/// tensor name (stable across platforms and insertion orders).
pub fn param_seed(model_seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(model_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields >= 8 bytes"))
}

/// He-style normal initialization with the given fan-in, drawn in `f64` so
/// all scalar types observe identical values.
pub fn he_normal<S: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> ArrayD<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || S::from_f64(normal.sample(&mut rng)))
}

/// How a forward pass treats normalization statistics and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running stats updated, trainable leaves record grads.
    Train,
    /// Batch statistics, no state updates, no gradients (e.g. generating the
    /// fake sample for a discriminator update).
    Frozen,
    /// Running statistics, no state updates, no gradients.
    Inference,
}

impl Mode {
    fn grad(self) -> bool {
        self == Mode::Train
    }

    fn batch_stats(self) -> bool {
        self != Mode::Inference
    }
}

/// Per-pass context: owns the tape handle, lends parameters onto the tape
/// (memoized so shared weights accumulate gradients correctly) and records
/// name -> node bindings for the optimizer.
pub struct Forward<'a, S: Scalar> {
    pub tape: Tape<S>,
    params: &'a mut ParamSet<S>,
    pub mode: Mode,
    leaves: HashMap<String, Tensor<S>>,
    bindings: Vec<(String, usize)>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(tape: &Tape<S>, params: &'a mut ParamSet<S>, mode: Mode) -> Self {
        Forward { tape: tape.clone(), params, mode, leaves: HashMap::new(), bindings: Vec::new() }
    }

    /// Put a parameter on the tape (once per pass).
    pub fn param(&mut self, name: &str) -> Tensor<S> {
        if let Some(t) = self.leaves.get(name) {
            return t.clone();
        }
        let p = self.params.get(name);
        let needs_grad = p.trainable && self.mode.grad();
        let t = self.tape.leaf(p.data.clone(), needs_grad);
        if needs_grad {
            self.bindings.push((name.to_string(), t.id));
        }
        self.leaves.insert(name.to_string(), t.clone());
        t
    }

    pub fn state_f64(&self, name: &str) -> Vec<f64> {
        self.params.get(name).data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn set_state_f64(&mut self, name: &str, values: &[f64]) {
        let data = self.params.get_mut(name);
        assert_eq!(data.data.len(), values.len(), "state length mismatch for {name}");
        for (slot, &v) in data.data.iter_mut().zip(values) {
            *slot = S::from_f64(v);
        }
    }

    /// Collect the gradients of every bound parameter after a backward sweep.
    pub fn collect_grads(&self, grads: &Grads<S>) -> IndexMap<String, ArrayD<S>> {
        let mut out: IndexMap<String, ArrayD<S>> = IndexMap::new();
        for (name, id) in &self.bindings {
            if let Some(g) = grads.get(*id) {
                match out.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Square-kernel convolution layer descriptor.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv2d {
    /// "Same"-padded stride-1 convolution with bias.
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv2d { name: name.into(), in_ch, out_ch, kernel, spec: ConvSpec::same(kernel), bias: true }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.spec = self.spec.with_stride(stride);
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.spec = self.spec.with_dilation(dilation);
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<S: Scalar>(&self, params: &mut ParamSet<S>, model_seed: u64) {
        let shape = [self.out_ch, self.in_ch, self.kernel, self.kernel];
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let w = he_normal::<S>(&shape, fan_in, param_seed(model_seed, &self.weight_name()));
        params.insert(self.weight_name(), w, true);
        if self.bias {
            params.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_ch])), true);
        }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: &Tensor<S>) -> Tensor<S> {
        let w = f.param(&self.weight_name());
        let b = self.bias.then(|| f.param(&self.bias_name()));
        ops::conv2d(x, &w, b.as_ref(), self.spec)
    }
}

/// Batch normalization over spatial statistics with running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub ch: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, ch: usize) -> Self {
        BatchNorm2d { name: name.into(), ch }
    }

    fn names(&self) -> (String, String, String, String) {
        (
            format!("{}.gamma", self.name),
            format!("{}.beta", self.name),
            format!("{}.running_mean", self.name),
            format!("{}.running_var", self.name),
        )
    }

    pub fn init<S: Scalar>(&self, params: &mut ParamSet<S>, _model_seed: u64) {
        let (g, b, rm, rv) = self.names();
        params.insert(g, ArrayD::from_elem(IxDyn(&[self.ch]), S::one()), true);
        params.insert(b, ArrayD::zeros(IxDyn(&[self.ch])), true);
        params.insert(rm, ArrayD::zeros(IxDyn(&[self.ch])), false);
        params.insert(rv, ArrayD::from_elem(IxDyn(&[self.ch]), S::one()), false);
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: &Tensor<S>) -> Tensor<S> {
        let (gname, bname, rmname, rvname) = self.names();
        let gamma = f.param(&gname);
        let beta = f.param(&bname);
        if f.mode.batch_stats() {
            let (y, mean, var) = ops::batch_norm_train(x, &gamma, &beta, NORM_EPS);
            if f.mode == Mode::Train {
                let mut rm = f.state_f64(&rmname);
                let mut rv = f.state_f64(&rvname);
                for c in 0..self.ch {
                    rm[c] = BN_DECAY * rm[c] + (1.0 - BN_DECAY) * mean[c];
                    rv[c] = BN_DECAY * rv[c] + (1.0 - BN_DECAY) * var[c];
                }
                f.set_state_f64(&rmname, &rm);
                f.set_state_f64(&rvname, &rv);
            }
            y
        } else {
            let mean = f.state_f64(&rmname);
            let var = f.state_f64(&rvname);
            ops::batch_norm_eval(x, &gamma, &beta, &mean, &var, NORM_EPS)
        }
    }
}

/// Instance normalization (stateless).
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    pub name: String,
    pub ch: usize,
}

impl InstanceNorm2d {
    pub fn new(name: impl Into<String>, ch: usize) -> Self {
        InstanceNorm2d { name: name.into(), ch }
    }

    pub fn init<S: Scalar>(&self, params: &mut ParamSet<S>, _model_seed: u64) {
        params.insert(format!("{}.gamma", self.name), ArrayD::from_elem(IxDyn(&[self.ch]), S::one()), true);
        params.insert(format!("{}.beta", self.name), ArrayD::zeros(IxDyn(&[self.ch])), true);
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: &Tensor<S>) -> Tensor<S> {
        let gamma = f.param(&format!("{}.gamma", self.name));
        let beta = f.param(&format!("{}.beta", self.name));
        ops::instance_norm(x, &gamma, &beta, NORM_EPS)
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with optional global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: IndexMap<String, ArrayD<S>>,
    v: IndexMap<String, ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// Euclidean norm across all gradients (for clipping diagnostics).
    pub fn global_norm(grads: &IndexMap<String, ArrayD<S>>) -> f64 {
        grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// One update. `clip` rescales the whole gradient to the given global
    /// norm when exceeded.
    pub fn step(
        &mut self,
        params: &mut ParamSet<S>,
        mut grads: IndexMap<String, ArrayD<S>>,
        clip: Option<f64>,
    ) {
        if let Some(max_norm) = clip {
            let norm = Self::global_norm(&grads);
            if norm > max_norm {
                let scale = S::from_f64(max_norm / norm);
                for g in grads.values_mut() {
                    g.mapv_inplace(|v| v * scale);
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = &mut params.get_mut(&name).data;
            for ((pv, gv), (mv, vv)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                let gf = gv.as_f64();
                let mf = self.beta1 * mv.as_f64() + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * vv.as_f64() + (1.0 - self.beta2) * gf * gf;
                *mv = S::from_f64(mf);
                *vv = S::from_f64(vf);
                let update = self.lr * (mf / bc1) / ((vf / bc2).sqrt() + self.eps);
                *pv = S::from_f64(pv.as_f64() - update);
            }
        }
    }

    /// Moment tensors for checkpointing, prefixed `m.`/`v.`.
    pub fn moments(&self) -> Vec<(String, &ArrayD<S>)> {
        let mut out = Vec::new();
        for (n, a) in &self.m {
            out.push((format!("m.{n}"), a));
        }
        for (n, a) in &self.v {
            out.push((format!("v.{n}"), a));
        }
        out
    }

    /// Restore a moment tensor saved by [`Adam::moments`].
    pub fn restore_moment(&mut self, prefixed: &str, data: ArrayD<S>) {
        if let Some(name) = prefixed.strip_prefix("m.") {
            self.m.insert(name.to_string(), data);
        } else if let Some(name) = prefixed.strip_prefix("v.") {
            self.v.insert(name.to_string(), data);
        } else {
            panic!("unknown moment prefix in {prefixed}");
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Outcome of a finite-difference sweep.
#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `eval` must compute the scalar objective from a parameter set and, when
/// asked, the analytic gradients of every trainable tensor. Each probed
/// tensor is sampled at up to `entries_per_tensor` coordinates chosen by a
/// seeded RNG. Entries where both gradients are below the absolute floor are
/// accepted (e.g. weights behind a fully masked path). A disagreement is
/// re-estimated at a tenth of the step before it counts: a central
/// difference that straddles a ReLU kink reports a spurious slope that
/// shrinks with the step, while a genuine analytic-gradient bug does not.
pub fn gradcheck<F>(
    params: &ParamSet<f64>,
    names: &[String],
    entries_per_tensor: usize,
    eps: f64,
    tol: f64,
    seed: u64,
    mut eval: F,
) -> GradCheckReport
where
    F: FnMut(&mut ParamSet<f64>, bool) -> (f64, Option<IndexMap<String, ArrayD<f64>>>),
{
    use rand::Rng;
    let mut base = params.clone();
    let (_, analytic) = eval(&mut base, true);
    let analytic = analytic.expect("eval must return gradients when asked");

    let mut checked = 0;
    let mut worst_rel = 0.0_f64;
    let mut failures = Vec::new();
    for name in names {
        let n = params.get(name).data.len();
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
        let mut picks: Vec<usize> = if n <= entries_per_tensor {
            (0..n).collect()
        } else {
            (0..entries_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        picks.sort_unstable();
        picks.dedup();
        let zeros = ArrayD::zeros(params.get(name).data.raw_dim());
        let ga = analytic.get(name).unwrap_or(&zeros);
        for idx in picks {
            let a = ga.as_slice().expect("standard layout")[idx];
            let mut probe = |delta: f64| -> f64 {
                let mut p = params.clone();
                p.get_mut(name).data.as_slice_mut().expect("standard layout")[idx] += delta;
                eval(&mut p, false).0
            };
            let mut central = |e: f64| (probe(e) - probe(-e)) / (2.0 * e);
            let mut numeric = central(eps);
            checked += 1;
            let mut diff = (a - numeric).abs();
            if diff >= 5e-7 && diff / a.abs().max(numeric.abs()) >= tol {
                numeric = central(eps / 10.0);
                diff = (a - numeric).abs();
            }
            if diff < 5e-7 {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            worst_rel = worst_rel.max(rel);
            if rel >= tol {
                failures.push(format!(
                    "{name}[{idx}]: analytic {a:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})"
                ));
            }
        }
    }
    GradCheckReport { checked, worst_rel, failures }
}
