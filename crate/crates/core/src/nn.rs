//! Parameters, initialization, forward-pass binding, Adam, weight EMA and the
//! graph side of spectral normalization.
//!
//! Models are built once against a [`ParamStore`] (deterministic, seeded) and
//! hold [`ParamId`] handles. Each forward pass creates a [`Fwd`] context that
//! lazily binds parameters as graph leaves; spectrally-normalized weights are
//! bound as `W / sigma(W)` with the power-iteration vector `u` treated as a
//! constant, so gradients flow through the normalization exactly as finite
//! differences see it.

use crate::graph::{Arr, Graph, Var};
use crate::rng;
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named tensor storage. Buffers (non-trainable state such as power-iteration
/// vectors) live alongside trainable weights.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    trainable: Vec<bool>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        self.by_name.insert(name.to_string(), self.names.len() - 1);
        ParamId(self.names.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Arr) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "set: shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.names.len())
            .filter(|i| self.trainable[*i])
            .map(ParamId)
            .collect()
    }

    /// Total number of scalar parameters (trainable only).
    pub fn num_trainable_scalars(&self) -> usize {
        (0..self.names.len())
            .filter(|i| self.trainable[*i])
            .map(|i| self.values[i].len())
            .sum()
    }

    /// Name-sorted (name, value, trainable) triples; the checkpoint order.
    pub fn sorted_entries(&self) -> Vec<(&str, &Arr, bool)> {
        let mut names: Vec<&String> = self.names.iter().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                let i = self.by_name[n];
                (n.as_str(), &self.values[i], self.trainable[i])
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    HeNormal,
    XavierNormal,
    Normal(f64),
    Zeros,
}

fn sample_normal(rng: &mut ChaCha12Rng, std: f64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

pub fn init_tensor(rng: &mut ChaCha12Rng, shape: &[usize], init: Init, fan_in: usize, fan_out: usize) -> Arr {
    let std = match init {
        Init::HeNormal => (2.0 / fan_in as f64).sqrt(),
        Init::XavierNormal => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::Normal(s) => s,
        Init::Zeros => 0.0,
    };
    if std == 0.0 {
        return ArrayD::zeros(IxDyn(shape));
    }
    ArrayD::from_shape_simple_fn(IxDyn(shape), || sample_normal(rng, std))
}

/// Dropout mask plan for one forward pass: one seed per batch item, layer
/// call sites numbered in execution order. Draws depend only on
/// (item seed, layer index), never on batch chunking.
pub struct DropoutPlan {
    pub item_seeds: Vec<u64>,
    layer_counter: Cell<u64>,
}

impl DropoutPlan {
    pub fn new(item_seeds: Vec<u64>) -> Self {
        Self {
            item_seeds,
            layer_counter: Cell::new(0),
        }
    }
}

/// Dropout application recorded by the test-mode trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutEvent {
    pub resolution: usize,
    pub rate: f64,
}

/// One forward pass worth of parameter binding.
pub struct Fwd<'a> {
    pub g: &'a Graph,
    pub store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    sn_bound: RefCell<HashMap<usize, Var>>,
    pub train: bool,
    pub dropout: Option<DropoutPlan>,
    pub trace: Option<RefCell<Vec<DropoutEvent>>>,
}

impl<'a> Fwd<'a> {
    /// Evaluation mode: no dropout, parameters frozen.
    pub fn eval(g: &'a Graph, store: &'a ParamStore) -> Self {
        Self {
            g,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            sn_bound: RefCell::new(HashMap::new()),
            train: false,
            dropout: None,
            trace: None,
        }
    }

    /// Training mode with per-item dropout streams.
    pub fn train(g: &'a Graph, store: &'a ParamStore, dropout: DropoutPlan) -> Self {
        Self {
            g,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            sn_bound: RefCell::new(HashMap::new()),
            train: true,
            dropout: Some(dropout),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    /// Bind a raw parameter as a graph leaf (cached per pass).
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.g.input(self.store.get(id).clone());
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Bind a spectrally-normalized weight: W / max(||W^T u||, guard), with
    /// `u` constant. Cached per pass so every use shares one normalization.
    pub fn sn_param(&self, weight: ParamId, u: ParamId, guard: f64) -> Var {
        if let Some(v) = self.sn_bound.borrow().get(&weight.0) {
            return *v;
        }
        let g = self.g;
        let w = self.param(weight);
        let shape = self.g.shape(w);
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let wm = g.reshape(w, &[rows, cols]);
        let uv = self.store.get(u);
        assert_eq!(uv.len(), rows, "sn_param: u length");
        let u_row = g.input(
            uv.clone()
                .into_shape_with_order(IxDyn(&[1, rows]))
                .unwrap(),
        );
        let z = g.matmul(u_row, wm); // (1, cols) = (W^T u)^T
        let s2 = g.sum_all(g.mul(z, z));
        let sigma = g.sqrt(g.add_scalar(s2, guard * guard));
        let wbar_m = g.div_scalar_var(wm, sigma);
        let wbar = g.reshape(wbar_m, &shape);
        self.sn_bound.borrow_mut().insert(weight.0, wbar);
        wbar
    }

    /// Dropout with inverted scaling. Identity in eval mode or at rate 0;
    /// always records a trace event when tracing is on.
    pub fn dropout(&self, x: Var, rate: f64, resolution: usize) -> Var {
        if let Some(trace) = &self.trace {
            trace.borrow_mut().push(DropoutEvent { resolution, rate });
        }
        if !self.train || rate <= 0.0 {
            return x;
        }
        let plan = self
            .dropout
            .as_ref()
            .expect("training forward requires a dropout plan");
        let layer = plan.layer_counter.get();
        plan.layer_counter.set(layer + 1);
        let shape = self.g.shape(x);
        assert_eq!(
            shape[0],
            plan.item_seeds.len(),
            "dropout: batch size vs plan"
        );
        let per_item: usize = shape[1..].iter().product();
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mut mask = ArrayD::zeros(IxDyn(&shape));
        {
            let flat = mask.as_slice_mut().unwrap();
            for (i, seed) in plan.item_seeds.iter().enumerate() {
                let mut r = rng::stream(*seed, "dropout", layer, 0);
                for k in 0..per_item {
                    flat[i * per_item + k] = if r.gen::<f64>() < keep { scale } else { 0.0 };
                }
            }
        }
        let m = self.g.input(mask);
        self.g.mul(x, m)
    }

    /// Gradients for every trainable parameter bound during this pass.
    pub fn collect_grads(&self, grads: &crate::graph::Gradients) -> BTreeMap<ParamId, Arr> {
        let mut out = BTreeMap::new();
        for (i, slot) in self.bound.borrow().iter().enumerate() {
            if let Some(var) = slot {
                if self.store.trainable[i] {
                    if let Some(g) = grads.get(*var) {
                        out.insert(ParamId(i), g.clone());
                    }
                }
            }
        }
        out
    }

    pub fn take_trace(&self) -> Vec<DropoutEvent> {
        self.trace
            .as_ref()
            .map(|t| t.borrow().clone())
            .unwrap_or_default()
    }
}

/// One power-iteration update of `u` for the reshaped weight, in place.
/// Returns the current sigma estimate ||W^T u|| after the update.
pub fn power_iteration_update(weight: &Arr, u: &mut Array1<f64>, iters: usize, guard: f64) -> f64 {
    let rows = weight.shape()[0];
    let cols: usize = weight.shape()[1..].iter().product();
    let wm = weight
        .view()
        .into_shape_with_order((rows, cols))
        .unwrap()
        .to_owned();
    assert_eq!(u.len(), rows, "power_iteration_update: u length");
    for _ in 0..iters {
        let mut v: Array1<f64> = wm.t().dot(u);
        let nv = v.dot(&v).sqrt().max(guard);
        v.mapv_inplace(|x| x / nv);
        let mut nu: Array1<f64> = wm.dot(&v);
        let n = nu.dot(&nu).sqrt().max(guard);
        nu.mapv_inplace(|x| x / n);
        *u = nu;
    }
    let wtu: Array1<f64> = wm.t().dot(u);
    wtu.dot(&wtu).sqrt()
}

/// Registered spectrally-normalized weight: the weight id plus its persistent
/// `u` buffer id.
#[derive(Clone, Copy, Debug)]
pub struct SnWeight {
    pub weight: ParamId,
    pub u: ParamId,
}

/// Advance all power-iteration states. Call exactly once per optimizer step,
/// before any (micro)batch forward, so accumulation cannot skew the state.
pub fn update_sn_states(store: &mut ParamStore, sn: &[SnWeight], iters: usize, guard: f64) {
    for s in sn {
        let w = store.get(s.weight).clone();
        let mut u: Array1<f64> = store
            .get(s.u)
            .view()
            .into_shape_with_order(store.get(s.u).len())
            .unwrap()
            .to_owned();
        power_iteration_update(&w, &mut u, iters, guard);
        store.set(s.u, u.into_dyn());
    }
}

/// Run power iteration to convergence on every registered weight (used by the
/// Lipschitz verification configuration before measuring; training uses one
/// iteration per step).
pub fn converge_sn_states(store: &mut ParamStore, sn: &[SnWeight], tol: f64, max_iters: usize) {
    for s in sn {
        let w = store.get(s.weight).clone();
        let mut u: Array1<f64> = store
            .get(s.u)
            .view()
            .into_shape_with_order(store.get(s.u).len())
            .unwrap()
            .to_owned();
        let mut last = power_iteration_update(&w, &mut u, 1, 1e-12);
        for _ in 0..max_iters {
            let sigma = power_iteration_update(&w, &mut u, 1, 1e-12);
            if (sigma - last).abs() <= tol * sigma.max(1e-300) {
                last = sigma;
                break;
            }
            last = sigma;
        }
        let _ = last;
        store.set(s.u, u.into_dyn());
    }
}

/// 2-d convolution layer handle; spectral norm optional.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dP {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub u: Option<ParamId>,
    pub guard: f64,
}

impl Conv2dP {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
        bias: bool,
        spectral_norm: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let fan_out = cout * k * k;
        let w = store.add(
            &format!("{name}.w"),
            init_tensor(rng, &[cout, cin, k, k], init, fan_in, fan_out),
            true,
        );
        let b = bias.then(|| {
            store.add(
                &format!("{name}.b"),
                ArrayD::zeros(IxDyn(&[cout])),
                true,
            )
        });
        let u = spectral_norm.then(|| {
            let mut uv = Array1::from_shape_simple_fn(cout, || sample_normal(rng, 1.0));
            let n = uv.dot(&uv).sqrt().max(1e-12);
            uv.mapv_inplace(|x| x / n);
            store.add(&format!("{name}.u"), uv.into_dyn(), false)
        });
        Self {
            w,
            b,
            u,
            guard: 1e-12,
        }
    }

    pub fn forward(&self, fw: &Fwd, x: Var) -> Var {
        let w = match self.u {
            Some(u) => fw.sn_param(self.w, u, self.guard),
            None => fw.param(self.w),
        };
        let b = self.b.map(|b| fw.param(b));
        fw.g.conv2d(x, w, b)
    }

    pub fn sn_weight(&self) -> Option<SnWeight> {
        self.u.map(|u| SnWeight { weight: self.w, u })
    }
}

/// Dense layer: x (B,D) -> (B,E).
#[derive(Clone, Copy, Debug)]
pub struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearP {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            init_tensor(rng, &[d_in, d_out], init, d_in, d_out),
            true,
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[d_out])), true);
        Self { w, b }
    }

    pub fn forward(&self, fw: &Fwd, x: Var) -> Var {
        let y = fw.g.matmul(x, fw.param(self.w));
        fw.g.add_rowvec(y, fw.param(self.b))
    }
}

/// Group-norm + learned per-channel affine.
#[derive(Clone, Copy, Debug)]
pub struct GroupNormP {
    pub w: ParamId,
    pub b: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormP {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, pref_groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, pref_groups);
        let w = store.add(
            &format!("{name}.w"),
            ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            true,
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[channels])), true);
        Self {
            w,
            b,
            groups,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, fw: &Fwd, x: Var) -> Var {
        let n = fw.g.group_norm(x, self.groups, self.eps);
        fw.g.chan_affine_static(n, fw.param(self.w), fw.param(self.b))
    }
}

pub fn largest_divisor_at_most(c: usize, pref: usize) -> usize {
    let cap = pref.min(c).max(1);
    (1..=cap).rev().find(|d| c % d == 0).unwrap_or(1)
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    m: HashMap<usize, Arr>,
    v: HashMap<usize, Arr>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, grad_clip: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    /// Apply one update from accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Arr>) {
        self.t += 1;
        let mut scale = 1.0;
        if let Some(clip) = self.grad_clip {
            let norm: f64 = grads
                .values()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let g = g * scale;
            let m = self
                .m
                .entry(id.0)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(id.0)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *m *= self.beta1;
            *m += &(g.clone() * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let mhat = m.mapv(|x| x / bc1);
            let vhat = v.mapv(|x| x / bc2);
            let upd = ndarray::Zip::from(&mhat)
                .and(&vhat)
                .map_collect(|&m, &v| self.lr * m / (v.sqrt() + self.eps));
            let p = store.get_mut(*id);
            *p -= &upd;
        }
    }
}

/// Exponential moving average of trainable parameters (plumbing only).
pub struct EmaParams {
    pub decay: f64,
    shadow: BTreeMap<usize, Arr>,
}

impl EmaParams {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        let mut shadow = BTreeMap::new();
        for id in store.trainable_ids() {
            shadow.insert(id.0, store.get(id).clone());
        }
        Self { decay, shadow }
    }

    pub fn update(&mut self, store: &ParamStore) {
        for (idx, sh) in self.shadow.iter_mut() {
            let p = store.get(ParamId(*idx));
            *sh *= self.decay;
            *sh += &(p * (1.0 - self.decay));
        }
    }

    pub fn copy_to(&self, store: &mut ParamStore) {
        for (idx, sh) in &self.shadow {
            store.set(ParamId(*idx), sh.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn adam_decreases_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", ArrayD::from_elem(IxDyn(&[2]), 5.0), true);
        let mut opt = Adam::new(0.1, None);
        for _ in 0..200 {
            let g = Graph::new();
            let fw = Fwd::eval(&g, &store);
            let xv = fw.param(x);
            let loss = g.sum_all(g.mul(xv, xv));
            let grads = g.backward(loss);
            let pg = fw.collect_grads(&grads);
            opt.step(&mut store, &pg);
        }
        assert!(store.get(x).iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn sn_param_normalizes_to_unit_sigma_after_convergence() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            init_tensor(&mut rng, &[6, 6], Init::Normal(1.0), 6, 6),
            true,
        );
        let mut u = Array1::from_shape_simple_fn(6, || sample_normal(&mut rng, 1.0));
        let n = u.dot(&u).sqrt();
        u.mapv_inplace(|x| x / n);
        let uid = store.add("u", u.into_dyn(), false);
        converge_sn_states(
            &mut store,
            &[SnWeight { weight: w, u: uid }],
            1e-14,
            10_000,
        );
        let g = Graph::new();
        let fw = Fwd::eval(&g, &store);
        let wbar = fw.sn_param(w, uid, 1e-12);
        let wb = g.array(wbar);
        let wb2 = wb
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let sigma = crate::linalg::spectral_norm_exact(wb2.view());
        assert!((sigma - 1.0).abs() < 1e-6, "sigma after SN: {sigma}");
    }

    #[test]
    fn dropout_scales_and_masks_deterministically() {
        let mut store = ParamStore::new();
        let x = store.add("x", ArrayD::from_elem(IxDyn(&[2, 3, 2, 2]), 1.0), true);
        let run = |seed: u64| {
            let g = Graph::new();
            let fw = Fwd::train(&g, &store, DropoutPlan::new(vec![seed, seed + 1]));
            let xv = fw.param(x);
            let y = fw.dropout(xv, 0.5, 2);
            g.array(y)
        };
        let a = run(1);
        let b = run(1);
        assert_eq!(a, b);
        // Masked entries are 0, kept entries are scaled to 2.
        assert!(a.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
    }
}
