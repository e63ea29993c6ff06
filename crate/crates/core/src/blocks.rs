//! Reusable network blocks: spatial-channel attention, res-skip up/down
//! blocks with RGB skip accumulators, spectral normalization, and the
//! resolution-dependent dropout schedule.

use crate::error::{PdmError, Result};
use crate::graph::{Arr, Graph, Var};
use crate::nn::{Conv2dP, Fwd, GroupNormP, Init, LinearP, ParamStore, SnWeight};
use ndarray::{Array1, Array2, ArrayView2};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Blend weights for spatial vs channel attention: pixels / (pixels + C) and
/// its complement, so they sum to exactly 1.
pub fn sc_attention_weights(h: usize, w: usize, c: usize) -> Result<(f64, f64)> {
    if h == 0 || w == 0 || c == 0 {
        return Err(PdmError::invalid(
            "sc_attention_weights: dimensions must be positive",
        ));
    }
    let pixels = (h * w) as f64;
    let w_spatial = pixels / (pixels + c as f64);
    Ok((w_spatial, 1.0 - w_spatial))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, g: &Graph, x: Var) -> Var {
        match self {
            Activation::Silu => g.silu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Parallel single-head self-attention over pixels and over channels, blended
/// by `sc_attention_weights` and added to the residual input.
pub struct ScAttention {
    pub channels: usize,
    pub norm: GroupNormP,
    pub sq: Conv2dP,
    pub sk: Conv2dP,
    pub sv: Conv2dP,
    pub sproj: Conv2dP,
    pub cq: Conv2dP,
    pub ck: Conv2dP,
    pub cv: Conv2dP,
    pub cproj: Conv2dP,
}

impl ScAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
        groups: usize,
        spectral_norm: bool,
    ) -> Self {
        let qkv = |store: &mut ParamStore, rng: &mut ChaCha12Rng, n: String| {
            Conv2dP::new(store, rng, &n, channels, channels, 1, Init::XavierNormal, true, spectral_norm)
        };
        let norm = GroupNormP::new(store, &format!("{name}.norm"), channels, groups);
        let sq = qkv(store, rng, format!("{name}.s.q"));
        let sk = qkv(store, rng, format!("{name}.s.k"));
        let sv = qkv(store, rng, format!("{name}.s.v"));
        // Output projections start at zero so the block begins as identity;
        // zero weights are never spectrally normalized.
        let sproj = Conv2dP::new(store, rng, &format!("{name}.s.proj"), channels, channels, 1, Init::Zeros, true, false);
        let cq = qkv(store, rng, format!("{name}.c.q"));
        let ck = qkv(store, rng, format!("{name}.c.k"));
        let cv = qkv(store, rng, format!("{name}.c.v"));
        let cproj = Conv2dP::new(store, rng, &format!("{name}.c.proj"), channels, channels, 1, Init::Zeros, true, false);
        Self {
            channels,
            norm,
            sq,
            sk,
            sv,
            sproj,
            cq,
            ck,
            cv,
            cproj,
        }
    }

    /// Forward with weights derived from the feature shape.
    pub fn forward(&self, fw: &Fwd, x: Var) -> Var {
        let shape = fw.g.shape(x);
        let (ws, wc) = sc_attention_weights(shape[2], shape[3], shape[1]).expect("positive dims");
        self.forward_with_weights(fw, x, ws, wc)
    }

    /// Test hook: force the blend weights. A weight of exactly 0.0 skips its
    /// branch entirely, so a forced (1, 0) is bitwise the spatial-only path.
    pub fn forward_with_weights(&self, fw: &Fwd, x: Var, w_spatial: f64, w_channel: f64) -> Var {
        let g = fw.g;
        let shape = g.shape(x);
        assert_eq!(shape[1], self.channels, "ScAttention: channel mismatch");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = h * w;
        let hn = self.norm.forward(fw, x);
        let mut out = x;
        if w_spatial != 0.0 {
            let q = g.reshape(self.sq.forward(fw, hn), &[b, c, n]);
            let k = g.reshape(self.sk.forward(fw, hn), &[b, c, n]);
            let v = g.reshape(self.sv.forward(fw, hn), &[b, c, n]);
            // scores[b, i, j] over pixel tokens i attending to j
            let scores = g.scale(g.bmm(g.transpose12(q), k), 1.0 / (c as f64).sqrt());
            let attn = g.softmax_last(scores);
            // out[b, c, i] = sum_j v[b, c, j] attn[b, i, j]
            let o = g.bmm(v, g.transpose12(attn));
            let o = g.reshape(o, &[b, c, h, w]);
            let o = self.sproj.forward(fw, o);
            out = g.add(out, g.scale(o, w_spatial));
        }
        if w_channel != 0.0 {
            let q = g.reshape(self.cq.forward(fw, hn), &[b, c, n]);
            let k = g.reshape(self.ck.forward(fw, hn), &[b, c, n]);
            let v = g.reshape(self.cv.forward(fw, hn), &[b, c, n]);
            // scores[b, i, j] over channel tokens
            let scores = g.scale(g.bmm(q, g.transpose12(k)), 1.0 / (n as f64).sqrt());
            let attn = g.softmax_last(scores);
            // out[b, i, :] = sum_j attn[b, i, j] v[b, j, :]
            let o = g.bmm(attn, v);
            let o = g.reshape(o, &[b, c, h, w]);
            let o = self.cproj.forward(fw, o);
            out = g.add(out, g.scale(o, w_channel));
        }
        out
    }

    pub fn collect_sn(&self, out: &mut Vec<SnWeight>) {
        for c in [&self.sq, &self.sk, &self.sv, &self.cq, &self.ck, &self.cv] {
            if let Some(sn) = c.sn_weight() {
                out.push(sn);
            }
        }
    }
}

/// Value-level surface for the attention op with validation.
pub fn sc_attention_forward(
    attn: &ScAttention,
    store: &ParamStore,
    x: &Arr,
    forced_weights: Option<(f64, f64)>,
) -> Result<Arr> {
    if x.ndim() != 4 {
        return Err(PdmError::shape("(B,C,H,W)", format!("{:?}", x.shape())));
    }
    if x.shape()[1] != attn.channels {
        return Err(PdmError::invalid(format!(
            "sc_attention_forward: x has {} channels, block expects {}",
            x.shape()[1],
            attn.channels
        )));
    }
    let g = Graph::new();
    let fw = Fwd::eval(&g, store);
    let xv = g.input(x.clone());
    let y = match forced_weights {
        Some((ws, wc)) => attn.forward_with_weights(&fw, xv, ws, wc),
        None => attn.forward(&fw, xv),
    };
    Ok(g.array(y))
}

/// Linearly decreasing dropout rates, `p_max` at the lowest-resolution level
/// (index 0) down to exactly zero at the highest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSchedule {
    pub p_max: f64,
    pub num_levels: usize,
    pub per_level_rates: Vec<f64>,
}

impl DropoutSchedule {
    pub fn linear(p_max: f64, num_levels: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&p_max) {
            return Err(PdmError::invalid("dropout p_max must lie in [0, 1)"));
        }
        if num_levels == 0 {
            return Err(PdmError::invalid("dropout schedule needs >= 1 level"));
        }
        let per_level_rates = (0..num_levels)
            .map(|i| {
                if num_levels == 1 {
                    p_max
                } else {
                    p_max * (1.0 - i as f64 / (num_levels - 1) as f64)
                }
            })
            .collect();
        Ok(Self {
            p_max,
            num_levels,
            per_level_rates,
        })
    }
}

/// Rate for `level_index` (0 = lowest resolution).
pub fn dropout_rate_at_level(level_index: usize, schedule: &DropoutSchedule) -> Result<f64> {
    if level_index >= schedule.num_levels {
        return Err(PdmError::invalid(format!(
            "dropout level {level_index} out of range ({} levels)",
            schedule.num_levels
        )));
    }
    Ok(schedule.per_level_rates[level_index])
}

/// Persistent power-iteration state for one weight matrix.
#[derive(Clone, Debug)]
pub struct SpectralNormState {
    /// Left singular vector estimate, unit norm.
    pub u: Array1<f64>,
    pub power_iterations_per_step: usize,
    pub eps_division_guard: f64,
}

impl SpectralNormState {
    pub fn new(rows: usize, power_iterations_per_step: usize, rng: &mut ChaCha12Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut u: Array1<f64> = Array1::from_shape_simple_fn(rows, || StandardNormal.sample(rng));
        let n = u.dot(&u).sqrt().max(1e-12);
        u.mapv_inplace(|x| x / n);
        Self {
            u,
            power_iterations_per_step: power_iterations_per_step.max(1),
            eps_division_guard: 1e-12,
        }
    }
}

/// Divide a weight matrix by its power-iteration largest-singular-value
/// estimate; `state.u` is advanced in place. An (effectively) all-zero weight
/// yields the zero matrix and a warning.
pub fn spectral_normalize(
    weight: ArrayView2<'_, f64>,
    state: &mut SpectralNormState,
) -> Result<(Array2<f64>, f64)> {
    let (rows, cols) = (weight.nrows(), weight.ncols());
    if rows == 0 || cols == 0 {
        return Err(PdmError::invalid("spectral_normalize: empty weight"));
    }
    if state.u.len() != rows {
        return Err(PdmError::shape(
            format!("u of length {rows}"),
            format!("u of length {}", state.u.len()),
        ));
    }
    let guard = state.eps_division_guard;
    for _ in 0..state.power_iterations_per_step {
        let mut v: Array1<f64> = weight.t().dot(&state.u);
        let nv = v.dot(&v).sqrt();
        if nv <= guard {
            break;
        }
        v.mapv_inplace(|x| x / nv);
        let mut nu: Array1<f64> = weight.dot(&v);
        let n = nu.dot(&nu).sqrt();
        if n <= guard {
            break;
        }
        nu.mapv_inplace(|x| x / n);
        state.u = nu;
    }
    let wtu: Array1<f64> = weight.t().dot(&state.u);
    let sigma = wtu.dot(&wtu).sqrt();
    if sigma <= guard {
        log::warn!("spectral_normalize: sigma estimate {sigma} below guard; returning zeros");
        return Ok((&weight / guard, sigma));
    }
    Ok((&weight / sigma, sigma))
}

/// 1x1 per-pixel linear map from features to RGB.
pub struct ToRgb {
    pub conv: Conv2dP,
}

impl ToRgb {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, cin: usize) -> Self {
        Self {
            conv: Conv2dP::new(store, rng, name, cin, 3, 1, Init::XavierNormal, true, false),
        }
    }

    pub fn forward(&self, fw: &Fwd, x: Var) -> Var {
        self.conv.forward(fw, x)
    }
}

/// 1x1 per-pixel linear map from RGB (or another configured source width)
/// into feature space.
pub struct FromRgb {
    pub conv: Conv2dP,
    pub in_channels: usize,
}

impl FromRgb {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        spectral_norm: bool,
    ) -> Self {
        Self {
            conv: Conv2dP::new(store, rng, name, cin, cout, 1, Init::XavierNormal, true, spectral_norm),
            in_channels: cin,
        }
    }

    pub fn forward(&self, fw: &Fwd, x: Var) -> Var {
        assert_eq!(
            fw.g.shape(x)[1],
            self.in_channels,
            "FromRgb: channel mismatch"
        );
        self.conv.forward(fw, x)
    }

    /// Value-level surface with the configured-channel validation.
    pub fn apply(&self, store: &ParamStore, img: &Arr) -> Result<Arr> {
        if img.ndim() != 4 || img.shape()[1] != self.in_channels {
            return Err(PdmError::invalid(format!(
                "from_rgb expects {} input channels, got shape {:?}",
                self.in_channels,
                img.shape()
            )));
        }
        let g = Graph::new();
        let fw = Fwd::eval(&g, store);
        let x = g.input(img.clone());
        Ok(g.array(self.forward(&fw, x)))
    }
}

/// Pre-activation residual block with optional time conditioning (adaptive
/// group-norm scale/shift) and scheduled dropout. The terminal convolution is
/// zero-initialized so a fresh block is the identity (plus channel adapter).
pub struct ResBlock {
    pub gn1: GroupNormP,
    pub conv1: Conv2dP,
    pub gn2: GroupNormP,
    pub temb_scale: Option<LinearP>,
    pub temb_shift: Option<LinearP>,
    pub conv2: Conv2dP,
    pub skip: Option<Conv2dP>,
    pub act: Activation,
    pub dropout_rate: f64,
}

pub struct ResBlockCfg<'a> {
    pub name: &'a str,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub act: Activation,
    pub dropout_rate: f64,
    pub time_dim: Option<usize>,
    pub spectral_norm: bool,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ResBlockCfg) -> Self {
        let name = cfg.name;
        let gn1 = GroupNormP::new(store, &format!("{name}.gn1"), cfg.cin, cfg.groups);
        let conv1 = Conv2dP::new(
            store,
            rng,
            &format!("{name}.conv1"),
            cfg.cin,
            cfg.cout,
            3,
            Init::HeNormal,
            true,
            cfg.spectral_norm,
        );
        let gn2 = GroupNormP::new(store, &format!("{name}.gn2"), cfg.cout, cfg.groups);
        let (temb_scale, temb_shift) = match cfg.time_dim {
            Some(d) => (
                Some(LinearP::new(store, rng, &format!("{name}.temb_s"), d, cfg.cout, Init::Zeros)),
                Some(LinearP::new(store, rng, &format!("{name}.temb_t"), d, cfg.cout, Init::Zeros)),
            ),
            None => (None, None),
        };
        // zero-init terminal conv: block starts as identity; never SN'd
        let conv2 = Conv2dP::new(
            store,
            rng,
            &format!("{name}.conv2"),
            cfg.cout,
            cfg.cout,
            3,
            Init::Zeros,
            true,
            false,
        );
        let skip = (cfg.cin != cfg.cout).then(|| {
            Conv2dP::new(
                store,
                rng,
                &format!("{name}.skip"),
                cfg.cin,
                cfg.cout,
                1,
                Init::XavierNormal,
                false,
                cfg.spectral_norm,
            )
        });
        Self {
            gn1,
            conv1,
            gn2,
            temb_scale,
            temb_shift,
            conv2,
            skip,
            act: cfg.act,
            dropout_rate: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, fw: &Fwd, x: Var, temb: Option<Var>) -> Var {
        let g = fw.g;
        let resolution = g.shape(x)[2];
        let mut h = self.act.apply(g, self.gn1.forward(fw, x));
        h = self.conv1.forward(fw, h);
        let mut h2 = self.gn2.forward(fw, h);
        if let (Some(ts), Some(tt), Some(te)) = (&self.temb_scale, &self.temb_shift, temb) {
            let s = g.add_scalar(ts.forward(fw, te), 1.0);
            let t = tt.forward(fw, te);
            h2 = g.chan_affine_batch(h2, s, t);
        }
        h2 = self.act.apply(g, h2);
        h2 = fw.dropout(h2, self.dropout_rate, resolution);
        let h_out = self.conv2.forward(fw, h2);
        let x_skip = match &self.skip {
            Some(s) => s.forward(fw, x),
            None => x,
        };
        g.add(x_skip, h_out)
    }

    pub fn collect_sn(&self, out: &mut Vec<SnWeight>) {
        if let Some(sn) = self.conv1.sn_weight() {
            out.push(sn);
        }
        if let Some(s) = &self.skip {
            if let Some(sn) = s.sn_weight() {
                out.push(sn);
            }
        }
    }
}

/// Up-sampling res-skip block: residual stream doubled in resolution, RGB
/// output-skip accumulator advanced alongside. Hosts an optional attention
/// module after the stack and an optional additive injection right after the
/// upsample (used for pyramid branch merges).
pub struct ResSkipUp {
    pub stack: Vec<ResBlock>,
    pub attn: Option<ScAttention>,
    pub to_rgb: ToRgb,
}

impl ResSkipUp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        blocks: usize,
        groups: usize,
        act: Activation,
        dropout_rate: f64,
        time_dim: Option<usize>,
    ) -> Self {
        let stack = (0..blocks.max(1))
            .map(|i| {
                ResBlock::new(
                    store,
                    rng,
                    &ResBlockCfg {
                        name: &format!("{name}.res{i}"),
                        cin: if i == 0 { cin } else { cout },
                        cout,
                        groups,
                        act,
                        dropout_rate,
                        time_dim,
                        spectral_norm: false,
                    },
                )
            })
            .collect();
        let to_rgb = ToRgb::new(store, rng, &format!("{name}.trgb"), cout);
        Self {
            stack,
            attn: None,
            to_rgb,
        }
    }

    /// (features at r, rgb accumulator at r) -> (features at 2r, rgb at 2r).
    pub fn forward(&self, fw: &Fwd, x: Var, skip_rgb: Var, temb: Option<Var>) -> Result<(Var, Var)> {
        self.forward_with_injection(fw, x, skip_rgb, temb, None)
    }

    /// Forward with an optional additive merge right after the upsample.
    pub fn forward_with_injection(
        &self,
        fw: &Fwd,
        x: Var,
        skip_rgb: Var,
        temb: Option<Var>,
        inject: Option<Var>,
    ) -> Result<(Var, Var)> {
        let g = fw.g;
        let xs = g.shape(x);
        let rs = g.shape(skip_rgb);
        if xs[2] != rs[2] || xs[3] != rs[3] {
            return Err(PdmError::invalid(format!(
                "res_skip_up_block: x at {}x{} but skip_rgb at {}x{}",
                xs[2], xs[3], rs[2], rs[3]
            )));
        }
        if rs[1] != 3 {
            return Err(PdmError::invalid(
                "res_skip_up_block: skip accumulator must have 3 channels",
            ));
        }
        let mut h = g.upsample2(x);
        if let Some(inj) = inject {
            h = g.add(h, inj);
        }
        for b in &self.stack {
            h = b.forward(fw, h, temb);
        }
        if let Some(attn) = &self.attn {
            h = attn.forward(fw, h);
        }
        let rgb = g.add(g.upsample2(skip_rgb), self.to_rgb.forward(fw, h));
        Ok((h, rgb))
    }
}

/// Down-sampling res-skip block: residual stream halved in resolution with the
/// RGB input-skip accumulator folded in.
pub struct ResSkipDown {
    pub stack: Vec<ResBlock>,
    pub from_rgb: FromRgb,
}

impl ResSkipDown {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        blocks: usize,
        groups: usize,
        act: Activation,
        dropout_rate: f64,
        spectral_norm: bool,
    ) -> Self {
        let stack = (0..blocks.max(1))
            .map(|i| {
                ResBlock::new(
                    store,
                    rng,
                    &ResBlockCfg {
                        name: &format!("{name}.res{i}"),
                        cin: if i == 0 { cin } else { cout },
                        cout,
                        groups,
                        act,
                        dropout_rate,
                        time_dim: None,
                        spectral_norm,
                    },
                )
            })
            .collect();
        let from_rgb = FromRgb::new(store, rng, &format!("{name}.frgb"), 3, cout, spectral_norm);
        Self { stack, from_rgb }
    }

    /// (features at r, input rgb at r) -> (features at r/2, input rgb at r/2).
    pub fn forward(&self, fw: &Fwd, x: Var, input_rgb: Var) -> Result<(Var, Var)> {
        let g = fw.g;
        let xs = g.shape(x);
        let rs = g.shape(input_rgb);
        if xs[2] != rs[2] || xs[3] != rs[3] {
            return Err(PdmError::invalid(format!(
                "res_skip_down_block: x at {}x{} but input_rgb at {}x{}",
                xs[2], xs[3], rs[2], rs[3]
            )));
        }
        let mut h = x;
        for b in &self.stack {
            h = b.forward(fw, h, None);
        }
        let rgb_down = g.avg_pool2(input_rgb);
        let y = g.add(g.avg_pool2(h), self.from_rgb.forward(fw, rgb_down));
        Ok((y, rgb_down))
    }

    pub fn collect_sn(&self, out: &mut Vec<SnWeight>) {
        for b in &self.stack {
            b.collect_sn(out);
        }
        if let Some(sn) = self.from_rgb.conv.sn_weight() {
            out.push(sn);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn weight_table_rows() {
        // (height=width, channels) -> (spatial, channel) to 4 decimals
        let rows = [
            (1024usize, 16usize, 1.0000, 0.0000),
            (512, 32, 0.9999, 0.0001),
            (256, 64, 0.9990, 0.0010),
            (128, 128, 0.9922, 0.0078),
            (64, 256, 0.9412, 0.0588),
            (32, 512, 0.6667, 0.3333),
            (16, 1024, 0.2000, 0.8000),
            (8, 1024, 0.0588, 0.9412),
        ];
        for (hw, c, ws, wc) in rows {
            let (s, ch) = sc_attention_weights(hw, hw, c).unwrap();
            assert!((s - ws).abs() < 5e-5, "{hw}x{hw}x{c}: {s} vs {ws}");
            assert!((ch - wc).abs() < 5e-5, "{hw}x{hw}x{c}: {ch} vs {wc}");
            assert_eq!(s + ch, 1.0);
        }
    }

    #[test]
    fn weights_symmetric_case_and_errors() {
        let (s, c) = sc_attention_weights(4, 4, 16).unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(c, 0.5);
        assert!(sc_attention_weights(0, 4, 16).is_err());
        assert!(sc_attention_weights(4, 4, 0).is_err());
    }

    #[test]
    fn dropout_schedule_endpoints_and_midpoint() {
        let s = DropoutSchedule::linear(0.35, 3).unwrap();
        assert_eq!(dropout_rate_at_level(0, &s).unwrap(), 0.35);
        assert_eq!(dropout_rate_at_level(1, &s).unwrap(), 0.175);
        assert_eq!(dropout_rate_at_level(2, &s).unwrap(), 0.0);
        assert!(dropout_rate_at_level(3, &s).is_err());
        let one = DropoutSchedule::linear(0.35, 1).unwrap();
        assert_eq!(dropout_rate_at_level(0, &one).unwrap(), 0.35);
        assert!(DropoutSchedule::linear(1.0, 2).is_err());
    }

    #[test]
    fn dropout_schedule_monotone() {
        for levels in 1..6 {
            let s = DropoutSchedule::linear(0.35, levels).unwrap();
            for i in 1..levels {
                assert!(s.per_level_rates[i] <= s.per_level_rates[i - 1]);
            }
        }
    }

    #[test]
    fn spectral_normalize_diag_and_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let w = arr2(&[[2.0, 0.0], [0.0, 1.0]]);
        let mut st = SpectralNormState::new(2, 200, &mut rng);
        let (wn, sigma) = spectral_normalize(w.view(), &mut st).unwrap();
        assert!((sigma - 2.0).abs() < 1e-9, "sigma {sigma}");
        assert!((wn[[0, 0]] - 1.0).abs() < 1e-6);
        assert!((wn[[1, 1]] - 0.5).abs() < 1e-6);
        // u stays unit norm
        let un = st.u.dot(&st.u).sqrt();
        assert!((un - 1.0).abs() < 1e-6);

        let eye = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let mut st2 = SpectralNormState::new(2, 50, &mut rng);
        let (wn2, s2) = spectral_normalize(eye.view(), &mut st2).unwrap();
        assert!((s2 - 1.0).abs() < 1e-9);
        assert!((&wn2 - &eye).iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-9);
    }

    #[test]
    fn spectral_normalize_zero_weight_returns_zeros() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let w = Array2::<f64>::zeros((3, 2));
        let mut st = SpectralNormState::new(3, 5, &mut rng);
        let u_before = st.u.clone();
        let (wn, sigma) = spectral_normalize(w.view(), &mut st).unwrap();
        assert_eq!(sigma, 0.0);
        assert!(wn.iter().all(|&v| v == 0.0));
        // degenerate input must not corrupt u
        assert_eq!(st.u, u_before);
    }

    #[test]
    fn spectral_normalize_random_matrix_vs_svd_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        use rand::Rng;
        let w = Array2::from_shape_fn((8, 8), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let mut st = SpectralNormState::new(8, 50, &mut rng);
        let (wn, _) = spectral_normalize(w.view(), &mut st).unwrap();
        let sigma = crate::linalg::spectral_norm_exact(wn.view());
        assert!((0.99..=1.01).contains(&sigma), "sigma {sigma}");
    }
}
