//! First-stage model: a spectrally-normalized input-skip encoder that emits a
//! pyramid of KL-regularized latents, and a heavyweight branched decoder with
//! output-skip RGB accumulation.

use crate::blocks::{
    Activation, DropoutSchedule, FromRgb, ResBlock, ResBlockCfg, ResSkipUp, ScAttention, ToRgb,
};
use crate::error::{PdmError, Result};
use crate::graph::{Arr, Graph, Var};
use crate::nn::{Adam, Conv2dP, DropoutPlan, Fwd, Init, ParamStore, SnWeight};
use crate::pyramid::{PyramidLatent, PyramidSpec};
use crate::rectflow::TrainRecord;
use crate::rng;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Per-level posterior statistics mirroring the latent shapes.
#[derive(Clone, Debug)]
pub struct VariationalStats {
    pub means: Vec<Arr>,
    pub logvars: Vec<Arr>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub spec: PyramidSpec,
    /// Feature widths per resolution, image resolution first, halving down to
    /// the coarsest latent resolution.
    pub enc_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    /// Residual blocks per encoder resolution; the decoder uses one more.
    pub enc_blocks_per_level: usize,
    /// Residual blocks in each decoder branch.
    pub branch_depth: usize,
    pub kl_weight: f64,
    pub activation: Activation,
    pub groups: usize,
    /// Decoder dropout: p_max at the coarsest resolution, linear to zero.
    pub dropout_p_max: f64,
    /// Spatial-channel attention only at resolutions <= this.
    pub attn_max_res: usize,
    pub spectral_norm_encoder: bool,
    /// 1-Lipschitz-composable configuration: plain chain of spectrally
    /// normalized 1x1 convs + tanh + average pooling, scaled heads, no
    /// residuals/skips/norms. Used by the contraction bound checks.
    pub lipschitz_strict: bool,
}

impl AutoencoderConfig {
    pub fn desk_default(spec: PyramidSpec) -> Self {
        Self {
            spec,
            enc_widths: vec![16, 24, 32, 48, 64],
            dec_widths: vec![16, 24, 32, 48, 64],
            enc_blocks_per_level: 1,
            branch_depth: 1,
            kl_weight: 1e-6,
            activation: Activation::Silu,
            groups: 4,
            dropout_p_max: 0.35,
            attn_max_res: 16,
            spectral_norm_encoder: true,
            lipschitz_strict: false,
        }
    }

    /// Resolutions the encoder/decoder pass through, image resolution first.
    pub fn resolutions(&self) -> Result<Vec<usize>> {
        let r_img = self.spec.image_size.0;
        let r_min = self.spec.levels[0].resolution;
        let mut out = Vec::new();
        let mut r = r_img;
        while r > r_min {
            out.push(r);
            if r % 2 != 0 {
                return Err(PdmError::invalid(format!(
                    "resolution chain from {r_img} cannot reach {r_min}"
                )));
            }
            r /= 2;
        }
        if r != r_min {
            return Err(PdmError::invalid(format!(
                "coarsest latent resolution {r_min} is not image size over a power of two"
            )));
        }
        out.push(r_min);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let res = self.resolutions()?;
        if self.enc_widths.len() != res.len() || self.dec_widths.len() != res.len() {
            return Err(PdmError::invalid(format!(
                "need one width per resolution {res:?}: got enc {} / dec {}",
                self.enc_widths.len(),
                self.dec_widths.len()
            )));
        }
        for level in &self.spec.levels {
            if !res.contains(&level.resolution) {
                return Err(PdmError::invalid(format!(
                    "latent resolution {} not on the power-of-two chain {res:?}",
                    level.resolution
                )));
            }
        }
        if self.enc_blocks_per_level == 0 || self.branch_depth == 0 {
            return Err(PdmError::invalid("block counts must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p_max) {
            return Err(PdmError::invalid("dropout_p_max must lie in [0,1)"));
        }
        Ok(())
    }

    fn depth_of_resolution(&self, resolution: usize) -> usize {
        let r_img = self.spec.image_size.0;
        let mut d = 0;
        let mut r = r_img;
        while r > resolution {
            r /= 2;
            d += 1;
        }
        d
    }
}

/// Kernelized linear attention (elu+1 feature map) over pixels; O(N C^2).
pub struct LinearAttention {
    pub norm: crate::nn::GroupNormP,
    pub q: Conv2dP,
    pub k: Conv2dP,
    pub v: Conv2dP,
    pub proj: Conv2dP,
}

impl LinearAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
        groups: usize,
        spectral_norm: bool,
    ) -> Self {
        let mk = |store: &mut ParamStore, rng: &mut ChaCha12Rng, n: String, init, sn| {
            Conv2dP::new(store, rng, &n, channels, channels, 1, init, true, sn)
        };
        Self {
            norm: crate::nn::GroupNormP::new(store, &format!("{name}.norm"), channels, groups),
            q: mk(store, rng, format!("{name}.q"), Init::XavierNormal, spectral_norm),
            k: mk(store, rng, format!("{name}.k"), Init::XavierNormal, spectral_norm),
            v: mk(store, rng, format!("{name}.v"), Init::XavierNormal, spectral_norm),
            proj: mk(store, rng, format!("{name}.proj"), Init::Zeros, false),
        }
    }

    pub fn forward(&self, fw: &Fwd, x: Var) -> Var {
        let g = fw.g;
        let shape = g.shape(x);
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = h * w;
        let hn = self.norm.forward(fw, x);
        let q = g.elu1p(g.reshape(self.q.forward(fw, hn), &[b, c, n]));
        let k = g.elu1p(g.reshape(self.k.forward(fw, hn), &[b, c, n]));
        let v = g.reshape(self.v.forward(fw, hn), &[b, c, n]);
        // S[b, ck, cv] = sum_m k[b, ck, m] v[b, cv, m]
        let s = g.bmm(k, g.transpose12(v));
        // numer[b, cv, n] = sum_ck S[b, ck, cv] q[b, ck, n]
        let numer = g.bmm(g.transpose12(s), q);
        // denom[b, 1, n] = sum_ck ksum[b, ck] q[b, ck, n], broadcast over cv
        let ones_n = g.input(ArrayD::from_elem(IxDyn(&[b, n, 1]), 1.0));
        let ksum = g.bmm(k, ones_n); // (b, c, 1)
        let denom_row = g.bmm(g.transpose12(ksum), q); // (b, 1, n)
        let ones_c = g.input(ArrayD::from_elem(IxDyn(&[b, c, 1]), 1.0));
        let denom = g.add_scalar(g.bmm(ones_c, denom_row), 1e-6); // (b, c, n)
        let out = g.div(numer, denom);
        let out = g.reshape(out, &[b, c, h, w]);
        g.add(x, self.proj.forward(fw, out))
    }

    fn collect_sn(&self, out: &mut Vec<SnWeight>) {
        for conv in [&self.q, &self.k, &self.v] {
            if let Some(sn) = conv.sn_weight() {
                out.push(sn);
            }
        }
    }
}

struct LatentHead {
    mean: Conv2dP,
    logvar: Conv2dP,
    depth: usize,
}

struct EncLevel {
    blocks: Vec<ResBlock>,
    attn: Option<LinearAttention>,
    /// Input-skip merge used by the transition into the next resolution;
    /// None at the bottom.
    from_rgb: Option<FromRgb>,
}

struct StrictLevel {
    convs: Vec<Conv2dP>,
}

enum EncoderBody {
    Standard { stem: FromRgb, levels: Vec<EncLevel> },
    Strict { stem: Conv2dP, levels: Vec<StrictLevel> },
}

/// The pyramid encoder. Standard mode: input-skip res blocks + linear
/// attention with spectral norm on all designated weights. Strict mode: the
/// certified 1-Lipschitz chain used by the contraction bound suite.
pub struct Encoder {
    body: EncoderBody,
    heads: Vec<LatentHead>,
    head_scale: f64,
    resolutions: Vec<usize>,
}

impl Encoder {
    fn new(cfg: &AutoencoderConfig, store: &mut ParamStore, rng: &mut ChaCha12Rng) -> Result<Self> {
        let res = cfg.resolutions()?;
        let nres = res.len();
        let mut heads = Vec::new();
        let head_scale = if cfg.lipschitz_strict {
            1.0 / (cfg.spec.num_levels() as f64).sqrt()
        } else {
            1.0
        };
        let body = if cfg.lipschitz_strict {
            let stem = Conv2dP::new(
                store,
                rng,
                "enc.stem",
                cfg.spec.image_channels,
                cfg.enc_widths[0],
                1,
                Init::XavierNormal,
                true,
                true,
            );
            let mut levels = Vec::new();
            for d in 0..nres {
                let cin = if d == 0 {
                    cfg.enc_widths[0]
                } else {
                    cfg.enc_widths[d - 1]
                };
                let mut convs = Vec::new();
                for b in 0..cfg.enc_blocks_per_level {
                    let ci = if b == 0 { cin } else { cfg.enc_widths[d] };
                    convs.push(Conv2dP::new(
                        store,
                        rng,
                        &format!("enc.l{d}.conv{b}"),
                        ci,
                        cfg.enc_widths[d],
                        1,
                        Init::XavierNormal,
                        true,
                        true,
                    ));
                }
                levels.push(StrictLevel { convs });
            }
            EncoderBody::Strict { stem, levels }
        } else {
            let stem = FromRgb::new(
                store,
                rng,
                "enc.stem",
                cfg.spec.image_channels,
                cfg.enc_widths[0],
                cfg.spectral_norm_encoder,
            );
            let mut levels = Vec::new();
            for d in 0..nres {
                let cin = if d == 0 {
                    cfg.enc_widths[0]
                } else {
                    cfg.enc_widths[d - 1]
                };
                let mut blocks = Vec::new();
                for b in 0..cfg.enc_blocks_per_level {
                    let ci = if b == 0 { cin } else { cfg.enc_widths[d] };
                    blocks.push(ResBlock::new(
                        store,
                        rng,
                        &ResBlockCfg {
                            name: &format!("enc.l{d}.res{b}"),
                            cin: ci,
                            cout: cfg.enc_widths[d],
                            groups: cfg.groups,
                            act: cfg.activation,
                            dropout_rate: 0.0,
                            time_dim: None,
                            spectral_norm: cfg.spectral_norm_encoder,
                        },
                    ));
                }
                let attn = Some(LinearAttention::new(
                    store,
                    rng,
                    &format!("enc.l{d}.attn"),
                    cfg.enc_widths[d],
                    cfg.groups,
                    cfg.spectral_norm_encoder,
                ));
                let from_rgb = (d + 1 < nres).then(|| {
                    FromRgb::new(
                        store,
                        rng,
                        &format!("enc.l{d}.frgb"),
                        cfg.spec.image_channels,
                        cfg.enc_widths[d],
                        cfg.spectral_norm_encoder,
                    )
                });
                levels.push(EncLevel {
                    blocks,
                    attn,
                    from_rgb,
                });
            }
            EncoderBody::Standard { stem, levels }
        };
        for (i, level) in cfg.spec.levels.iter().enumerate() {
            let d = cfg.depth_of_resolution(level.resolution);
            let w = cfg.enc_widths[d];
            heads.push(LatentHead {
                mean: Conv2dP::new(
                    store,
                    rng,
                    &format!("enc.head{i}.mean"),
                    w,
                    level.channels,
                    1,
                    Init::XavierNormal,
                    true,
                    cfg.spectral_norm_encoder || cfg.lipschitz_strict,
                ),
                logvar: Conv2dP::new(
                    store,
                    rng,
                    &format!("enc.head{i}.logvar"),
                    w,
                    level.channels,
                    1,
                    Init::Zeros,
                    true,
                    false,
                ),
                depth: d,
            });
        }
        Ok(Self {
            body,
            heads,
            head_scale,
            resolutions: res,
        })
    }

    /// Graph forward: image -> per-level (mean, logvar).
    pub fn forward(&self, fw: &Fwd, image: Var) -> (Vec<Var>, Vec<Var>) {
        let g = fw.g;
        let nres = self.resolutions.len();
        let mut means = vec![None; self.heads.len()];
        let mut logvars = vec![None; self.heads.len()];
        match &self.body {
            EncoderBody::Standard { stem, levels } => {
                let mut h = stem.forward(fw, image);
                let mut rgb = image;
                for (d, level) in levels.iter().enumerate() {
                    for b in &level.blocks {
                        h = b.forward(fw, h, None);
                    }
                    if let Some(attn) = &level.attn {
                        h = attn.forward(fw, h);
                    }
                    self.emit_heads(fw, d, h, &mut means, &mut logvars);
                    if d + 1 < nres {
                        let rgb_down = g.avg_pool2(rgb);
                        let merged = level
                            .from_rgb
                            .as_ref()
                            .map(|f| f.forward(fw, rgb_down))
                            .expect("non-bottom level has from_rgb");
                        h = g.add(g.avg_pool2(h), merged);
                        rgb = rgb_down;
                    }
                }
            }
            EncoderBody::Strict { stem, levels } => {
                let mut h = stem.forward(fw, image);
                for (d, level) in levels.iter().enumerate() {
                    for conv in &level.convs {
                        h = g.tanh(conv.forward(fw, h));
                    }
                    self.emit_heads(fw, d, h, &mut means, &mut logvars);
                    if d + 1 < nres {
                        h = g.avg_pool2(h);
                    }
                }
            }
        }
        (
            means.into_iter().map(|m| m.unwrap()).collect(),
            logvars.into_iter().map(|l| l.unwrap()).collect(),
        )
    }

    fn emit_heads(
        &self,
        fw: &Fwd,
        depth: usize,
        h: Var,
        means: &mut [Option<Var>],
        logvars: &mut [Option<Var>],
    ) {
        for (i, head) in self.heads.iter().enumerate() {
            if head.depth == depth {
                let m = head.mean.forward(fw, h);
                means[i] = Some(if self.head_scale != 1.0 {
                    fw.g.scale(m, self.head_scale)
                } else {
                    m
                });
                logvars[i] = Some(head.logvar.forward(fw, h));
            }
        }
    }

    pub fn collect_sn(&self, out: &mut Vec<SnWeight>) {
        match &self.body {
            EncoderBody::Standard { stem, levels } => {
                if let Some(sn) = stem.conv.sn_weight() {
                    out.push(sn);
                }
                for level in levels {
                    for b in &level.blocks {
                        b.collect_sn(out);
                    }
                    if let Some(a) = &level.attn {
                        a.collect_sn(out);
                    }
                    if let Some(f) = &level.from_rgb {
                        if let Some(sn) = f.conv.sn_weight() {
                            out.push(sn);
                        }
                    }
                }
            }
            EncoderBody::Strict { stem, levels } => {
                if let Some(sn) = stem.sn_weight() {
                    out.push(sn);
                }
                for level in levels {
                    for c in &level.convs {
                        if let Some(sn) = c.sn_weight() {
                            out.push(sn);
                        }
                    }
                }
            }
        }
        for head in &self.heads {
            if let Some(sn) = head.mean.sn_weight() {
                out.push(sn);
            }
        }
    }

    /// Residual blocks per resolution (structural description).
    pub fn blocks_per_resolution(&self) -> Vec<(usize, usize)> {
        match &self.body {
            EncoderBody::Standard { levels, .. } => self
                .resolutions
                .iter()
                .zip(levels)
                .map(|(r, l)| (*r, l.blocks.len()))
                .collect(),
            EncoderBody::Strict { levels, .. } => self
                .resolutions
                .iter()
                .zip(levels)
                .map(|(r, l)| (*r, l.convs.len()))
                .collect(),
        }
    }
}

struct DecBranch {
    blocks: Vec<ResBlock>,
    attn: Option<ScAttention>,
    /// None for the coarsest level (it is the backbone origin).
    inject: Option<Conv2dP>,
    depth: usize,
}

/// The branched pyramid decoder: backbone ascends with res-skip up blocks and
/// an RGB output-skip accumulator; each latent level feeds a branch injected
/// at its matching resolution.
pub struct Decoder {
    branches: Vec<DecBranch>,
    bottom: Vec<ResBlock>,
    bottom_attn: Option<ScAttention>,
    bottom_rgb: ToRgb,
    ups: Vec<ResSkipUp>,
    resolutions: Vec<usize>,
}

impl Decoder {
    fn new(cfg: &AutoencoderConfig, store: &mut ParamStore, rng: &mut ChaCha12Rng) -> Result<Self> {
        let res = cfg.resolutions()?;
        let nres = res.len();
        let dec_blocks = cfg.enc_blocks_per_level + 1;
        let schedule = DropoutSchedule::linear(cfg.dropout_p_max, nres)?;
        // schedule index 0 = lowest resolution = depth nres-1
        let rate_at_depth = |d: usize| schedule.per_level_rates[nres - 1 - d];

        let mut branches = Vec::new();
        for (i, level) in cfg.spec.levels.iter().enumerate() {
            let d = cfg.depth_of_resolution(level.resolution);
            // Branch output width: the backbone arrival width at its injection
            // point (the coarser side of the up transition into depth d), or
            // the bottom width for the coarsest level.
            let bw = if i == 0 {
                cfg.dec_widths[nres - 1]
            } else {
                cfg.dec_widths[d + 1]
            };
            let mut blocks = Vec::new();
            for b in 0..cfg.branch_depth {
                let ci = if b == 0 { level.channels } else { bw };
                blocks.push(ResBlock::new(
                    store,
                    rng,
                    &ResBlockCfg {
                        name: &format!("dec.branch{i}.res{b}"),
                        cin: ci,
                        cout: bw,
                        groups: cfg.groups,
                        act: cfg.activation,
                        dropout_rate: rate_at_depth(d),
                        time_dim: None,
                        spectral_norm: false,
                    },
                ));
            }
            let attn = (level.resolution <= cfg.attn_max_res).then(|| {
                ScAttention::new(
                    store,
                    rng,
                    &format!("dec.branch{i}.attn"),
                    bw,
                    cfg.groups,
                    false,
                )
            });
            let inject = (i > 0).then(|| {
                Conv2dP::new(
                    store,
                    rng,
                    &format!("dec.branch{i}.inject"),
                    bw,
                    bw,
                    1,
                    Init::XavierNormal,
                    true,
                    false,
                )
            });
            branches.push(DecBranch {
                blocks,
                attn,
                inject,
                depth: d,
            });
        }

        let bottom_w = cfg.dec_widths[nres - 1];
        let bottom = (0..dec_blocks)
            .map(|b| {
                ResBlock::new(
                    store,
                    rng,
                    &ResBlockCfg {
                        name: &format!("dec.bottom.res{b}"),
                        cin: bottom_w,
                        cout: bottom_w,
                        groups: cfg.groups,
                        act: cfg.activation,
                        dropout_rate: rate_at_depth(nres - 1),
                        time_dim: None,
                        spectral_norm: false,
                    },
                )
            })
            .collect();
        let bottom_attn = (res[nres - 1] <= cfg.attn_max_res).then(|| {
            ScAttention::new(store, rng, "dec.bottom.attn", bottom_w, cfg.groups, false)
        });
        let bottom_rgb = ToRgb::new(store, rng, "dec.bottom.trgb", bottom_w);

        // Up transitions into depth d (fine side), built coarse-to-fine.
        let mut ups = Vec::new();
        for d in (0..nres - 1).rev() {
            let mut up = ResSkipUp::new(
                store,
                rng,
                &format!("dec.up{d}"),
                cfg.dec_widths[d + 1],
                cfg.dec_widths[d],
                dec_blocks,
                cfg.groups,
                cfg.activation,
                rate_at_depth(d),
                None,
            );
            if res[d] <= cfg.attn_max_res {
                up.attn = Some(ScAttention::new(
                    store,
                    rng,
                    &format!("dec.up{d}.attn"),
                    cfg.dec_widths[d],
                    cfg.groups,
                    false,
                ));
            }
            ups.push(up);
        }

        Ok(Self {
            branches,
            bottom,
            bottom_attn,
            bottom_rgb,
            ups,
            resolutions: res,
        })
    }

    fn branch_forward(&self, fw: &Fwd, i: usize, z: Var) -> Var {
        let br = &self.branches[i];
        let mut h = z;
        for b in &br.blocks {
            h = b.forward(fw, h, None);
        }
        if let Some(attn) = &br.attn {
            h = attn.forward(fw, h);
        }
        match &br.inject {
            Some(conv) => conv.forward(fw, h),
            None => h,
        }
    }

    /// Graph forward: per-level latents -> image in [-1, 1].
    pub fn forward(&self, fw: &Fwd, latents: &[Var]) -> Var {
        let g = fw.g;
        let nres = self.resolutions.len();
        // branch outputs keyed by arrival depth
        let mut injections: Vec<Option<Var>> = vec![None; nres];
        for i in 0..self.branches.len() {
            let out = self.branch_forward(fw, i, latents[i]);
            let d = self.branches[i].depth;
            injections[d] = Some(match injections[d] {
                Some(prev) => g.add(prev, out),
                None => out,
            });
        }
        let mut h = injections[nres - 1]
            .take()
            .expect("coarsest latent drives the backbone");
        for b in &self.bottom {
            h = b.forward(fw, h, None);
        }
        if let Some(attn) = &self.bottom_attn {
            h = attn.forward(fw, h);
        }
        let mut rgb = self.bottom_rgb.forward(fw, h);
        for (k, up) in self.ups.iter().enumerate() {
            let d = nres - 2 - k; // arrival depth
            let inject = injections[d].take();
            let (nh, nrgb) = up
                .forward_with_injection(fw, h, rgb, None, inject)
                .expect("decoder wiring keeps resolutions aligned");
            h = nh;
            rgb = nrgb;
        }
        g.tanh(rgb)
    }

    pub fn blocks_per_resolution(&self) -> Vec<(usize, usize)> {
        let nres = self.resolutions.len();
        let mut out = vec![(self.resolutions[nres - 1], self.bottom.len())];
        for (k, up) in self.ups.iter().enumerate() {
            let d = nres - 2 - k;
            out.push((self.resolutions[d], up.stack.len()));
        }
        out.reverse();
        out
    }
}

/// The two-stage first model.
pub struct PyramidAutoencoder {
    pub cfg: AutoencoderConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Posterior mean.
    Deterministic,
    /// mean + exp(logvar/2) * noise, reparameterized.
    Stochastic { seed: u64 },
}

impl PyramidAutoencoder {
    pub fn build(cfg: AutoencoderConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "ae-init", 0, 0);
        let encoder = Encoder::new(&cfg, &mut store, &mut rng)?;
        let decoder = Decoder::new(&cfg, &mut store, &mut rng)?;
        Ok((
            Self {
                cfg,
                encoder,
                decoder,
            },
            store,
        ))
    }

    pub fn collect_sn(&self) -> Vec<SnWeight> {
        let mut out = Vec::new();
        self.encoder.collect_sn(&mut out);
        out
    }

    pub fn validate_image(&self, image: &Arr) -> Result<()> {
        let (h, w) = self.cfg.spec.image_size;
        if image.ndim() != 4
            || image.shape()[1] != self.cfg.spec.image_channels
            || image.shape()[2] != h
            || image.shape()[3] != w
        {
            return Err(PdmError::shape(
                format!("(B,{},{h},{w})", self.cfg.spec.image_channels),
                format!("{:?}", image.shape()),
            ));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(PdmError::Data("non-finite pixel values".into()));
        }
        Ok(())
    }

    /// Graph-level encode: (sampled latents, means, logvars).
    pub fn encode_graph(
        &self,
        fw: &Fwd,
        image: Var,
        mode: EncodeMode,
    ) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
        let g = fw.g;
        let (means, logvars) = self.encoder.forward(fw, image);
        let latents = match mode {
            EncodeMode::Deterministic => means.clone(),
            EncodeMode::Stochastic { seed } => means
                .iter()
                .zip(&logvars)
                .enumerate()
                .map(|(i, (m, lv))| {
                    let shape = g.shape(*m);
                    let mut r = rng::stream(seed, "ae-enc-noise", i as u64, 0);
                    let eps = g.input(ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
                        use rand_distr::{Distribution, StandardNormal};
                        let z: f64 = StandardNormal.sample(&mut r);
                        z
                    }));
                    let std = g.exp(g.scale(*lv, 0.5));
                    g.add(*m, g.mul(std, eps))
                })
                .collect(),
        };
        (latents, means, logvars)
    }

    /// Encode a batch of images. Deterministic mode returns posterior means.
    pub fn encode(
        &self,
        store: &ParamStore,
        image: &Arr,
        mode: EncodeMode,
    ) -> Result<(PyramidLatent, VariationalStats)> {
        self.validate_image(image)?;
        let g = Graph::new();
        let fw = Fwd::eval(&g, store);
        let img = g.input(image.clone());
        let (latents, means, logvars) = self.encode_graph(&fw, img, mode);
        let latent = PyramidLatent::new(latents.iter().map(|v| g.array(*v)).collect())?;
        latent.validate(&self.cfg.spec)?;
        Ok((
            latent,
            VariationalStats {
                means: means.iter().map(|v| g.array(*v)).collect(),
                logvars: logvars.iter().map(|v| g.array(*v)).collect(),
            },
        ))
    }

    /// Decode a latent pyramid to images in [-1, 1].
    pub fn decode(&self, store: &ParamStore, latent: &PyramidLatent) -> Result<Arr> {
        latent.validate(&self.cfg.spec)?;
        let g = Graph::new();
        let fw = Fwd::eval(&g, store);
        let vars: Vec<Var> = latent.tensors.iter().map(|t| g.input(t.clone())).collect();
        Ok(g.array(self.decoder.forward(&fw, &vars)))
    }
}

/// Graph-level reconstruction objective: L1 + kl_weight * KL(N(mean, var) ||
/// N(0, I)), KL summed over latent elements and averaged over the batch.
pub fn reconstruction_loss_graph(
    g: &Graph,
    x: Var,
    xhat: Var,
    means: &[Var],
    logvars: &[Var],
    kl_weight: f64,
) -> Var {
    let l1 = g.mean_all(g.abs(g.sub(xhat, x)));
    if kl_weight == 0.0 || means.is_empty() {
        return l1;
    }
    let batch = g.shape(x)[0] as f64;
    let mut kl_sum: Option<Var> = None;
    for (m, lv) in means.iter().zip(logvars) {
        // 0.5 * (mu^2 + e^lv - 1 - lv) per element
        let term = g.sub(g.add(g.mul(*m, *m), g.exp(*lv)), g.add_scalar(*lv, 1.0));
        let s = g.sum_all(term);
        kl_sum = Some(match kl_sum {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    let kl = g.scale(kl_sum.unwrap(), 0.5 / batch);
    g.add(l1, g.scale(kl, kl_weight))
}

/// Value-level surface of the reconstruction loss.
pub fn reconstruction_loss(
    x: &Arr,
    xhat: &Arr,
    stats: &VariationalStats,
    kl_weight: f64,
) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(PdmError::shape(
            format!("{:?}", x.shape()),
            format!("{:?}", xhat.shape()),
        ));
    }
    let g = Graph::new();
    let xv = g.input(x.clone());
    let xh = g.input(xhat.clone());
    let means: Vec<Var> = stats.means.iter().map(|m| g.input(m.clone())).collect();
    let logvars: Vec<Var> = stats.logvars.iter().map(|l| g.input(l.clone())).collect();
    let loss = reconstruction_loss_graph(&g, xv, xh, &means, &logvars, kl_weight);
    Ok(g.scalar_value(loss))
}

/// Peak signal-to-noise ratio for images in [-1, 1] (peak-to-peak 2).
pub fn psnr(x: &Arr, xhat: &Arr) -> f64 {
    assert_eq!(x.shape(), xhat.shape());
    let mse = x
        .iter()
        .zip(xhat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (4.0 / mse).log10()
}

/// Autoencoder training driver: Adam on the reconstruction objective with one
/// power-iteration update per optimizer step.
pub struct AeTrainer {
    pub model: PyramidAutoencoder,
    pub store: ParamStore,
    pub opt: Adam,
    sn: Vec<SnWeight>,
    pub seed: u64,
    pub step: u64,
}

impl AeTrainer {
    pub fn new(
        model: PyramidAutoencoder,
        store: ParamStore,
        lr: f64,
        grad_clip: f64,
        seed: u64,
    ) -> Self {
        let sn = model.collect_sn();
        Self {
            model,
            store,
            opt: Adam::new(lr, Some(grad_clip)),
            sn,
            seed,
            step: 0,
        }
    }

    /// One optimizer step over `images`, optionally split into `accum` equal
    /// microbatches whose gradients are averaged before the update.
    pub fn train_step(&mut self, images: &Arr, accum: usize) -> Result<TrainRecord> {
        let t0 = std::time::Instant::now();
        self.model.validate_image(images)?;
        let batch = images.shape()[0];
        if accum == 0 || batch % accum != 0 {
            return Err(PdmError::invalid(format!(
                "accumulation factor {accum} must evenly divide batch {batch}"
            )));
        }
        crate::nn::update_sn_states(&mut self.store, &self.sn, 1, 1e-12);
        let chunk = batch / accum;
        let mut total: std::collections::BTreeMap<crate::nn::ParamId, Arr> = Default::default();
        let mut loss_total = 0.0;
        let mut l1_total = 0.0;
        let mut kl_total = 0.0;
        for c in 0..accum {
            let slice = images
                .slice_axis(
                    ndarray::Axis(0),
                    ndarray::Slice::from(c * chunk..(c + 1) * chunk),
                )
                .to_owned();
            let item_seeds: Vec<u64> = (0..chunk)
                .map(|j| rng::derive_seed(self.seed, "ae-item", self.step, (c * chunk + j) as u64))
                .collect();
            let g = Graph::new();
            let fw = Fwd::train(&g, &self.store, DropoutPlan::new(item_seeds));
            let img = g.input(slice.into_dyn());
            // one noise draw per item index, chunking-invariant
            let noise_seed = rng::derive_seed(self.seed, "ae-noise", self.step, (c * chunk) as u64);
            let (latents, means, logvars) =
                self.model
                    .encode_graph(&fw, img, EncodeMode::Stochastic { seed: noise_seed });
            let xhat = self.model.decoder.forward(&fw, &latents);
            let loss = reconstruction_loss_graph(
                &g,
                img,
                xhat,
                &means,
                &logvars,
                self.model.cfg.kl_weight,
            );
            let l1 = g.scalar_value(g.mean_all(g.abs(g.sub(xhat, img))));
            let loss_val = g.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(PdmError::Training {
                    step: self.step,
                    msg: format!("non-finite reconstruction loss {loss_val}"),
                });
            }
            loss_total += loss_val / accum as f64;
            l1_total += l1 / accum as f64;
            kl_total += (loss_val - l1) / accum as f64;
            let grads = g.backward(loss);
            for (id, gr) in fw.collect_grads(&grads) {
                let gr = gr / accum as f64;
                total.entry(id).and_modify(|acc| *acc += &gr).or_insert(gr);
            }
        }
        self.opt.step(&mut self.store, &total);
        self.step += 1;
        Ok(TrainRecord {
            step: self.step,
            loss: loss_total,
            per_level: vec![l1_total, kl_total],
            lr: self.opt.lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> AutoencoderConfig {
        let spec = PyramidSpec::new(vec![(4, 4), (8, 3)], (16, 16), 3).unwrap();
        AutoencoderConfig {
            enc_widths: vec![6, 8, 10],
            dec_widths: vec![6, 8, 10],
            enc_blocks_per_level: 1,
            branch_depth: 1,
            kl_weight: 1e-6,
            activation: Activation::Silu,
            groups: 2,
            dropout_p_max: 0.0,
            attn_max_res: 8,
            spectral_norm_encoder: true,
            lipschitz_strict: false,
            spec,
        }
    }

    #[test]
    fn encode_decode_shapes_roundtrip() {
        let (model, store) = PyramidAutoencoder::build(tiny_cfg(), 7).unwrap();
        let img = ArrayD::from_elem(IxDyn(&[2, 3, 16, 16]), 0.1);
        let (lat, stats) = model
            .encode(&store, &img, EncodeMode::Deterministic)
            .unwrap();
        assert_eq!(lat.tensors[0].shape(), &[2, 4, 4, 4]);
        assert_eq!(lat.tensors[1].shape(), &[2, 3, 8, 8]);
        assert_eq!(stats.means[0].shape(), lat.tensors[0].shape());
        let out = model.decode(&store, &lat).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_encode_is_repeatable_and_stochastic_differs() {
        let (model, store) = PyramidAutoencoder::build(tiny_cfg(), 7).unwrap();
        let img = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |ix| {
            ((ix[2] + ix[3]) as f64 / 15.0) - 1.0
        });
        let (a, _) = model
            .encode(&store, &img, EncodeMode::Deterministic)
            .unwrap();
        let (b, _) = model
            .encode(&store, &img, EncodeMode::Deterministic)
            .unwrap();
        assert_eq!(a, b);
        let (c, _) = model
            .encode(&store, &img, EncodeMode::Stochastic { seed: 3 })
            .unwrap();
        let (d, _) = model
            .encode(&store, &img, EncodeMode::Stochastic { seed: 3 })
            .unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let (model, store) = PyramidAutoencoder::build(tiny_cfg(), 7).unwrap();
        let wrong = ArrayD::from_elem(IxDyn(&[1, 3, 8, 8]), 0.0);
        assert!(model
            .encode(&store, &wrong, EncodeMode::Deterministic)
            .is_err());
        let mut nan = ArrayD::from_elem(IxDyn(&[1, 3, 16, 16]), 0.0);
        nan[[0, 0, 0, 0]] = f64::NAN;
        assert!(matches!(
            model.encode(&store, &nan, EncodeMode::Deterministic),
            Err(PdmError::Data(_))
        ));
    }

    #[test]
    fn loss_contract_examples() {
        let x = ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), 0.25);
        // perfect reconstruction, standard-normal posterior
        let stats = VariationalStats {
            means: vec![ArrayD::zeros(IxDyn(&[2, 2, 2, 2]))],
            logvars: vec![ArrayD::zeros(IxDyn(&[2, 2, 2, 2]))],
        };
        let l = reconstruction_loss(&x, &x, &stats, 1.0).unwrap();
        assert!(l.abs() < 1e-12);
        // constant offset of 1 with zero kl weight
        let xh = &x + 1.0;
        let l = reconstruction_loss(&x, &xh, &stats, 0.0).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        // closed-form KL of N(1,1) vs N(0,1): 0.5 per element
        let stats1 = VariationalStats {
            means: vec![ArrayD::from_elem(IxDyn(&[2, 2, 2, 2]), 1.0)],
            logvars: vec![ArrayD::zeros(IxDyn(&[2, 2, 2, 2]))],
        };
        let l = reconstruction_loss(&x, &x, &stats1, 1.0).unwrap();
        let per_image_elements = (2 * 2 * 2 * 2) as f64 / 2.0; // batch 2 halves the sum
        assert!((l - 0.5 * per_image_elements).abs() < 1e-12, "kl {l}");
        // shape mismatch
        let bad = ArrayD::zeros(IxDyn(&[1, 3, 4, 4]));
        assert!(reconstruction_loss(&x, &bad, &stats, 1.0).is_err());
    }

    #[test]
    fn zero_latents_with_fresh_decoder_give_constant_image() {
        let cfg = tiny_cfg();
        let (model, store) = PyramidAutoencoder::build(cfg, 11).unwrap();
        let zeros = PyramidLatent::zeros(&model.cfg.spec, 1);
        let out = model.decode(&store, &zeros).unwrap();
        // All pixels identical per channel: zero latents plus zero-init
        // terminal convs collapse spatial structure.
        for c in 0..3 {
            let ch = out.slice(ndarray::s![0, c, .., ..]);
            let first = ch[[0, 0]];
            assert!(
                ch.iter().all(|v| (v - first).abs() < 1e-9),
                "channel {c} not constant"
            );
        }
    }

    #[test]
    fn decoder_has_one_more_block_than_encoder_per_resolution() {
        let (model, _store) = PyramidAutoencoder::build(tiny_cfg(), 7).unwrap();
        let enc = model.encoder.blocks_per_resolution();
        let dec = model.decoder.blocks_per_resolution();
        assert_eq!(enc.len(), dec.len());
        for ((re, ne), (rd, nd)) in enc.iter().zip(dec.iter()) {
            assert_eq!(re, rd);
            assert_eq!(*nd, ne + 1, "resolution {re}");
        }
    }

    #[test]
    fn ae_train_step_decreases_loss_on_tiny_overfit() {
        let mut cfg = tiny_cfg();
        cfg.kl_weight = 0.0;
        let (model, store) = PyramidAutoencoder::build(cfg, 3).unwrap();
        let mut tr = AeTrainer::new(model, store, 2e-3, 1.0, 99);
        let img = ArrayD::from_shape_fn(IxDyn(&[2, 3, 16, 16]), |ix| {
            0.8 * ((ix[1] as f64 - 1.0) * 0.3 + ((ix[2] / 4 + ix[3] / 4) % 2) as f64 * 0.5 - 0.25)
        });
        let first = tr.train_step(&img, 1).unwrap().loss;
        let mut last = first;
        for _ in 0..30 {
            last = tr.train_step(&img, 1).unwrap().loss;
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }
}
