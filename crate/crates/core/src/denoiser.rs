//! Conditional step-estimation network.
//!
//! The noise estimate for state `x_t` conditioned on the under-sampled slice
//! is `E(F(x_t) + G(cond), H(t))`: `F` and `G` are convolutional heads whose
//! feature maps are summed at the input of a U-Net `E`, `G` additionally runs
//! a chain of residual-in-residual dense blocks over the condition, and `H`
//! is a learned per-timestep embedding table injected into every residual
//! block of `E` by a per-block linear projection.
//!
//! Gradients are hand-derived reverse passes, validated against central
//! finite differences in double precision (see the acceptance suite).

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, norm_groups, silu, silu_backward, silu_vec, silu_vec_backward,
    split_channels, upsample2, upsample2_backward, Conv2d, GroupNorm, GroupNormCache, Linear,
    Scalar,
};
use crate::rng::substream;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub channel_multipliers: Vec<usize>,
    pub n_rrdb: usize,
    pub time_embed_dim: usize,
    /// Size of the timestep lookup table; set to the training step count.
    pub t_max: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl DenoiserConfig {
    /// Desk-scale default: trains on one CPU core in minutes.
    pub fn toy(t_max: usize, in_h: usize, in_w: usize) -> Self {
        Self {
            base_channels: 16,
            depth: 3,
            channel_multipliers: vec![1, 1, 2],
            n_rrdb: 2,
            time_embed_dim: 64,
            t_max,
            in_h,
            in_w,
        }
    }

    /// Full-scale configuration (not runnable here in reasonable time; kept
    /// for parameter accounting).
    pub fn full_scale(t_max: usize, in_h: usize, in_w: usize) -> Self {
        Self {
            base_channels: 128,
            depth: 6,
            channel_multipliers: vec![1, 1, 2, 2, 4, 4],
            n_rrdb: 10,
            time_embed_dim: 512,
            t_max,
            in_h,
            in_w,
        }
    }

    /// Smallest config that exercises every code path; used by the
    /// finite-difference gradient check.
    pub fn micro() -> Self {
        Self {
            base_channels: 3,
            depth: 2,
            channel_multipliers: vec![1, 1],
            n_rrdb: 1,
            time_embed_dim: 6,
            t_max: 5,
            in_h: 8,
            in_w: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth != self.channel_multipliers.len() {
            return Err(Error::invalid(
                "depth must be >= 1 and equal the number of channel multipliers",
            ));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(Error::invalid("channel multipliers must be >= 1"));
        }
        if self.base_channels < 2 {
            return Err(Error::invalid("base_channels must be >= 2"));
        }
        if self.t_max == 0 || self.time_embed_dim == 0 {
            return Err(Error::invalid("t_max and time_embed_dim must be >= 1"));
        }
        let div = 1 << (self.depth - 1);
        if self.in_h % div != 0 || self.in_w % div != 0 || self.in_h == 0 || self.in_w == 0 {
            return Err(Error::invalid(format!(
                "input {}x{} must be divisible by 2^(depth-1) = {}",
                self.in_h, self.in_w, div
            )));
        }
        Ok(())
    }

    fn channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    fn growth(&self) -> usize {
        (self.base_channels / 2).max(1)
    }
}

/// Dense block with an outer scaled residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Rrdb<A> {
    pub conv1: Conv2d<A>,
    pub conv2: Conv2d<A>,
    pub conv3: Conv2d<A>,
}

const RRDB_RESIDUAL_SCALE: f64 = 0.2;

/// Residual block with per-channel time-embedding injection.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<A> {
    pub norm1: GroupNorm<A>,
    pub conv1: Conv2d<A>,
    pub temb: Linear<A>,
    pub norm2: GroupNorm<A>,
    pub conv2: Conv2d<A>,
    pub skip: Option<Conv2d<A>>,
}

/// All learnable tensors of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<A> {
    pub config: DenoiserConfig,
    pub f_head: Conv2d<A>,
    pub g_head: Conv2d<A>,
    pub g_blocks: Vec<Rrdb<A>>,
    pub time_table: Array2<A>,
    pub enc: Vec<ResBlock<A>>,
    pub down: Vec<Conv2d<A>>,
    pub mid: ResBlock<A>,
    pub dec: Vec<ResBlock<A>>,
    pub up: Vec<Conv2d<A>>,
    pub out_norm: GroupNorm<A>,
    pub out_conv: Conv2d<A>,
}

fn conv_zeros<A: Scalar>(cout: usize, cin: usize, k: usize, stride: usize, pad: usize) -> Conv2d<A> {
    Conv2d {
        weight: Array4::zeros((cout, cin, k, k)),
        bias: Array1::zeros(cout),
        stride,
        pad,
    }
}

fn gn_zeros<A: Scalar>(c: usize) -> GroupNorm<A> {
    GroupNorm {
        gamma: Array1::zeros(c),
        beta: Array1::zeros(c),
        groups: norm_groups(c),
    }
}

fn gn_ones<A: Scalar>(c: usize) -> GroupNorm<A> {
    GroupNorm {
        gamma: Array1::from_elem(c, A::one()),
        beta: Array1::zeros(c),
        groups: norm_groups(c),
    }
}

fn resblock_zeros<A: Scalar>(cin: usize, cout: usize, temb_dim: usize) -> ResBlock<A> {
    ResBlock {
        norm1: gn_zeros(cin),
        conv1: conv_zeros(cout, cin, 3, 1, 1),
        temb: Linear {
            weight: Array2::zeros((cout, temb_dim)),
            bias: Array1::zeros(cout),
        },
        norm2: gn_zeros(cout),
        conv2: conv_zeros(cout, cout, 3, 1, 1),
        skip: (cin != cout).then(|| conv_zeros(cout, cin, 1, 1, 0)),
    }
}

fn resblock_default<A: Scalar>(cin: usize, cout: usize, temb_dim: usize) -> ResBlock<A> {
    ResBlock {
        norm1: gn_ones(cin),
        norm2: gn_ones(cout),
        ..resblock_zeros(cin, cout, temb_dim)
    }
}

impl<A: Scalar> ParamSet<A> {
    /// Allocate the full structure with zero weights and default norms.
    pub(crate) fn structured(cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let g = cfg.growth();
        let ch = cfg.channels();
        let d = cfg.depth;
        let td = cfg.time_embed_dim;
        Ok(ParamSet {
            f_head: conv_zeros(c, 1, 3, 1, 1),
            g_head: conv_zeros(c, 1, 3, 1, 1),
            g_blocks: (0..cfg.n_rrdb)
                .map(|_| Rrdb {
                    conv1: conv_zeros(g, c, 3, 1, 1),
                    conv2: conv_zeros(g, c + g, 3, 1, 1),
                    conv3: conv_zeros(c, c + 2 * g, 3, 1, 1),
                })
                .collect(),
            time_table: Array2::zeros((cfg.t_max, td)),
            enc: (0..d)
                .map(|i| {
                    let cin = if i == 0 { c } else { ch[i] };
                    resblock_default(cin, ch[i], td)
                })
                .collect(),
            down: (0..d.saturating_sub(1))
                .map(|i| conv_zeros(ch[i + 1], ch[i], 3, 2, 1))
                .collect(),
            mid: resblock_default(ch[d - 1], ch[d - 1], td),
            dec: (0..d).map(|i| resblock_default(2 * ch[i], ch[i], td)).collect(),
            up: (1..d).map(|i| conv_zeros(ch[i - 1], ch[i], 3, 1, 1)).collect(),
            out_norm: gn_ones(ch[0]),
            out_conv: conv_zeros(1, ch[0], 3, 1, 1),
            config: cfg.clone(),
        })
    }

    /// Walk every tensor in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(String, Vec<usize>, &[A])) {
        let conv = |name: String, c: &Conv2d<A>, f: &mut dyn FnMut(String, Vec<usize>, &[A])| {
            let (a, b, k, l) = c.weight.dim();
            f(format!("{name}.weight"), vec![a, b, k, l], c.weight.as_slice().unwrap());
            f(format!("{name}.bias"), vec![c.bias.len()], c.bias.as_slice().unwrap());
        };
        let gn = |name: String, g: &GroupNorm<A>, f: &mut dyn FnMut(String, Vec<usize>, &[A])| {
            f(format!("{name}.gamma"), vec![g.gamma.len()], g.gamma.as_slice().unwrap());
            f(format!("{name}.beta"), vec![g.beta.len()], g.beta.as_slice().unwrap());
        };
        let res = |name: String, r: &ResBlock<A>, f: &mut dyn FnMut(String, Vec<usize>, &[A])| {
            gn(format!("{name}.norm1"), &r.norm1, f);
            conv(format!("{name}.conv1"), &r.conv1, f);
            let (o, i) = r.temb.weight.dim();
            f(format!("{name}.temb.weight"), vec![o, i], r.temb.weight.as_slice().unwrap());
            f(format!("{name}.temb.bias"), vec![o], r.temb.bias.as_slice().unwrap());
            gn(format!("{name}.norm2"), &r.norm2, f);
            conv(format!("{name}.conv2"), &r.conv2, f);
            if let Some(s) = &r.skip {
                conv(format!("{name}.skip"), s, f);
            }
        };
        conv("f_head".into(), &self.f_head, f);
        conv("g_head".into(), &self.g_head, f);
        for (i, b) in self.g_blocks.iter().enumerate() {
            conv(format!("g_block{i}.conv1"), &b.conv1, f);
            conv(format!("g_block{i}.conv2"), &b.conv2, f);
            conv(format!("g_block{i}.conv3"), &b.conv3, f);
        }
        let (t, d) = self.time_table.dim();
        f("time_table".into(), vec![t, d], self.time_table.as_slice().unwrap());
        for (i, r) in self.enc.iter().enumerate() {
            res(format!("enc{i}"), r, f);
        }
        for (i, c) in self.down.iter().enumerate() {
            conv(format!("down{i}"), c, f);
        }
        res("mid".into(), &self.mid, f);
        for (i, r) in self.dec.iter().enumerate() {
            res(format!("dec{i}"), r, f);
        }
        for (i, c) in self.up.iter().enumerate() {
            conv(format!("up{}", i + 1), c, f);
        }
        gn("out_norm".into(), &self.out_norm, f);
        conv("out_conv".into(), &self.out_conv, f);
    }

    /// Mutable walk, same order as [`ParamSet::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [A])) {
        let conv = |name: String, c: &mut Conv2d<A>, f: &mut dyn FnMut(String, &mut [A])| {
            f(format!("{name}.weight"), c.weight.as_slice_mut().unwrap());
            f(format!("{name}.bias"), c.bias.as_slice_mut().unwrap());
        };
        let gn = |name: String, g: &mut GroupNorm<A>, f: &mut dyn FnMut(String, &mut [A])| {
            f(format!("{name}.gamma"), g.gamma.as_slice_mut().unwrap());
            f(format!("{name}.beta"), g.beta.as_slice_mut().unwrap());
        };
        let res = |name: String, r: &mut ResBlock<A>, f: &mut dyn FnMut(String, &mut [A])| {
            gn(format!("{name}.norm1"), &mut r.norm1, f);
            conv(format!("{name}.conv1"), &mut r.conv1, f);
            f(format!("{name}.temb.weight"), r.temb.weight.as_slice_mut().unwrap());
            f(format!("{name}.temb.bias"), r.temb.bias.as_slice_mut().unwrap());
            gn(format!("{name}.norm2"), &mut r.norm2, f);
            conv(format!("{name}.conv2"), &mut r.conv2, f);
            if let Some(s) = &mut r.skip {
                conv(format!("{name}.skip"), s, f);
            }
        };
        conv("f_head".into(), &mut self.f_head, f);
        conv("g_head".into(), &mut self.g_head, f);
        for (i, b) in self.g_blocks.iter_mut().enumerate() {
            conv(format!("g_block{i}.conv1"), &mut b.conv1, f);
            conv(format!("g_block{i}.conv2"), &mut b.conv2, f);
            conv(format!("g_block{i}.conv3"), &mut b.conv3, f);
        }
        f("time_table".into(), self.time_table.as_slice_mut().unwrap());
        for (i, r) in self.enc.iter_mut().enumerate() {
            res(format!("enc{i}"), r, f);
        }
        for (i, c) in self.down.iter_mut().enumerate() {
            conv(format!("down{i}"), c, f);
        }
        res("mid".into(), &mut self.mid, f);
        for (i, r) in self.dec.iter_mut().enumerate() {
            res(format!("dec{i}"), r, f);
        }
        for (i, c) in self.up.iter_mut().enumerate() {
            conv(format!("up{}", i + 1), c, f);
        }
        gn("out_norm".into(), &mut self.out_norm, f);
        conv("out_conv".into(), &mut self.out_conv, f);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    pub fn to_flat(&self) -> Vec<A> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    pub fn set_from_flat(&mut self, flat: &[A]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::structured(&self.config).expect("config already validated");
        // structured() sets norms to ones; zero everything for a gradient buffer
        z.visit_mut(&mut |_, data| data.fill(A::zero()));
        z
    }

    /// Convert every tensor to another scalar type.
    pub fn cast<B: Scalar>(&self) -> ParamSet<B> {
        let mut out = ParamSet::<B>::structured(&self.config).expect("valid config");
        let flat: Vec<B> = self.to_flat().iter().map(|&v| B::from_f64(v.to_f64())).collect();
        out.set_from_flat(&flat);
        out
    }
}

/// Deterministic initialization: fan-in-scaled uniform conv/linear weights,
/// unit norms, small-normal time table, zero final projection.
pub fn init_params<A: Scalar>(cfg: &DenoiserConfig, seed: u64) -> Result<ParamSet<A>> {
    let mut p = ParamSet::<A>::structured(cfg)?;
    // visit_mut hands out flat slices only, so record each weight's fan-in
    // (product of the trailing shape dims) up front
    let mut fan_in = std::collections::HashMap::new();
    p.visit(&mut |name, shape, _| {
        if shape.len() > 1 {
            fan_in.insert(name, shape[1..].iter().product::<usize>());
        }
    });
    let mut rng = substream(seed, "init", 0);
    p.visit_mut(&mut |name, data| {
        if name == "out_conv.weight" || name == "out_conv.bias" {
            data.fill(A::zero()); // fresh network predicts eps = 0
            return;
        }
        if name.ends_with(".gamma") {
            data.fill(A::one());
            return;
        }
        if name.ends_with(".beta") || name.ends_with(".bias") {
            data.fill(A::zero());
            return;
        }
        if name == "time_table" {
            for v in data.iter_mut() {
                let z: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                *v = A::from_f64(0.02 * z);
            }
            return;
        }
        // weight tensors: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
        let bound = 1.0 / (fan_in[&name] as f64).sqrt();
        for v in data.iter_mut() {
            *v = A::from_f64(rng.random_range(-bound..bound));
        }
    });
    Ok(p)
}

/// Total learnable parameter count for a config, computed analytically.
pub fn param_count(cfg: &DenoiserConfig) -> Result<usize> {
    cfg.validate()?;
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let gn = |c: usize| 2 * c;
    let lin = |i: usize, o: usize| o * i + o;
    let td = cfg.time_embed_dim;
    let res = |cin: usize, cout: usize| {
        gn(cin)
            + conv(cin, cout, 3)
            + lin(td, cout)
            + gn(cout)
            + conv(cout, cout, 3)
            + if cin != cout { conv(cin, cout, 1) } else { 0 }
    };
    let c = cfg.base_channels;
    let g = cfg.growth();
    let ch = cfg.channels();
    let d = cfg.depth;
    let mut n = 0;
    n += conv(1, c, 3) * 2; // F and G heads
    n += cfg.n_rrdb * (conv(c, g, 3) + conv(c + g, g, 3) + conv(c + 2 * g, c, 3));
    n += cfg.t_max * td;
    for i in 0..d {
        n += res(if i == 0 { c } else { ch[i] }, ch[i]); // encoder
        n += res(2 * ch[i], ch[i]); // decoder
    }
    for i in 0..d - 1 {
        n += conv(ch[i], ch[i + 1], 3); // down
        n += conv(ch[i + 1], ch[i], 3); // up
    }
    n += res(ch[d - 1], ch[d - 1]); // mid
    n += gn(ch[0]) + conv(ch[0], 1, 3); // out head
    Ok(n)
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

pub struct ResBlockCache<A> {
    x: Array3<A>,
    gn1: GroupNormCache<A>,
    s1: Array3<A>,
    gn2: GroupNormCache<A>,
    a2: Array3<A>,
    s2: Array3<A>,
    a1: Array3<A>,
}

fn resblock_forward<A: Scalar>(
    p: &ResBlock<A>,
    x: &Array3<A>,
    temb_act: &Array1<A>,
) -> (Array3<A>, ResBlockCache<A>) {
    let (a1, gn1) = p.norm1.forward(x);
    let s1 = silu(&a1);
    let h = p.conv1.forward(&s1);
    let (mut a2, gn2) = p.norm2.forward(&h);
    // per-channel time shift goes in after normalization so it is not
    // absorbed into the group statistics
    let v = p.temb.forward(temb_act);
    for (ci, mut plane) in a2.axis_iter_mut(Axis(0)).enumerate() {
        let add = v[ci];
        plane.mapv_inplace(|z| z + add);
    }
    let s2 = silu(&a2);
    let h2 = p.conv2.forward(&s2);
    let skip = match &p.skip {
        Some(sc) => sc.forward(x),
        None => x.clone(),
    };
    (
        skip + &h2,
        ResBlockCache {
            x: x.clone(),
            gn1,
            a1,
            s1,
            gn2,
            a2,
            s2,
        },
    )
}

/// Returns dx; accumulates parameter grads and the time-embedding gradient.
fn resblock_backward<A: Scalar>(
    p: &ResBlock<A>,
    cache: &ResBlockCache<A>,
    dy: &Array3<A>,
    temb_act: &Array1<A>,
    grad: &mut ResBlock<A>,
    dtemb_act: &mut Array1<A>,
) -> Array3<A> {
    // residual branch; cache.a2 holds the post-shift pre-activation
    let ds2 = p.conv2.backward(&cache.s2, dy, &mut grad.conv2);
    let da2 = silu_backward(&cache.a2, &ds2);
    // time injection: dv[c] = sum over spatial positions
    let dv = Array1::from_iter(da2.axis_iter(Axis(0)).map(|plane| plane.sum()));
    *dtemb_act += &p.temb.backward(temb_act, &dv, &mut grad.temb);
    let dh = p.norm2.backward(&cache.gn2, &da2, &mut grad.norm2);
    let ds1 = p.conv1.backward(&cache.s1, &dh, &mut grad.conv1);
    let da1 = silu_backward(&cache.a1, &ds1);
    let dx_main = p.norm1.backward(&cache.gn1, &da1, &mut grad.norm1);
    // skip branch
    let dx_skip = match (&p.skip, &mut grad.skip) {
        (Some(sc), Some(gs)) => sc.backward(&cache.x, dy, gs),
        _ => dy.clone(),
    };
    dx_main + &dx_skip
}

pub struct RrdbCache<A> {
    x: Array3<A>,
    p1: Array3<A>,
    a1: Array3<A>,
    p2: Array3<A>,
    a2: Array3<A>,
}

fn rrdb_forward<A: Scalar>(p: &Rrdb<A>, x: &Array3<A>) -> (Array3<A>, RrdbCache<A>) {
    let p1 = p.conv1.forward(x);
    let a1 = silu(&p1);
    let p2 = p.conv2.forward(&concat_channels(x, &a1));
    let a2 = silu(&p2);
    let cat2 = concat_channels(&concat_channels(x, &a1), &a2);
    let a3 = p.conv3.forward(&cat2);
    let scale = A::from_f64(RRDB_RESIDUAL_SCALE);
    let out = x + &a3.mapv(|v| v * scale);
    (
        out,
        RrdbCache {
            x: x.clone(),
            p1,
            a1,
            p2,
            a2,
        },
    )
}

fn rrdb_backward<A: Scalar>(
    p: &Rrdb<A>,
    cache: &RrdbCache<A>,
    dy: &Array3<A>,
    grad: &mut Rrdb<A>,
) -> Array3<A> {
    let c = cache.x.dim().0;
    let g = cache.a1.dim().0;
    let scale = A::from_f64(RRDB_RESIDUAL_SCALE);
    let mut dx = dy.clone();
    let da3 = dy.mapv(|v| v * scale);
    let cat1 = concat_channels(&cache.x, &cache.a1);
    let cat2 = concat_channels(&cat1, &cache.a2);
    let dcat2 = p.conv3.backward(&cat2, &da3, &mut grad.conv3);
    let (dcat1_part, da2) = split_channels(&dcat2, c + g);
    let dp2 = silu_backward(&cache.p2, &da2);
    let dcat1 = p.conv2.backward(&cat1, &dp2, &mut grad.conv2) + &dcat1_part;
    let (dx_part, da1) = split_channels(&dcat1, c);
    dx += &dx_part;
    let dp1 = silu_backward(&cache.p1, &da1);
    dx += &p.conv1.backward(&cache.x, &dp1, &mut grad.conv1);
    dx
}

pub struct ForwardCache<A> {
    x_t: Array3<A>,
    cond: Array3<A>,
    t_index: usize,
    temb_raw: Array1<A>,
    temb_act: Array1<A>,
    rrdb_caches: Vec<RrdbCache<A>>,
    enc_caches: Vec<ResBlockCache<A>>,
    down_inputs: Vec<Array3<A>>,
    mid_cache: ResBlockCache<A>,
    dec_caches: Vec<Option<ResBlockCache<A>>>,
    up_inputs: Vec<Option<Array3<A>>>,
    out_gn: GroupNormCache<A>,
    out_a: Array3<A>,
    out_s: Array3<A>,
}

fn to_chw<A: Scalar>(img: &Array2<A>) -> Array3<A> {
    let (h, w) = img.dim();
    img.clone().into_shape_with_order((1, h, w)).expect("chw reshape")
}

fn check_input<A: Scalar>(cfg: &DenoiserConfig, img: &Array2<A>, what: &str) -> Result<()> {
    if img.dim() != (cfg.in_h, cfg.in_w) {
        return Err(Error::invalid(format!(
            "{} shape {:?} does not match config {}x{}",
            what,
            img.dim(),
            cfg.in_h,
            cfg.in_w
        )));
    }
    Ok(())
}

/// Full forward pass returning the noise estimate and the cache needed for
/// the backward pass.
pub fn forward_cached<A: Scalar>(
    p: &ParamSet<A>,
    x_t: &Array2<A>,
    cond: &Array2<A>,
    t: usize,
) -> Result<(Array2<A>, ForwardCache<A>)> {
    let cfg = &p.config;
    check_input(cfg, x_t, "x_t")?;
    check_input(cfg, cond, "cond")?;
    if t < 1 || t > cfg.t_max {
        return Err(Error::invalid(format!(
            "timestep {} outside lookup table range [1, {}]",
            t, cfg.t_max
        )));
    }
    let depth = cfg.depth;
    let x_t3 = to_chw(x_t);
    let cond3 = to_chw(cond);

    let temb_raw = p.time_table.row(t - 1).to_owned();
    let temb_act = silu_vec(&temb_raw);

    let f_out = p.f_head.forward(&x_t3);
    let mut g = p.g_head.forward(&cond3);
    let mut rrdb_caches = Vec::with_capacity(p.g_blocks.len());
    for blk in &p.g_blocks {
        let (next, cache) = rrdb_forward(blk, &g);
        rrdb_caches.push(cache);
        g = next;
    }

    let mut x = f_out + &g;
    let mut enc_caches = Vec::with_capacity(depth);
    let mut down_inputs = Vec::with_capacity(depth.saturating_sub(1));
    let mut skips = Vec::with_capacity(depth);
    for i in 0..depth {
        let (out, cache) = resblock_forward(&p.enc[i], &x, &temb_act);
        enc_caches.push(cache);
        skips.push(out.clone());
        x = out;
        if i < depth - 1 {
            down_inputs.push(x.clone());
            x = p.down[i].forward(&x);
        }
    }
    let (mid_out, mid_cache) = resblock_forward(&p.mid, &x, &temb_act);
    x = mid_out;

    let mut dec_caches: Vec<Option<ResBlockCache<A>>> = (0..depth).map(|_| None).collect();
    let mut up_inputs: Vec<Option<Array3<A>>> = (0..depth).map(|_| None).collect();
    for i in (0..depth).rev() {
        let cat = concat_channels(&x, &skips[i]);
        let (out, cache) = resblock_forward(&p.dec[i], &cat, &temb_act);
        dec_caches[i] = Some(cache);
        x = out;
        if i > 0 {
            let u = upsample2(&x);
            up_inputs[i] = Some(u.clone());
            x = p.up[i - 1].forward(&u);
        }
    }

    let (out_a, out_gn) = p.out_norm.forward(&x);
    let out_s = silu(&out_a);
    let eps3 = p.out_conv.forward(&out_s);
    let (_, h, w) = eps3.dim();
    let eps_hat = eps3.into_shape_with_order((h, w)).expect("hw reshape");
    Ok((
        eps_hat,
        ForwardCache {
            x_t: x_t3,
            cond: cond3,
            t_index: t - 1,
            temb_raw,
            temb_act,
            rrdb_caches,
            enc_caches,
            down_inputs,
            mid_cache,
            dec_caches,
            up_inputs,
            out_gn,
            out_a,
            out_s,
        },
    ))
}

/// Noise estimate only.
pub fn forward<A: Scalar>(
    p: &ParamSet<A>,
    x_t: &Array2<A>,
    cond: &Array2<A>,
    t: usize,
) -> Result<Array2<A>> {
    forward_cached(p, x_t, cond, t).map(|(y, _)| y)
}

/// Backward pass for one sample; accumulates parameter gradients into `grad`.
pub fn backward<A: Scalar>(
    p: &ParamSet<A>,
    cache: &ForwardCache<A>,
    d_eps: &Array2<A>,
    grad: &mut ParamSet<A>,
) {
    let depth = p.config.depth;
    let (h, w) = d_eps.dim();
    let dy3 = d_eps.clone().into_shape_with_order((1, h, w)).expect("chw");
    let mut dtemb_act = Array1::<A>::zeros(cache.temb_act.len());

    // out head
    let ds = p.out_conv.backward(&cache.out_s, &dy3, &mut grad.out_conv);
    let da = silu_backward(&cache.out_a, &ds);
    let mut d = p.out_norm.backward(&cache.out_gn, &da, &mut grad.out_norm);

    // decoder (reverse of decode order: level 0 upward)
    let ch = p.config.channels();
    let mut d_mid_out = None;
    let mut dskips: Vec<Option<Array3<A>>> = (0..depth).map(|_| None).collect();
    for i in 0..depth {
        let cache_i = cache.dec_caches[i].as_ref().expect("decoder cache");
        let dcat = resblock_backward(
            &p.dec[i],
            cache_i,
            &d,
            &cache.temb_act,
            &mut grad.dec[i],
            &mut dtemb_act,
        );
        let (dx_cur, dskip) = split_channels(&dcat, ch[i]);
        dskips[i] = Some(dskip);
        if i == depth - 1 {
            d_mid_out = Some(dx_cur);
        } else {
            let u_in = cache.up_inputs[i + 1].as_ref().expect("upsample cache");
            let du = p.up[i].backward(u_in, &dx_cur, &mut grad.up[i]);
            d = upsample2_backward(&du);
        }
    }

    // mid
    let mut d = resblock_backward(
        &p.mid,
        &cache.mid_cache,
        &d_mid_out.expect("mid gradient"),
        &cache.temb_act,
        &mut grad.mid,
        &mut dtemb_act,
    );

    // encoder
    for i in (0..depth).rev() {
        let total = d + dskips[i].take().expect("skip gradient");
        d = resblock_backward(
            &p.enc[i],
            &cache.enc_caches[i],
            &total,
            &cache.temb_act,
            &mut grad.enc[i],
            &mut dtemb_act,
        );
        if i > 0 {
            d = p.down[i - 1].backward(&cache.down_inputs[i - 1], &d, &mut grad.down[i - 1]);
        }
    }

    // d is the gradient at h0 = F(x_t) + G(cond); fan out to both heads
    p.f_head.backward(&cache.x_t, &d, &mut grad.f_head);
    let mut dg = d;
    for i in (0..p.g_blocks.len()).rev() {
        dg = rrdb_backward(&p.g_blocks[i], &cache.rrdb_caches[i], &dg, &mut grad.g_blocks[i]);
    }
    p.g_head.backward(&cache.cond, &dg, &mut grad.g_head);

    // time table row
    let dtemb_raw = silu_vec_backward(&cache.temb_raw, &dtemb_act);
    let mut row = grad.time_table.row_mut(cache.t_index);
    row += &dtemb_raw;
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct Batch<A> {
    pub x_t: Vec<Array2<A>>,
    pub cond: Vec<Array2<A>>,
    pub t: Vec<usize>,
    pub eps: Vec<Array2<A>>,
}

impl<A: Scalar> Batch<A> {
    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        let n = self.x_t.len();
        if n == 0 {
            return Err(Error::invalid("batch must be nonempty"));
        }
        if self.cond.len() != n || self.t.len() != n || self.eps.len() != n {
            return Err(Error::invalid("batch member counts differ"));
        }
        for i in 0..n {
            check_input(cfg, &self.x_t[i], "x_t")?;
            check_input(cfg, &self.cond[i], "cond")?;
            check_input(cfg, &self.eps[i], "eps")?;
            if self.t[i] < 1 || self.t[i] > cfg.t_max {
                return Err(Error::invalid(format!("batch timestep {} out of range", self.t[i])));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_t.is_empty()
    }
}

/// Mean over batch and pixels of the squared noise-prediction error.
pub fn mse_eps_loss<A: Scalar>(p: &ParamSet<A>, batch: &Batch<A>) -> Result<f64> {
    batch.validate(&p.config)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let eps_hat = forward(p, &batch.x_t[i], &batch.cond[i], batch.t[i])?;
        let diff = &eps_hat - &batch.eps[i];
        let n = diff.len() as f64;
        total += diff.iter().fold(0.0, |acc, &v| acc + v.to_f64() * v.to_f64()) / n;
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradients of [`mse_eps_loss`] plus the loss value.
pub fn grads<A: Scalar>(p: &ParamSet<A>, batch: &Batch<A>) -> Result<(ParamSet<A>, f64)> {
    batch.validate(&p.config)?;
    let mut grad = p.zeros_like();
    let mut total = 0.0;
    let b = batch.len() as f64;
    for i in 0..batch.len() {
        let (eps_hat, cache) = forward_cached(p, &batch.x_t[i], &batch.cond[i], batch.t[i])?;
        let diff = &eps_hat - &batch.eps[i];
        let n = diff.len() as f64;
        total += diff.iter().fold(0.0, |acc, &v| acc + v.to_f64() * v.to_f64()) / n;
        let d_eps = diff.mapv(|v| v * A::from_f64(2.0 / (n * b)));
        backward(p, &cache, &d_eps, &mut grad);
    }
    Ok((grad, total / b))
}

/// Convert a stored image into the tensor layout the network consumes.
pub fn image_to_array<A: Scalar>(img: &crate::kspace::RealImage) -> Array2<A> {
    Array2::from_shape_fn((img.height(), img.width()), |(r, c)| {
        A::from_f64(img.get(r, c))
    })
}

/// Convert a network output back into a stored image.
pub fn array_to_image<A: Scalar>(arr: &Array2<A>) -> Result<crate::kspace::RealImage> {
    let (h, w) = arr.dim();
    crate::kspace::RealImage::new(h, w, arr.iter().map(|&v| v.to_f64()).collect())
}

/// Map an inference timestep onto the lookup table built for `t_max`
/// training steps: nearest index under linear rescaling, clamped to range.
pub fn map_timestep(t: usize, t_infer: usize, t_max: usize) -> usize {
    if t_infer == t_max {
        return t;
    }
    let mapped = (t as f64 * t_max as f64 / t_infer as f64).round() as usize;
    mapped.clamp(1, t_max)
}
