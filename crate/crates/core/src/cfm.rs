//! Cross-modal fusion block: two feature maps in, two complementary maps out.
//!
//! Per modality the input is layer-normalized and expanded by a channel-wise
//! linear map, then passed through a depthwise convolution and SiLU. For each
//! scan direction both modalities are flattened, summed, and run through that
//! direction's S6 block. The unflattened outputs are summed into one fused map
//! `Y`, projected back to `C` channels, added to each modality as a residual,
//! and refined by a per-modality LayerNorm + GELU feed-forward with another
//! residual.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{impl_parameters, Parameters};
use crate::s6::{s6_backward_cached, s6_forward_cached, S6Cache, S6Params, DEFAULT_STATE};
use crate::ss2d::{flatten, fuse_sequences, unflatten, ScanDirection};
use crate::tensor::{
    depthwise_conv2d, depthwise_conv2d_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear,
    linear_backward, silu, silu_grad, Tensor, LN_EPS,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CfmConfig {
    pub channels: usize,
    pub expand: usize,
    pub dw_kernel: usize,
    pub ffn_hidden: usize,
    pub state_size: usize,
    pub directions: Vec<ScanDirection>,
}

impl CfmConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            expand: 2,
            dw_kernel: 3,
            ffn_hidden: 4 * channels,
            state_size: DEFAULT_STATE,
            directions: ScanDirection::ALL.to_vec(),
        }
    }

    /// Forward and reverse row-major scans only.
    pub fn bidirectional(mut self) -> Self {
        self.directions = ScanDirection::ALL[..2].to_vec();
        self
    }

    pub fn inner(&self) -> usize {
        self.expand * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.channels > 0
            && self.expand > 0
            && self.dw_kernel > 0
            && self.ffn_hidden > 0
            && self.state_size > 0
            && !self.directions.is_empty();
        if !positive || self.dw_kernel % 2 == 0 {
            return Err(Error::Config(format!("invalid fusion block config {self:?}")));
        }
        Ok(())
    }
}

/// Pre-fusion weights of one modality: LayerNorm, expansion, depthwise conv.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityIn {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// `[C, E]`
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    /// `[E, k, k]`
    pub dw_w: Tensor,
    pub dw_b: Tensor,
}

impl_parameters!(ModalityIn { ln_gamma, ln_beta, proj_w, proj_b, dw_w, dw_b });

/// Post-fusion refinement of one modality: LayerNorm and the GELU FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityOut {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// `[C, hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[hidden, C]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl_parameters!(ModalityOut { ln_gamma, ln_beta, w1, b1, w2, b2 });

#[derive(Clone, Debug, PartialEq)]
pub struct CfmWeights {
    /// Scan order served by each entry of `s6`.
    pub directions: Vec<ScanDirection>,
    pub input: Vec<ModalityIn>,
    pub s6: Vec<S6Params>,
    /// `[E, C]`
    pub proj_out_w: Tensor,
    pub proj_out_b: Tensor,
    pub output: Vec<ModalityOut>,
}

impl_parameters!(CfmWeights { input, s6, proj_out_w, proj_out_b, output });

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl CfmWeights {
    pub fn init(cfg: &CfmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, e, k, hid) = (cfg.channels, cfg.inner(), cfg.dw_kernel, cfg.ffn_hidden);
        let mut input = Vec::with_capacity(2);
        for _ in 0..2 {
            input.push(ModalityIn {
                ln_gamma: Tensor::ones(&[c]),
                ln_beta: Tensor::zeros(&[c]),
                proj_w: uniform(rng, &[c, e], 1.0 / (c as f64).sqrt()),
                proj_b: Tensor::zeros(&[e]),
                dw_w: uniform(rng, &[e, k, k], 1.0 / k as f64),
                dw_b: Tensor::zeros(&[e]),
            });
        }
        let s6 = cfg
            .directions
            .iter()
            .map(|_| S6Params::init(e, cfg.state_size, rng))
            .collect();
        let proj_out_w = uniform(rng, &[e, c], 1.0 / (e as f64).sqrt());
        let mut output = Vec::with_capacity(2);
        for _ in 0..2 {
            output.push(ModalityOut {
                ln_gamma: Tensor::ones(&[c]),
                ln_beta: Tensor::zeros(&[c]),
                w1: uniform(rng, &[c, hid], 1.0 / (c as f64).sqrt()),
                b1: Tensor::zeros(&[hid]),
                w2: uniform(rng, &[hid, c], 1.0 / (hid as f64).sqrt()),
                b2: Tensor::zeros(&[c]),
            });
        }
        Ok(Self {
            directions: cfg.directions.clone(),
            input,
            s6,
            proj_out_w,
            proj_out_b: Tensor::zeros(&[c]),
            output,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj_out_w.dim(1)
    }

    /// Zeroes everything except the LayerNorm gains, which leaves the block
    /// equal to the identity on each modality.
    pub fn zero_non_residual(&mut self) {
        for m in &mut self.input {
            m.proj_w.fill(0.0);
            m.proj_b.fill(0.0);
            m.dw_w.fill(0.0);
            m.dw_b.fill(0.0);
        }
        for s in &mut self.s6 {
            s.silence();
        }
        self.proj_out_w.fill(0.0);
        self.proj_out_b.fill(0.0);
        for m in &mut self.output {
            m.w1.fill(0.0);
            m.b1.fill(0.0);
            m.w2.fill(0.0);
            m.b2.fill(0.0);
        }
    }

    /// Copies the pre-fusion weights of modality 1 onto modality 2.
    pub fn tie_inputs(&mut self) {
        self.input[1] = self.input[0].clone();
    }

    /// Keeps only the S6 blocks whose direction is in `keep`.
    pub fn restrict_directions(&self, keep: &[ScanDirection]) -> Self {
        let mut out = self.clone();
        let pairs: Vec<_> = self
            .directions
            .iter()
            .zip(&self.s6)
            .filter(|(d, _)| keep.contains(d))
            .map(|(d, s)| (*d, s.clone()))
            .collect();
        out.directions = pairs.iter().map(|(d, _)| *d).collect();
        out.s6 = pairs.into_iter().map(|(_, s)| s).collect();
        out
    }

    fn check(&self, f1: &Tensor, f2: &Tensor) -> Result<(usize, usize, usize)> {
        f1.expect_ndim(3, "cfm_forward")?;
        if f1.shape() != f2.shape() {
            return Err(Error::dim(
                "cfm_forward",
                format!("modality maps {:?} and {:?} differ", f1.shape(), f2.shape()),
            ));
        }
        if f1.dim(0) != self.channels() {
            return Err(Error::dim(
                "cfm_forward",
                format!("maps have {} channels, block expects {}", f1.dim(0), self.channels()),
            ));
        }
        if self.s6.len() != self.directions.len() || self.input.len() != 2 || self.output.len() != 2 {
            return Err(Error::Validation("fusion block weights are inconsistent".into()));
        }
        Ok((f1.dim(0), f1.dim(1), f1.dim(2)))
    }
}

#[derive(Clone, Debug)]
struct InBranch {
    x: Tensor,
    ln: Tensor,
    u: Tensor,
    v: Tensor,
}

#[derive(Clone, Debug)]
struct OutBranch {
    f_hat: Tensor,
    ln: Tensor,
    a: Tensor,
    g: Tensor,
}

/// Intermediates of one forward pass, kept for [`cfm_backward_cached`].
#[derive(Clone, Debug)]
pub struct CfmCache {
    h: usize,
    w: usize,
    input: [InBranch; 2],
    fused: Vec<(Tensor, S6Cache)>,
    y_sum: Tensor,
    y_fus: Tensor,
    output: [OutBranch; 2],
}

impl CfmCache {
    /// The single fused update shared by both residual branches, `[C,H,W]`.
    pub fn y_fus(&self) -> Tensor {
        self.y_fus.tokens_to_chw(self.h, self.w).expect("cached shape")
    }

    /// `F + Y` for modality `m` before the feed-forward refinement, `[C,H,W]`.
    pub fn complementary(&self, m: usize) -> Tensor {
        self.output[m].f_hat.tokens_to_chw(self.h, self.w).expect("cached shape")
    }
}

fn branch_in(f: &Tensor, p: &ModalityIn, h: usize, w: usize) -> Result<(InBranch, Tensor)> {
    let x = f.chw_to_tokens()?;
    let ln = layer_norm(&x, &p.ln_gamma, &p.ln_beta, LN_EPS)?;
    let u = linear(&ln, &p.proj_w, &p.proj_b)?.tokens_to_chw(h, w)?;
    let pad = (p.dw_w.dim(1) - 1) / 2;
    let v = depthwise_conv2d(&u, &p.dw_w, &p.dw_b, pad)?;
    let f_act = silu(&v);
    Ok((InBranch { x, ln, u, v }, f_act))
}

fn branch_out(x: &Tensor, y_fus: &Tensor, p: &ModalityOut) -> Result<(OutBranch, Tensor)> {
    let f_hat = x.add(y_fus)?;
    let ln = layer_norm(&f_hat, &p.ln_gamma, &p.ln_beta, LN_EPS)?;
    let a = linear(&ln, &p.w1, &p.b1)?;
    let g = gelu(&a);
    let out = f_hat.add(&linear(&g, &p.w2, &p.b2)?)?;
    Ok((OutBranch { f_hat, ln, a, g }, out))
}

pub fn cfm_forward_cached(f1: &Tensor, f2: &Tensor, w: &CfmWeights) -> Result<(Tensor, Tensor, CfmCache)> {
    let (_, h, wd) = w.check(f1, f2)?;
    let (in1, a1) = branch_in(f1, &w.input[0], h, wd)?;
    let (in2, a2) = branch_in(f2, &w.input[1], h, wd)?;

    let mut y_sum = Tensor::zeros(a1.shape());
    let mut fused = Vec::with_capacity(w.directions.len());
    for (dir, s6) in w.directions.iter().zip(&w.s6) {
        let seq = fuse_sequences(&flatten(&a1, *dir)?, &flatten(&a2, *dir)?)?;
        let (y, cache) = s6_forward_cached(&seq, s6)?;
        y_sum.add_assign(&unflatten(&y, *dir, h, wd)?)?;
        fused.push((seq, cache));
    }
    let y_sum = y_sum.chw_to_tokens()?;
    let y_fus = linear(&y_sum, &w.proj_out_w, &w.proj_out_b)?;

    let (out1, o1) = branch_out(&in1.x, &y_fus, &w.output[0])?;
    let (out2, o2) = branch_out(&in2.x, &y_fus, &w.output[1])?;
    let cache = CfmCache {
        h,
        w: wd,
        input: [in1, in2],
        fused,
        y_sum,
        y_fus,
        output: [out1, out2],
    };
    Ok((o1.tokens_to_chw(h, wd)?, o2.tokens_to_chw(h, wd)?, cache))
}

/// Complementary fused features `(F_fus^1, F_fus^2)` for two `[C,H,W]` maps.
pub fn cfm_forward(f1: &Tensor, f2: &Tensor, w: &CfmWeights) -> Result<(Tensor, Tensor)> {
    let (o1, o2, _) = cfm_forward_cached(f1, f2, w)?;
    Ok((o1, o2))
}

/// Gradients of `sum(g1 * out1) + sum(g2 * out2)`: `(d_f1, d_f2, d_weights)`.
pub fn cfm_backward(
    f1: &Tensor,
    f2: &Tensor,
    w: &CfmWeights,
    grad_out1: &Tensor,
    grad_out2: &Tensor,
) -> Result<(Tensor, Tensor, CfmWeights)> {
    let (_, _, cache) = cfm_forward_cached(f1, f2, w)?;
    let mut grads = w.zeros_like();
    let (g1, g2) = cfm_backward_cached(w, &cache, grad_out1, grad_out2, &mut grads)?;
    Ok((g1, g2, grads))
}

/// Backward pass over cached intermediates; parameter gradients are added to `grads`.
pub fn cfm_backward_cached(
    w: &CfmWeights,
    cache: &CfmCache,
    grad_out1: &Tensor,
    grad_out2: &Tensor,
    grads: &mut CfmWeights,
) -> Result<(Tensor, Tensor)> {
    let (h, wd) = (cache.h, cache.w);
    let mut g_x: Vec<Tensor> = Vec::with_capacity(2);
    let mut g_y = Tensor::zeros(cache.y_fus.shape());
    for (m, go) in [grad_out1, grad_out2].into_iter().enumerate() {
        let p = &w.output[m];
        let br = &cache.output[m];
        let go = go.chw_to_tokens()?;
        go.expect_shape(br.f_hat.shape(), "cfm_backward", "grad_out")?;
        let (gg, gw2, gb2) = linear_backward(&br.g, &p.w2, &go)?;
        let ga = gelu_grad(&br.a, &gg)?;
        let (gln, gw1, gb1) = linear_backward(&br.ln, &p.w1, &ga)?;
        let (gfh, ggam, gbet) = layer_norm_backward(&br.f_hat, &p.ln_gamma, LN_EPS, &gln)?;
        let gq = &mut grads.output[m];
        gq.w2.add_assign(&gw2)?;
        gq.b2.add_assign(&gb2)?;
        gq.w1.add_assign(&gw1)?;
        gq.b1.add_assign(&gb1)?;
        gq.ln_gamma.add_assign(&ggam)?;
        gq.ln_beta.add_assign(&gbet)?;
        let g_fhat = go.add(&gfh)?;
        g_y.add_assign(&g_fhat)?;
        g_x.push(g_fhat);
    }

    let (g_ysum, g_pw, g_pb) = linear_backward(&cache.y_sum, &w.proj_out_w, &g_y)?;
    grads.proj_out_w.add_assign(&g_pw)?;
    grads.proj_out_b.add_assign(&g_pb)?;
    let g_ysum = g_ysum.tokens_to_chw(h, wd)?;

    let mut g_act = Tensor::zeros(cache.input[0].v.shape());
    for (i, dir) in w.directions.iter().enumerate() {
        let (seq, s6_cache) = &cache.fused[i];
        let gy = flatten(&g_ysum, *dir)?;
        let (gseq, gp) = s6_backward_cached(seq, &w.s6[i], s6_cache, &gy)?;
        grads.s6[i].add_scaled(1.0, &gp);
        g_act.add_assign(&unflatten(&gseq, *dir, h, wd)?)?;
    }

    let mut out = Vec::with_capacity(2);
    for (m, mut gx) in g_x.into_iter().enumerate() {
        let p = &w.input[m];
        let br = &cache.input[m];
        let gv = silu_grad(&br.v, &g_act)?;
        let pad = (p.dw_w.dim(1) - 1) / 2;
        let (gu, gdw, gdb) = depthwise_conv2d_backward(&br.u, &p.dw_w, pad, &gv)?;
        let (gln, gpw, gpb) = linear_backward(&br.ln, &p.proj_w, &gu.chw_to_tokens()?)?;
        let (gxin, ggam, gbet) = layer_norm_backward(&br.x, &p.ln_gamma, LN_EPS, &gln)?;
        let gq = &mut grads.input[m];
        gq.dw_w.add_assign(&gdw)?;
        gq.dw_b.add_assign(&gdb)?;
        gq.proj_w.add_assign(&gpw)?;
        gq.proj_b.add_assign(&gpb)?;
        gq.ln_gamma.add_assign(&ggam)?;
        gq.ln_beta.add_assign(&gbet)?;
        gx.add_assign(&gxin)?;
        out.push(gx.tokens_to_chw(h, wd)?);
    }
    let g2 = out.pop().unwrap();
    let g1 = out.pop().unwrap();
    Ok((g1, g2))
}
