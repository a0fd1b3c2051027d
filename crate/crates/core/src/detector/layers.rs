//! Convolutional building blocks with explicit forward caches.

use std::cell::RefCell;

use rand::Rng;

use crate::error::Result;
use crate::params::impl_parameters;
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, max_pool2d, max_pool2d_backward, silu, silu_grad, split_channels,
    Tensor,
};

thread_local! {
    static PROBE: RefCell<Option<Vec<PreActStats>>> = const { RefCell::new(None) };
}

/// Pre-activation statistics of one activated convolution, keyed by the
/// address of its weight buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PreActStats {
    pub weight_addr: usize,
    pub sum: f64,
    pub sum_sq: f64,
    pub count: usize,
}

/// Runs `f` while recording pre-activation statistics of every activated
/// convolution evaluated on this thread, merged per layer in first-use order.
pub(crate) fn probe_pre_activations<T>(f: impl FnOnce() -> T) -> (T, Vec<PreActStats>) {
    PROBE.with(|p| *p.borrow_mut() = Some(Vec::new()));
    let out = f();
    let stats = PROBE.with(|p| p.borrow_mut().take()).unwrap_or_default();
    (out, stats)
}

fn record(weight: &Tensor, z: &Tensor) {
    PROBE.with(|p| {
        if let Some(v) = p.borrow_mut().as_mut() {
            let addr = weight.data().as_ptr() as usize;
            let (s, q) = z.data().iter().fold((0.0, 0.0), |(s, q), x| (s + x, q + x * x));
            match v.iter_mut().find(|e| e.weight_addr == addr) {
                Some(e) => {
                    e.sum += s;
                    e.sum_sq += q;
                    e.count += z.len();
                }
                None => v.push(PreActStats {
                    weight_addr: addr,
                    sum: s,
                    sum_sq: q,
                    count: z.len(),
                }),
            }
        }
    });
}

/// Convolution + bias, optionally followed by SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub act: bool,
}

impl_parameters!(Conv { weight, bias });

#[derive(Clone, Debug)]
pub struct ConvCache {
    input: Tensor,
    pre: Option<Tensor>,
}

impl Conv {
    /// He-uniform weights, zero bias.
    pub fn init(c_in: usize, c_out: usize, k: usize, stride: usize, act: bool, rng: &mut impl Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros(&[c_out]),
            stride,
            act,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    fn padding(&self) -> usize {
        (self.weight.dim(2) - 1) / 2
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let z = conv2d(x, &self.weight, &self.bias, self.stride, self.padding())?;
        Ok(if self.act {
            record(&self.weight, &z);
            (silu(&z), ConvCache { input: x.clone(), pre: Some(z) })
        } else {
            (z, ConvCache { input: x.clone(), pre: None })
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let z = conv2d(x, &self.weight, &self.bias, self.stride, self.padding())?;
        if self.act {
            record(&self.weight, &z);
        }
        Ok(if self.act { silu(&z) } else { z })
    }

    pub fn backward(&self, cache: &ConvCache, grad_out: &Tensor, grads: &mut Conv) -> Result<Tensor> {
        let gz = match &cache.pre {
            Some(z) => silu_grad(z, grad_out)?,
            None => grad_out.clone(),
        };
        let (gx, gw, gb) = conv2d_backward(&cache.input, &self.weight, self.stride, self.padding(), &gz)?;
        grads.weight.add_assign(&gw)?;
        grads.bias.add_assign(&gb)?;
        Ok(gx)
    }
}

/// CSP bottleneck block: two 1x1 branches, one residual bottleneck, 1x1 merge.
#[derive(Clone, Debug, PartialEq)]
pub struct C3 {
    pub cv1: Conv,
    pub cv2: Conv,
    pub m1: Conv,
    pub m2: Conv,
    pub cv3: Conv,
}

impl_parameters!(C3 { cv1, cv2, m1, m2, cv3 });

#[derive(Clone, Debug)]
pub struct C3Cache {
    cv1: ConvCache,
    cv2: ConvCache,
    m1: ConvCache,
    m2: ConvCache,
    cv3: ConvCache,
    hidden: usize,
}

impl C3 {
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        let h = (c / 2).max(1);
        Self {
            cv1: Conv::init(c, h, 1, 1, true, rng),
            cv2: Conv::init(c, h, 1, 1, true, rng),
            m1: Conv::init(h, h, 1, 1, true, rng),
            m2: Conv::init(h, h, 3, 1, true, rng),
            cv3: Conv::init(2 * h, c, 1, 1, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, C3Cache)> {
        let (a, cv1) = self.cv1.forward(x)?;
        let (b1, m1) = self.m1.forward(&a)?;
        let (b2, m2) = self.m2.forward(&b1)?;
        let b = b2.add(&a)?;
        let (c, cv2) = self.cv2.forward(x)?;
        let (y, cv3) = self.cv3.forward(&concat_channels(&[&b, &c])?)?;
        let hidden = a.dim(0);
        Ok((y, C3Cache { cv1, cv2, m1, m2, cv3, hidden }))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.cv1.apply(x)?;
        let b = self.m2.apply(&self.m1.apply(&a)?)?.add(&a)?;
        let c = self.cv2.apply(x)?;
        self.cv3.apply(&concat_channels(&[&b, &c])?)
    }

    pub fn backward(&self, cache: &C3Cache, grad_out: &Tensor, grads: &mut C3) -> Result<Tensor> {
        let gcat = self.cv3.backward(&cache.cv3, grad_out, &mut grads.cv3)?;
        let mut parts = split_channels(&gcat, &[cache.hidden, cache.hidden])?;
        let gc = parts.pop().unwrap();
        let gb = parts.pop().unwrap();
        let mut gx = self.cv2.backward(&cache.cv2, &gc, &mut grads.cv2)?;
        let gb1 = self.m2.backward(&cache.m2, &gb, &mut grads.m2)?;
        let mut ga = self.m1.backward(&cache.m1, &gb1, &mut grads.m1)?;
        ga.add_assign(&gb)?;
        gx.add_assign(&self.cv1.backward(&cache.cv1, &ga, &mut grads.cv1)?)?;
        Ok(gx)
    }
}

/// Fast spatial pyramid pooling: three chained 5x5 max-pools, concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct Sppf {
    pub cv1: Conv,
    pub cv2: Conv,
}

impl_parameters!(Sppf { cv1, cv2 });

pub const SPPF_POOL: usize = 5;

#[derive(Clone, Debug)]
pub struct SppfCache {
    cv1: ConvCache,
    cv2: ConvCache,
    args: [Vec<usize>; 3],
    hidden: usize,
}

impl Sppf {
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let h = (c_in / 2).max(1);
        Self {
            cv1: Conv::init(c_in, h, 1, 1, true, rng),
            cv2: Conv::init(4 * h, c_out, 1, 1, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, SppfCache)> {
        let (a, cv1) = self.cv1.forward(x)?;
        let (p1, a1) = max_pool2d(&a, SPPF_POOL)?;
        let (p2, a2) = max_pool2d(&p1, SPPF_POOL)?;
        let (p3, a3) = max_pool2d(&p2, SPPF_POOL)?;
        let (y, cv2) = self.cv2.forward(&concat_channels(&[&a, &p1, &p2, &p3])?)?;
        let hidden = a.dim(0);
        Ok((y, SppfCache { cv1, cv2, args: [a1, a2, a3], hidden }))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&self, cache: &SppfCache, grad_out: &Tensor, grads: &mut Sppf) -> Result<Tensor> {
        let gcat = self.cv2.backward(&cache.cv2, grad_out, &mut grads.cv2)?;
        let h = cache.hidden;
        let mut parts = split_channels(&gcat, &[h, h, h, h])?.into_iter();
        let (mut ga, mut g1, mut g2, g3) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );
        g2.add_assign(&max_pool2d_backward(&cache.args[2], &g3))?;
        g1.add_assign(&max_pool2d_backward(&cache.args[1], &g2))?;
        ga.add_assign(&max_pool2d_backward(&cache.args[0], &g1))?;
        self.cv1.backward(&cache.cv1, &ga, &mut grads.cv1)
    }
}
