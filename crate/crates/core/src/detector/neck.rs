use rand::Rng;

use super::layers::{Conv, ConvCache};
use crate::error::Result;
use crate::params::impl_parameters;
use crate::tensor::{concat_channels, split_channels, upsample_nearest2x, upsample_nearest2x_backward, Tensor};

/// Top-down pathway: the deeper level is upsampled 2x, concatenated with the
/// shallower one and merged by a 1x1 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    /// merges up(level 2) with level 1
    pub lat1: Conv,
    /// merges up(level 1) with level 0
    pub lat0: Conv,
}

impl_parameters!(Neck { lat1, lat0 });

#[derive(Clone, Debug)]
pub struct NeckCache {
    lat1: ConvCache,
    lat0: ConvCache,
    split1: [usize; 2],
    split0: [usize; 2],
}

impl Neck {
    /// `channels` = widths of the three pyramid levels, shallow to deep.
    pub fn init(channels: [usize; 3], rng: &mut impl Rng) -> Self {
        let [c0, c1, c2] = channels;
        Self {
            lat1: Conv::init(c2 + c1, c1, 1, 1, true, rng),
            lat0: Conv::init(c1 + c0, c0, 1, 1, true, rng),
        }
    }

    pub fn forward(&self, pyramid: &[Tensor]) -> Result<(Vec<Tensor>, NeckCache)> {
        let up2 = upsample_nearest2x(&pyramid[2])?;
        let (t1, lat1) = self.lat1.forward(&concat_channels(&[&up2, &pyramid[1]])?)?;
        let up1 = upsample_nearest2x(&t1)?;
        let (t0, lat0) = self.lat0.forward(&concat_channels(&[&up1, &pyramid[0]])?)?;
        let cache = NeckCache {
            lat1,
            lat0,
            split1: [pyramid[2].dim(0), pyramid[1].dim(0)],
            split0: [t1.dim(0), pyramid[0].dim(0)],
        };
        Ok((vec![t0, t1, pyramid[2].clone()], cache))
    }

    pub fn apply(&self, pyramid: &[Tensor]) -> Result<Vec<Tensor>> {
        let up2 = upsample_nearest2x(&pyramid[2])?;
        let t1 = self.lat1.apply(&concat_channels(&[&up2, &pyramid[1]])?)?;
        let up1 = upsample_nearest2x(&t1)?;
        let t0 = self.lat0.apply(&concat_channels(&[&up1, &pyramid[0]])?)?;
        Ok(vec![t0, t1, pyramid[2].clone()])
    }

    /// Pyramid gradients from gradients of the three merged outputs.
    pub fn backward(&self, cache: &NeckCache, grad_out: Vec<Tensor>, grads: &mut Neck) -> Result<Vec<Tensor>> {
        let mut it = grad_out.into_iter();
        let (g0, mut g1, mut g2) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        let gcat0 = self.lat0.backward(&cache.lat0, &g0, &mut grads.lat0)?;
        let mut p0 = split_channels(&gcat0, &cache.split0)?;
        let gp0 = p0.pop().unwrap();
        g1.add_assign(&upsample_nearest2x_backward(&p0.pop().unwrap())?)?;
        let gcat1 = self.lat1.backward(&cache.lat1, &g1, &mut grads.lat1)?;
        let mut p1 = split_channels(&gcat1, &cache.split1)?;
        let gp1 = p1.pop().unwrap();
        g2.add_assign(&upsample_nearest2x_backward(&p1.pop().unwrap())?)?;
        Ok(vec![gp0, gp1, g2])
    }
}

/// Per-level prediction head: 3x3 conv + SiLU, then a 1x1 conv to
/// `anchors * (5 + classes)` raw outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub conv: Conv,
    pub pred: Conv,
}

impl_parameters!(Head { conv, pred });

#[derive(Clone, Debug)]
pub struct HeadCache {
    conv: ConvCache,
    pred: ConvCache,
}

impl Head {
    /// `cells` is the grid size of this level; it sets the objectness prior.
    pub fn init(c: usize, anchors: usize, classes: usize, cells: usize, rng: &mut impl Rng) -> Self {
        let conv = Conv::init(c, c, 3, 1, true, rng);
        let mut pred = Conv::init(c, anchors * (5 + classes), 1, 1, false, rng);
        pred.weight = pred.weight.scale(0.1);
        let obj_prior = (2.0 / cells as f64).min(0.5);
        let cls_prior = 0.6 / (classes as f64 - 0.99).max(0.01);
        for a in 0..anchors {
            let base = a * (5 + classes);
            pred.bias.data_mut()[base + 4] = (obj_prior / (1.0 - obj_prior)).ln();
            for k in 0..classes {
                pred.bias.data_mut()[base + 5 + k] = cls_prior.ln();
            }
        }
        Self { conv, pred }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        let (h, conv) = self.conv.forward(x)?;
        let (y, pred) = self.pred.forward(&h)?;
        Ok((y, HeadCache { conv, pred }))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.pred.apply(&self.conv.apply(x)?)
    }

    pub fn backward(&self, cache: &HeadCache, grad_out: &Tensor, grads: &mut Head) -> Result<Tensor> {
        let gh = self.pred.backward(&cache.pred, grad_out, &mut grads.pred)?;
        self.conv.backward(&cache.conv, &gh, &mut grads.conv)
    }
}
