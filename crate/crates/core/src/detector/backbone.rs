use rand::Rng;

use super::layers::{Conv, ConvCache, Sppf, SppfCache, C3Cache, C3};
use crate::error::{Error, Result};
use crate::params::impl_parameters;
use crate::tensor::Tensor;
use crate::Modality;

/// Input sides must be a multiple of the deepest stride.
pub const INPUT_MULTIPLE: usize = 32;

/// One backbone stage output, tagged with its branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub stage: usize,
    pub modality: Modality,
    pub tensor: Tensor,
}

/// Six-stage CNN branch: stride-2 stem, four `C3 -> stride-2 conv` stages,
/// then SPPF at stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stem: Conv,
    pub c3: Vec<C3>,
    pub down: Vec<Conv>,
    pub sppf: Sppf,
}

impl_parameters!(Backbone { stem, c3, down, sppf });

#[derive(Clone, Debug)]
pub struct BackboneCache {
    stem: ConvCache,
    c3: Vec<C3Cache>,
    down: Vec<ConvCache>,
    sppf: SppfCache,
}

pub(crate) fn check_input(img: &Tensor) -> Result<()> {
    if img.ndim() != 3 || img.dim(0) != 3 {
        return Err(Error::dim("backbone", format!("expected a [3,H,W] image, got {:?}", img.shape())));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::Config(format!(
            "image size {h}x{w} must be a multiple of {INPUT_MULTIPLE} on both sides"
        )));
    }
    Ok(())
}

impl Backbone {
    pub fn init(widths: &[usize; 6], rng: &mut impl Rng) -> Self {
        let stem = Conv::init(3, widths[0], 3, 2, true, rng);
        let mut c3 = Vec::with_capacity(4);
        let mut down = Vec::with_capacity(4);
        for i in 1..=4 {
            c3.push(C3::init(widths[i - 1], rng));
            down.push(Conv::init(widths[i - 1], widths[i], 3, 2, true, rng));
        }
        let sppf = Sppf::init(widths[4], widths[5], rng);
        Self { stem, c3, down, sppf }
    }

    /// Stage outputs 0..=5.
    pub fn forward(&self, img: &Tensor) -> Result<(Vec<Tensor>, BackboneCache)> {
        check_input(img)?;
        let mut feats = Vec::with_capacity(6);
        let (x, stem) = self.stem.forward(img)?;
        feats.push(x);
        let mut c3 = Vec::with_capacity(4);
        let mut down = Vec::with_capacity(4);
        for (block, conv) in self.c3.iter().zip(&self.down) {
            let (y, cc) = block.forward(feats.last().unwrap())?;
            let (z, dc) = conv.forward(&y)?;
            c3.push(cc);
            down.push(dc);
            feats.push(z);
        }
        let (x, sppf) = self.sppf.forward(&feats[4])?;
        feats.push(x);
        Ok((feats, BackboneCache { stem, c3, down, sppf }))
    }

    pub fn apply(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        check_input(img)?;
        let mut feats = Vec::with_capacity(6);
        feats.push(self.stem.apply(img)?);
        for (block, conv) in self.c3.iter().zip(&self.down) {
            let y = conv.apply(&block.apply(feats.last().unwrap())?)?;
            feats.push(y);
        }
        let x = self.sppf.apply(&feats[4])?;
        feats.push(x);
        Ok(feats)
    }

    /// Accumulates parameter gradients given output gradients at any subset of stages.
    pub fn backward(&self, cache: &BackboneCache, stage_grads: &[Option<Tensor>; 6], grads: &mut Backbone) -> Result<()> {
        let mut g = stage_grads[5].clone();
        let mut carry = match g.take() {
            Some(g5) => Some(self.sppf.backward(&cache.sppf, &g5, &mut grads.sppf)?),
            None => None,
        };
        for i in (1..=4).rev() {
            let gi = match (carry.take(), &stage_grads[i]) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(b)?;
                    Some(a)
                }
                (Some(a), None) => Some(a),
                (None, Some(b)) => Some(b.clone()),
                (None, None) => None,
            };
            if let Some(gi) = gi {
                let gy = self.down[i - 1].backward(&cache.down[i - 1], &gi, &mut grads.down[i - 1])?;
                carry = Some(self.c3[i - 1].backward(&cache.c3[i - 1], &gy, &mut grads.c3[i - 1])?);
            }
        }
        let g0 = match (carry, &stage_grads[0]) {
            (Some(mut a), Some(b)) => {
                a.add_assign(b)?;
                Some(a)
            }
            (Some(a), None) => Some(a),
            (None, b) => b.clone(),
        };
        if let Some(g0) = g0 {
            self.stem.backward(&cache.stem, &g0, &mut grads.stem)?;
        }
        Ok(())
    }
}
