//! Dual-domain L1 loss, Adam, step schedule, augmentation and a single-patch
//! overfit loop.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{forward_var, Model};
use crate::params::WeightTree;
use crate::pass::{Ctx, ExpertUsage, Mode};
use crate::tensor::index::{narrow_map, Dihedral};
use crate::{Rng, Scalar, Tensor};

pub const DEFAULT_LAMBDA_FREQ: f64 = 0.05;

/// `mean|sr − hr| + λ · mean(|Re ΔF| + |Im ΔF|)`, `ΔF = DFT₂(sr) − DFT₂(hr)`.
pub fn loss<'t, T: Scalar>(sr: &Var<'t, T>, hr: &Var<'t, T>, lambda_freq: f64) -> Result<Var<'t, T>> {
    if sr.shape() != hr.shape() {
        return Err(shape_err("loss", format!("{:?} vs {:?}", sr.shape(), hr.shape())));
    }
    if !(lambda_freq >= 0.0) {
        return Err(invalid("loss", "lambda_freq must be non-negative"));
    }
    let diff = sr.sub(hr)?;
    let pixel = diff.abs().mean();
    if lambda_freq == 0.0 {
        return Ok(pixel);
    }
    // the DFT is linear, so transforming the difference gives ΔF directly
    let (re, im) = diff.dft2()?;
    let freq = re.abs().add(&im.abs())?.mean();
    pixel.add(&freq.scale(T::lit(lambda_freq)))
}

/// Tensor-level [`loss`].
pub fn loss_value<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, lambda_freq: f64) -> Result<f64> {
    let tape = Tape::no_grad();
    Ok(loss(&tape.constant(sr.clone()), &tape.constant(hr.clone()), lambda_freq)?.value().data()[0].as_f64())
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// One bias-corrected update. Parameters without a gradient entry keep
    /// their value (their moments still decay). Fails before touching any
    /// parameter if a gradient is non-finite or misshaped.
    pub fn step(&mut self, params: &mut WeightTree<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err("adam", format!("gradient of `{name}` is {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let (b1t, b2t, c1t, c2t) = (T::lit(b1), T::lit(b2), T::lit(c1), T::lit(c2));
        for (name, p) in params.iter_mut() {
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1t * m.data()[i] + (T::one() - b1t) * gi;
                let vi = b2t * v.data()[i] + (T::one() - b2t) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let (mhat, vhat) = (mi / c1t, vi / c2t);
                p.data_mut()[i] = p.data()[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Base rate halved at each milestone.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<u64>,
    pub factor: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, milestones: Vec<u64>) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("schedule", "milestones must be strictly increasing"));
        }
        Ok(Schedule {
            base_lr,
            milestones,
            factor: 0.5,
        })
    }

    /// The full-length schedule: 2e-4 halved at 250K, 400K, 450K and 475K.
    pub fn standard() -> Self {
        Schedule::new(2e-4, vec![250_000, 400_000, 450_000, 475_000]).expect("increasing")
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iter >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub y: usize,
    pub x: usize,
    pub transform: Dihedral,
}

/// Random `crop × crop` window of the last two axes followed by one of the
/// eight dihedral transforms.
pub fn augment<T: Scalar>(img: &Tensor<T>, crop: usize, rng: &mut Rng) -> Result<(Tensor<T>, AugmentDraw)> {
    let r = img.rank();
    if r < 2 {
        return Err(shape_err("augment", "need at least two axes"));
    }
    let (h, w) = (img.shape()[r - 2], img.shape()[r - 1]);
    if crop == 0 || h < crop || w < crop {
        return Err(invalid("augment", format!("{h}x{w} image is smaller than the {crop}x{crop} crop")));
    }
    let draw = AugmentDraw {
        y: rng.below(h - crop + 1),
        x: rng.below(w - crop + 1),
        transform: Dihedral::from_index(rng.below(8)),
    };
    Ok((apply_draw(img, crop, draw)?, draw))
}

pub fn apply_draw<T: Scalar>(img: &Tensor<T>, crop: usize, draw: AugmentDraw) -> Result<Tensor<T>> {
    let r = img.rank();
    let rows = narrow_map(img.shape(), r - 2, draw.y, crop)?;
    let cols = narrow_map(&rows.shape, r - 1, draw.x, crop)?.after(&rows);
    let t = draw.transform.map(&cols.shape)?.after(&cols);
    Ok(img.gather(&t.indices, &t.shape))
}

/// Undoes a dihedral transform on a square patch.
pub fn invert_transform<T: Scalar>(img: &Tensor<T>, d: Dihedral) -> Result<Tensor<T>> {
    let inv = d.map(img.shape())?.invert(img.shape())?;
    Ok(img.gather(&inv.indices, &inv.shape))
}

// ---------------------------------------------------------------------------
// Overfit harness

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub lambda_freq: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            steps: 200,
            lr: 2e-3,
            seed: 1,
            lambda_freq: DEFAULT_LAMBDA_FREQ,
        }
    }
}

pub const MAX_TOY_STEPS: usize = 1000;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub usage: ExpertUsage,
}

impl TrainTrace {
    /// `step,loss` rows with round-trippable decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l:e}\n"));
        }
        out
    }
}

/// Gradients of one train-mode forward/backward, by parameter name.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    lr: &Tensor<T>,
    hr: &Tensor<T>,
    lambda_freq: f64,
    ctx: &mut Ctx,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let tape = Tape::new();
    let bound = model.weights.bind(&tape, true);
    let x = tape.constant(lr.clone());
    let sr = forward_var(&x, &model.config, &bound.root(), ctx)?;
    let l = loss(&sr, &tape.constant(hr.clone()), lambda_freq)?;
    let value = l.value().data()[0].as_f64();
    let grads = tape.backward(&l)?;
    let by_name = bound.iter().map(|(name, v)| (name.clone(), grads.wrt(v))).collect();
    Ok((value, by_name))
}

/// Trains on one `(lr, hr)` pair. The loss of each step is recorded before
/// its update; Gumbel noise of step `i` comes from the `i`-th draw of the
/// run seed.
pub fn train_toy<T: Scalar>(model: &mut Model<T>, lr: &Tensor<T>, hr: &Tensor<T>, cfg: &ToyConfig) -> Result<TrainTrace> {
    if cfg.steps > MAX_TOY_STEPS {
        return Err(invalid("train-toy", format!("at most {MAX_TOY_STEPS} steps")));
    }
    let mut trace = TrainTrace::default();
    let mut opt = Adam::new(cfg.lr);
    let mut seeds = Rng::new(cfg.seed);
    for step in 0..cfg.steps {
        let mut ctx = Ctx::new(Mode::Train, seeds.next_u64());
        let (l, grads) = loss_and_grads(model, lr, hr, cfg.lambda_freq, &mut ctx)?;
        trace.usage.merge(&ctx.usage);
        if !l.is_finite() {
            trace.losses.push(l);
            return Err(Error::NonFinite(format!("loss at step {step}; trace so far: {:?}", trace.losses)));
        }
        trace.losses.push(l);
        opt.step(&mut model.weights, &grads)?;
    }
    Ok(trace)
}
