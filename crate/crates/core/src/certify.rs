//! Finite-difference certification suite run by `spmomamba gradcheck`.
//!
//! Every check is 64-bit, uses `ε = 1e-5` and a fixed seed, and reduces the
//! output under test to a scalar by a dot product with a fixed random probe.
//! Parameters are re-drawn uniformly (state matrices kept negative) so that
//! zero-initialized biases do not hide mistakes.

use crate::autodiff::{grad_check, grad_check_many, GradCheckConfig, GradCheckReport};
use crate::blocks::{self, LsmeConfig};
use crate::error::Result;
use crate::model::{forward_var, ModelConfig};
use crate::moe::{self, SgmeConfig};
use crate::params::{Bound, Scope, WeightTree};
use crate::pass::{Ctx, Mode};
use crate::spssm::{self, Gating, SpSsmConfig};
use crate::ssm::{self, ScanMode, SsmConfig};
use crate::superpixel::{self, MaskSampling, Neighborhood, SuperpixelConfig, SuperpixelGrid, SLOTS};
use crate::tensor::index::Dihedral;
use crate::tensor::{Activation, Padding};
use crate::train;
use crate::{Rng, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

type Runner = fn() -> Result<GradCheckReport>;

/// A named certification target; `module` groups checks for filtering.
#[derive(Clone, Copy)]
pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    run: Runner,
}

impl Check {
    pub fn run(&self) -> Result<GradCheckReport> {
        (self.run)()
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.module, self.name)
    }
}

pub fn checks() -> Vec<Check> {
    let c = |module, name, run: Runner| Check { module, name, run };
    vec![
        c("primitives", "elementwise", elementwise),
        c("primitives", "activations", activations),
        c("primitives", "movement", movement),
        c("primitives", "conv2d", conv2d),
        c("primitives", "dense", dense),
        c("primitives", "softmax_layer_norm", softmax_layer_norm),
        c("primitives", "spatial", spatial),
        c("primitives", "dft2", dft2),
        c("scan", "recurrent", || scan(ScanMode::Recurrent)),
        c("scan", "parallel", || scan(ScanMode::Parallel)),
        c("scan", "ssm_block", ssm_block),
        c("superpixel", "kernels", superpixel_kernels),
        c("superpixel", "sample_scatter", superpixel_sample),
        c("spssm", "sigmoid_gate", || spssm_block(Gating::Sigmoid, false)),
        c("spssm", "add_full_resolution", || spssm_block(Gating::Add, true)),
        c("moe", "mss_moe", mss_moe),
        c("ffn", "gated_ffn", gated_ffn),
        c("lma", "channel_attention", channel_attention),
        c("lma", "lma_shifted", lma),
        c("loss", "dual_domain", loss),
        c("model", "t_mini_forward_loss", t_mini),
    ]
}

/// Checks whose module or `module/name` id equals `filter`.
pub fn select(filter: Option<&str>) -> Vec<Check> {
    checks()
        .into_iter()
        .filter(|c| filter.map_or(true, |f| c.module == f || c.id() == f))
        .collect()
}

pub fn modules() -> Vec<&'static str> {
    let mut m: Vec<&'static str> = checks().iter().map(|c| c.module).collect();
    m.dedup();
    m
}

// ---------------------------------------------------------------------------

fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

fn project<'t>(y: &Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = Rng::new(seed);
    let r = y.tape().constant(rand_t(y.shape(), &mut rng));
    Ok(y.mul(&r)?.sum())
}

fn cfg() -> GradCheckConfig {
    GradCheckConfig {
        eps: EPS,
        ..Default::default()
    }
}

fn worst(reports: impl IntoIterator<Item = Result<GradCheckReport>>) -> Result<GradCheckReport> {
    let mut out: Option<GradCheckReport> = None;
    for r in reports {
        let r = r?;
        out = match out {
            Some(o) if o.max_rel_err >= r.max_rel_err => Some(GradCheckReport { checked: o.checked + r.checked, ..o }),
            Some(o) => Some(GradCheckReport { checked: o.checked + r.checked, ..r }),
            None => Some(r),
        };
    }
    Ok(out.expect("at least one report"))
}

fn randomize(tree: &mut WeightTree<f64>, rng: &mut Rng, amp: f64) {
    for (name, t) in tree.iter_mut() {
        let negative = name.ends_with("ssm.a");
        for v in t.data_mut() {
            *v = if negative { -rng.uniform_range(0.2, 2.0) } else { rng.uniform_range(-amp, amp) };
        }
    }
}

/// Input and every parameter of `tree` against `probe · f(x)`.
fn check_tree(
    tree: &WeightTree<f64>,
    x: Tensor<f64>,
    max_coords: Option<usize>,
    f: impl for<'t> Fn(&Var<'t, f64>, &Scope<'_, 't, f64>) -> Result<Var<'t, f64>>,
) -> Result<GradCheckReport> {
    let names: Vec<String> = tree.names().cloned().collect();
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|n| tree.get(n).cloned()).collect::<Result<Vec<_>>>()?);
    grad_check_many(
        |_, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().cloned()));
            project(&f(&v[0], &bound.root())?, 99)
        },
        &inputs,
        &GradCheckConfig { max_coords, ..cfg() },
    )
}

fn elementwise() -> Result<GradCheckReport> {
    let mut rng = Rng::new(3);
    let a = rand_t(&[2, 3, 4], &mut rng);
    let b = rand_t(&[3, 1], &mut rng);
    let pos = Tensor::from_fn(&[3, 1], |i| 0.5 + i as f64);
    worst([
        grad_check_many(|_, v| project(&v[0].add(&v[1])?.mul(&v[0])?.sub(&v[1])?, 1), &[a.clone(), b], &cfg()),
        grad_check_many(
            |_, v| project(&v[0].div(&v[1])?.exp().add_scalar(0.3).ln().abs().neg().square(), 2),
            &[a, pos],
            &cfg(),
        ),
    ])
}

fn activations() -> Result<GradCheckReport> {
    let mut rng = Rng::new(5);
    let x = Tensor::from_fn(&[20], |_| rng.uniform_range(-4.0, 4.0));
    worst(
        [Activation::Silu, Activation::Sigmoid, Activation::Softplus, Activation::Relu]
            .map(|k| grad_check(move |_, x| project(&x.act(k), 3), &x, EPS)),
    )
}

fn movement() -> Result<GradCheckReport> {
    let mut rng = Rng::new(6);
    let x = rand_t(&[2, 3, 4, 4], &mut rng);
    grad_check(
        |_, x| {
            let a = x.mean_axis(1)?.sum_axis(2)?;
            let b = x.permute(&[3, 1, 0, 2])?.narrow(0, 1, 2)?;
            let c = x.reshape(&[6, 16])?.transpose_last2()?;
            let parts = x.chunk(2, 2)?;
            let d = Var::concat(&[&parts[1], &parts[0]], 3)?;
            let e = x.gather(&Dihedral { flip: true, rot: 3 }.map(x.shape())?);
            project(&a, 1)?
                .add(&project(&b, 2)?)?
                .add(&project(&c, 3)?)?
                .add(&project(&d, 4)?)?
                .add(&project(&e, 5)?)?
                .add(&x.mean())
        },
        &x,
        EPS,
    )
}

fn conv2d() -> Result<GradCheckReport> {
    let mut rng = Rng::new(7);
    let mut reports = Vec::new();
    for (groups, padding, k) in [(1, Padding::Same, 3), (2, Padding::Same, 3), (1, Padding::Valid, 3), (4, Padding::Same, 1)] {
        let x = rand_t(&[2, 4, 5, 6], &mut rng);
        let w = rand_t(&[4, 4 / groups, k, k], &mut rng);
        let b = rand_t(&[4], &mut rng);
        reports.push(grad_check_many(
            move |_, v| project(&v[0].conv2d(&v[1], Some(&v[2]), padding, groups)?, 8),
            &[x, w, b],
            &cfg(),
        ));
    }
    worst(reports)
}

fn dense() -> Result<GradCheckReport> {
    let mut rng = Rng::new(8);
    let x = rand_t(&[2, 3, 5], &mut rng);
    let w = rand_t(&[4, 5], &mut rng);
    let b = rand_t(&[4], &mut rng);
    let y = rand_t(&[2, 5, 3], &mut rng);
    let img = rand_t(&[2, 2, 3, 3], &mut rng);
    let pw = rand_t(&[3, 2], &mut rng);
    worst([
        grad_check_many(|_, v| project(&v[0].linear(&v[1], Some(&v[2]))?, 1), &[x.clone(), w, b], &cfg()),
        grad_check_many(|_, v| project(&v[0].bmm(&v[1])?, 2), &[x, y], &cfg()),
        grad_check_many(|_, v| project(&v[0].pointwise(&v[1], None)?, 3), &[img, pw], &cfg()),
    ])
}

fn softmax_layer_norm() -> Result<GradCheckReport> {
    let mut rng = Rng::new(9);
    let x = rand_t(&[3, 4, 2], &mut rng).scale(3.0);
    let g = Tensor::from_fn(&[4], |_| rng.uniform_range(0.5, 1.5));
    let b = rand_t(&[4], &mut rng);
    worst([
        grad_check(|_, x| project(&x.softmax(1)?, 4), &x, EPS),
        grad_check_many(|_, v| project(&v[0].layer_norm(&v[1], &v[2], 1, 1e-5)?, 5), &[x.clone(), g, b], &cfg()),
    ])
}

fn spatial() -> Result<GradCheckReport> {
    let mut rng = Rng::new(10);
    let x = rand_t(&[1, 8, 4, 6], &mut rng);
    grad_check(
        |_, x| {
            project(&x.avg_pool(2, 3)?, 1)?
                .add(&project(&x.upsample(2)?, 2)?)?
                .add(&project(&x.pixel_shuffle(2)?, 3)?)
        },
        &x,
        EPS,
    )
}

fn dft2() -> Result<GradCheckReport> {
    let mut rng = Rng::new(11);
    let x = rand_t(&[1, 2, 4, 5], &mut rng);
    grad_check(
        |_, x| {
            let (re, im) = x.dft2()?;
            re.abs().mean().add(&project(&im, 6)?)
        },
        &x,
        EPS,
    )
}

fn scan(mode: ScanMode) -> Result<GradCheckReport> {
    let mut rng = Rng::new(12);
    let (b, l, c, d) = (2, 6, 3, 4);
    let inputs = [
        rand_t(&[b, l, c], &mut rng),
        Tensor::from_fn(&[b, l, c], |_| rng.uniform_range(0.05, 1.5)),
        Tensor::from_fn(&[c, d], |_| -rng.uniform_range(0.1, 3.0)),
        rand_t(&[b, l, d], &mut rng),
        rand_t(&[b, l, d], &mut rng),
        rand_t(&[c], &mut rng),
    ];
    grad_check_many(
        |_, v| project(&ssm::selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5], mode)?, 13),
        &inputs,
        &cfg(),
    )
}

fn ssm_block() -> Result<GradCheckReport> {
    let mut rng = Rng::new(14);
    let p = ssm::SsmParams::<f64>::init(3, 4, &mut rng);
    let mut inputs = vec![rand_t(&[5, 3], &mut rng)];
    for (i, t) in p.tensors().into_iter().enumerate() {
        // keep A negative, spread the rest
        inputs.push(if i == 0 { t.clone() } else { rand_t(t.shape(), &mut rng).scale(0.5) });
    }
    let mut reports = Vec::new();
    for direction in [ssm::Direction::Forward, ssm::Direction::Bidirectional] {
        let cfg_ssm = SsmConfig {
            d_state: 4,
            direction,
            ..Default::default()
        };
        reports.push(grad_check_many(
            move |_, v| {
                let vars = ssm::SsmVars {
                    a: v[1].clone(),
                    d: v[2].clone(),
                    proj_b: v[3].clone(),
                    proj_c: v[4].clone(),
                    dt_bias: v[5].clone(),
                    proj_dt: v[6].clone(),
                };
                project(&ssm::ssm_block(&v[0], &vars, &cfg_ssm)?, 15)
            },
            &inputs,
            &cfg(),
        ));
    }
    worst(reports)
}

fn superpixel_kernels() -> Result<GradCheckReport> {
    let mut rng = Rng::new(16);
    let nb = Neighborhood::new(SuperpixelGrid::new(4, 6, 2, 3)?);
    let x = rand_t(&[2, 24, 3], &mut rng);
    let s = rand_t(&[2, 6, 3], &mut rng);
    let w = Tensor::from_fn(&[2, 24, SLOTS], |_| rng.uniform_range(0.1, 1.0));
    worst([
        grad_check_many(|_, v| project(&superpixel::neighbor_sq_dist(&v[0], &v[1], &nb)?, 1), &[x.clone(), s.clone()], &cfg()),
        grad_check_many(
            |_, v| project(&superpixel::centroid_update(&v[0], &v[1], &v[2], &nb)?, 2),
            &[x, w.clone(), s.clone()],
            &cfg(),
        ),
        grad_check_many(|_, v| project(&superpixel::scatter_var(&v[0], &v[1], &nb)?, 3), &[w, s], &cfg()),
    ])
}

fn superpixel_sample() -> Result<GradCheckReport> {
    let mut rng = Rng::new(17);
    let nb = Neighborhood::new(SuperpixelGrid::new(6, 6, 3, 3)?);
    let x = Tensor::from_fn(&[1, 36, 2], |_| rng.uniform());
    worst([
        grad_check(
            |_, x| {
                let out = superpixel::sample_var(&x, &nb, 3)?;
                project(&superpixel::scatter_var(&out.assoc, &out.s, &nb)?, 4)
            },
            &x,
            EPS,
        ),
        grad_check(
            |_, x| {
                let out = superpixel::sample_var(&x, &nb, 2)?;
                let mask = superpixel::gumbel_one_hot(&out.assoc, &nb, 1.0, MaskSampling::Gumbel, &mut Rng::new(3))?;
                project(&superpixel::scatter_var(&mask, &out.s, &nb)?, 5)
            },
            &x,
            EPS,
        ),
    ])
}

fn small_expert() -> SpSsmConfig {
    SpSsmConfig {
        superpixel: SuperpixelConfig { iters: 2, tau: 1.0 },
        ssm: SsmConfig {
            d_state: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn spssm_block(gating: Gating, full_resolution: bool) -> Result<GradCheckReport> {
    let cfg_sp = SpSsmConfig {
        scale: 2,
        superpixels: 4,
        gating,
        full_resolution,
        ..small_expert()
    };
    let mut rng = Rng::new(18);
    let mut tree = WeightTree::new();
    spssm::init(&mut tree, "sp", 2, &cfg_sp, &mut rng)?;
    randomize(&mut tree, &mut rng, 0.6);
    let x = rand_t(&[1, 2, 4, 4], &mut rng);
    check_tree(&tree, x, None, |x, s| {
        let mut ctx = Ctx::new(Mode::Train, 11);
        spssm::sp_ssm_forward(x, &cfg_sp, &s.sub("sp"), &mut ctx)
    })
}

fn mss_moe() -> Result<GradCheckReport> {
    let cfg_moe = SgmeConfig {
        k: 1,
        scales: vec![1, 2],
        superpixels: vec![4, 1],
        expert: small_expert(),
        ..Default::default()
    };
    let mut rng = Rng::new(19);
    let mut tree = WeightTree::new();
    moe::init_moe(&mut tree, "moe", 2, &cfg_moe, &mut rng)?;
    randomize(&mut tree, &mut rng, 0.6);
    let x = rand_t(&[1, 2, 4, 4], &mut rng);
    check_tree(&tree, x, None, |x, s| {
        let mut ctx = Ctx::new(Mode::Train, 12);
        moe::mss_moe_forward(x, &cfg_moe, &s.sub("moe"), &mut ctx)
    })
}

fn gated_ffn() -> Result<GradCheckReport> {
    let mut rng = Rng::new(20);
    let mut tree = WeightTree::new();
    moe::init_gated_ffn(&mut tree, "ffn", 2, 2, &mut rng)?;
    randomize(&mut tree, &mut rng, 0.6);
    let x = rand_t(&[1, 2, 4, 4], &mut rng);
    check_tree(&tree, x, None, |x, s| moe::gated_ffn(x, &s.sub("ffn")))
}

fn channel_attention() -> Result<GradCheckReport> {
    let mut rng = Rng::new(21);
    let mut tree = WeightTree::new();
    blocks::init_channel_attention(&mut tree, "ca", 4, 2, &mut rng)?;
    randomize(&mut tree, &mut rng, 0.8);
    let x = rand_t(&[2, 4, 3, 3], &mut rng);
    check_tree(&tree, x, None, |x, s| blocks::channel_attention(x, &s.sub("ca")))
}

fn small_lsme() -> LsmeConfig {
    LsmeConfig {
        window: 4,
        heads: 2,
        reduction: 2,
        ..Default::default()
    }
}

fn lma() -> Result<GradCheckReport> {
    let mut rng = Rng::new(22);
    let mut tree = WeightTree::new();
    blocks::init_lma(&mut tree, "lma", 4, &small_lsme(), &mut rng)?;
    randomize(&mut tree, &mut rng, 0.5);
    let x = rand_t(&[1, 4, 8, 4], &mut rng);
    check_tree(&tree, x, None, |x, s| blocks::lma(x, &small_lsme(), 2, &s.sub("lma")))
}

fn loss() -> Result<GradCheckReport> {
    let mut rng = Rng::new(23);
    let sr = rand_t(&[1, 2, 4, 6], &mut rng);
    let hr = rand_t(&[1, 2, 4, 6], &mut rng);
    grad_check(
        |t, x| train::loss(&x, &t.constant(hr.clone()), train::DEFAULT_LAMBDA_FREQ),
        &sr,
        EPS,
    )
}

/// Preset T-mini (×2) in training mode with fixed Gumbel noise, through the
/// dual-domain loss; every parameter tensor is probed at a few coordinates.
fn t_mini() -> Result<GradCheckReport> {
    let cfg_model = ModelConfig::preset("T-mini", 2)?;
    let mut rng = Rng::new(24);
    let mut tree = WeightTree::new();
    crate::model::init_weights(&mut tree, &cfg_model, &mut rng)?;
    let lr = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.uniform());
    let hr = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.uniform());
    let names: Vec<String> = tree.names().cloned().collect();
    let mut inputs = vec![lr];
    inputs.extend(names.iter().map(|n| tree.get(n).cloned()).collect::<Result<Vec<_>>>()?);
    grad_check_many(
        |tape: &Tape<f64>, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().cloned()));
            let mut ctx = Ctx::new(Mode::Train, 25);
            let sr = forward_var(&v[0], &cfg_model, &bound.root(), &mut ctx)?;
            train::loss(&sr, &tape.constant(hr.clone()), train::DEFAULT_LAMBDA_FREQ)
        },
        &inputs,
        &GradCheckConfig {
            max_coords: Some(2),
            seed: 26,
            ..cfg()
        },
    )
}
