use super::*;
use crate::autodiff::{grad_check_many, GradCheckConfig, Tape};
use crate::params::Bound;
use crate::pass::{Mode, Pass, Routing};
use crate::superpixel::MaskSampling;

fn build(c: usize, cfg: &SpSsmConfig, seed: u64) -> WeightTree<f64> {
    let mut tree = WeightTree::new();
    init(&mut tree, "sp", c, cfg, &mut Rng::new(seed)).unwrap();
    tree
}

fn run(x: &Tensor<f64>, cfg: &SpSsmConfig, tree: &WeightTree<f64>, mode: Mode, seed: u64) -> Tensor<f64> {
    let tape = Tape::no_grad();
    let bound = tree.bind(&tape, false);
    let mut ctx = Ctx::new(mode, seed);
    let y = sp_ssm_forward(&tape.constant(x.clone()), cfg, &bound.root().sub("sp"), &mut ctx).unwrap();
    y.value().clone()
}

fn randomize(tree: &mut WeightTree<f64>, rng: &mut Rng, amp: f64) {
    for (name, t) in tree.iter_mut() {
        let neg = name.ends_with(".a");
        for v in t.data_mut() {
            *v = if neg { -rng.uniform_range(0.2, 2.0) } else { rng.uniform_range(-amp, amp) };
        }
    }
}

#[test]
fn zero_transform_is_residual_identity() {
    let mut rng = Rng::new(0);
    for (gating, full, s) in [
        (Gating::Sigmoid, false, 1),
        (Gating::Sigmoid, false, 2),
        (Gating::Add, false, 2),
        (Gating::Sigmoid, true, 2),
        (Gating::Add, true, 1),
    ] {
        let cfg = SpSsmConfig {
            scale: s,
            superpixels: 4,
            gating,
            full_resolution: full,
            ..Default::default()
        };
        let mut tree = build(4, &cfg, 1);
        randomize(&mut tree, &mut rng, 0.5);
        tree.set("sp.conv.weight", Tensor::zeros(&[4, 1, 3, 3])).unwrap();
        tree.set("sp.conv.bias", Tensor::zeros(&[4])).unwrap();
        let x = Tensor::from_fn(&[2, 4, 8, 8], |_| rng.uniform_range(-1.0, 1.0));
        for mode in [Mode::Train, Mode::Infer] {
            assert_eq!(run(&x, &cfg, &tree, mode, 3), x);
        }
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    if v > 20.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

#[test]
fn tiny_block_matches_straight_line_oracle() {
    let c = 2;
    let cfg = SpSsmConfig {
        scale: 1,
        superpixels: 1,
        ssm: SsmConfig {
            d_state: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut rng = Rng::new(2);
    let mut tree = build(c, &cfg, 5);
    randomize(&mut tree, &mut rng, 0.8);
    let x = Tensor::from_fn(&[1, c, 2, 2], |_| rng.uniform_range(-1.0, 1.0));
    let got = run(&x, &cfg, &tree, Mode::Infer, 0);

    let g = |n: &str| tree.get(&format!("sp.{n}")).unwrap().clone();
    let (cw, cb) = (g("conv.weight"), g("conv.bias"));
    // x' per pixel (raster) and channel
    let mut xt = [[0.0; 2]; 4];
    for p in 0..4 {
        let (py, px) = ((p / 2) as isize, (p % 2) as isize);
        for ch in 0..c {
            let mut acc = cb.data()[ch];
            for ky in 0..3isize {
                for kx in 0..3isize {
                    let (y, xx) = (py + ky - 1, px + kx - 1);
                    if (0..2).contains(&y) && (0..2).contains(&xx) {
                        acc += cw.at(&[ch, 0, ky as usize, kx as usize]) * x.at(&[0, ch, y as usize, xx as usize]);
                    }
                }
            }
            xt[p][ch] = silu(acc);
        }
    }
    let mut sp = [0.0; 2];
    for ch in 0..c {
        sp[ch] = (0..4).map(|p| xt[p][ch]).sum::<f64>() / 4.0;
    }
    for _ in 0..cfg.superpixel.iters {
        let w: Vec<f64> = (0..4)
            .map(|p| (-(0..c).map(|ch| (xt[p][ch] - sp[ch]).powi(2)).sum::<f64>()).exp())
            .collect();
        let z: f64 = w.iter().sum();
        for ch in 0..c {
            sp[ch] = (0..4).map(|p| w[p] * xt[p][ch]).sum::<f64>() / z;
        }
    }
    // single-token SSM
    let (a, d, pb, pc, pdt, bdt) = (g("ssm.a"), g("ssm.d"), g("ssm.proj_b"), g("ssm.proj_c"), g("ssm.proj_dt.weight"), g("ssm.proj_dt.bias"));
    let mut tok = [0.0; 2];
    for ch in 0..c {
        let dt = softplus((0..c).map(|k| pdt.at(&[ch, k]) * sp[k]).sum::<f64>() + bdt.data()[ch]);
        let mut y = d.data()[ch] * sp[ch];
        for i in 0..3 {
            let bi: f64 = (0..c).map(|k| pb.at(&[i, k]) * sp[k]).sum();
            let ci: f64 = (0..c).map(|k| pc.at(&[i, k]) * sp[k]).sum();
            let ai = a.at(&[ch, i]);
            y += ci * (dt * ai).exp_m1() / ai * bi * sp[ch];
        }
        tok[ch] = y;
    }
    for p in 0..4 {
        for ch in 0..c {
            let want = 1.0 / (1.0 + (-tok[ch]).exp()) * xt[p][ch] + x.at(&[0, ch, p / 2, p % 2]);
            assert!((got.at(&[0, ch, p / 2, p % 2]) - want).abs() <= 1e-6);
        }
    }
}

#[test]
fn shape_law() {
    let mut rng = Rng::new(3);
    for (h, w) in [(8, 8), (16, 8), (32, 32)] {
        for s in [1, 2, 4] {
            let cfg = SpSsmConfig {
                scale: s,
                superpixels: 4,
                ..Default::default()
            };
            let tree = build(4, &cfg, 4);
            let x = Tensor::from_fn(&[1, 4, h, w], |_| rng.uniform());
            assert_eq!(run(&x, &cfg, &tree, Mode::Train, 1).shape(), &[1, 4, h, w]);
        }
    }
    let cfg = SpSsmConfig {
        scale: 4,
        superpixels: 1,
        ..Default::default()
    };
    let tree = build(4, &cfg, 4);
    let tape = Tape::no_grad();
    let bound = tree.bind(&tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 4, 6, 8]));
    assert!(sp_ssm_forward(&x, &cfg, &bound.root().sub("sp"), &mut Ctx::new(Mode::Infer, 0)).is_err());
}

#[test]
fn flop_report() {
    let cfg = SpSsmConfig {
        scale: 1,
        superpixels: 64,
        ..Default::default()
    };
    let f = flops(&cfg, 16, 64, 64).unwrap();
    assert_eq!((f.dense_tokens, f.scan_tokens), (4096, 64));
    assert_eq!(f.ratio(), 64.0);
    let f2 = flops(&SpSsmConfig { scale: 2, ..cfg }, 16, 64, 64).unwrap();
    assert_eq!(f2.dense_tokens, 1024);
    assert_eq!(f2.scan_flops, f.scan_flops);

    let mut rng = Rng::new(4);
    for _ in 0..20 {
        let s = [1, 2, 4][rng.below(3)];
        let m = 1 + rng.below(256);
        let (h, w) = (s * (1 + rng.below(64)), s * (1 + rng.below(64)));
        let cfg = SpSsmConfig {
            scale: s,
            superpixels: m,
            ..Default::default()
        };
        let c = 1 + rng.below(64);
        let f = flops(&cfg, c, h, w).unwrap();
        assert_eq!(f.ratio(), (h * w / (s * s)) as f64 / m as f64);
    }
}

#[test]
fn param_count_matches_tree() {
    for depthwise in [true, false] {
        let cfg = SpSsmConfig {
            depthwise,
            ..Default::default()
        };
        assert_eq!(build(8, &cfg, 0).param_count(), param_count(8, &cfg));
    }
}

#[test]
fn train_mode_is_seeded() {
    let cfg = SpSsmConfig {
        scale: 2,
        superpixels: 4,
        ..Default::default()
    };
    let mut rng = Rng::new(6);
    let mut tree = build(4, &cfg, 2);
    randomize(&mut tree, &mut rng, 0.5);
    let x = Tensor::from_fn(&[1, 4, 8, 8], |_| rng.uniform());
    assert!(run(&x, &cfg, &tree, Mode::Train, 9).bit_eq(&run(&x, &cfg, &tree, Mode::Train, 9)));
    assert!(run(&x, &cfg, &tree, Mode::Infer, 1).bit_eq(&run(&x, &cfg, &tree, Mode::Infer, 2)));
}

#[test]
fn block_grad_check() {
    for (gating, full) in [(Gating::Sigmoid, false), (Gating::Add, true)] {
        let cfg = SpSsmConfig {
            scale: 2,
            superpixels: 4,
            gating,
            full_resolution: full,
            superpixel: SuperpixelConfig { iters: 2, tau: 1.0 },
            ssm: SsmConfig {
                d_state: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut rng = Rng::new(7);
        let mut tree = build(2, &cfg, 8);
        randomize(&mut tree, &mut rng, 0.6);
        let names: Vec<String> = tree.names().cloned().collect();
        let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.uniform_range(-1.0, 1.0));
        let probe = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.uniform_range(-1.0, 1.0));
        let mut inputs = vec![x];
        inputs.extend(names.iter().map(|n| tree.get(n).unwrap().clone()));
        let pass = Pass {
            routing: Routing::Dense,
            sampling: MaskSampling::Gumbel,
        };
        let r = grad_check_many(
            |tape, v| {
                let bound = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().cloned()));
                let mut ctx = Ctx::with_pass(pass, 11);
                let y = sp_ssm_forward(&v[0], &cfg, &bound.root().sub("sp"), &mut ctx)?;
                Ok(y.mul(&tape.constant(probe.clone()))?.sum())
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passes(1e-4), "{gating:?} {r:?}");
    }
}
