use super::*;
use crate::blocks::LsmeConfig;
use crate::spssm::SpSsmConfig;
use crate::ssm::SsmConfig;
use crate::superpixel::SuperpixelConfig;
use crate::tensor::conv::conv2d;
use crate::tensor::Padding;

fn micro(upscale: usize) -> ModelConfig {
    ModelConfig {
        n_loe: 2,
        m_pairs: 1,
        channels: 8,
        upscale,
        sgme: SgmeConfig {
            superpixels: vec![4, 4, 4],
            expert: SpSsmConfig {
                superpixel: SuperpixelConfig { iters: 2, tau: 1.0 },
                ssm: SsmConfig {
                    d_state: 4,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        },
        lsme: LsmeConfig {
            window: 4,
            heads: 2,
            reduction: 2,
            ..Default::default()
        },
    }
}

fn image(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform())
}

#[test]
fn builds_are_deterministic() {
    let a = Model::<f64>::build(micro(2), 7).unwrap();
    let b = Model::<f64>::build(micro(2), 7).unwrap();
    let c = Model::<f64>::build(micro(2), 8).unwrap();
    assert!(a.weights.bit_eq(&b.weights));
    assert!(!a.weights.bit_eq(&c.weights));
    for l in 0..2 {
        for s in ["beta", "gamma"] {
            let name = format!("loe.{l}.{s}");
            assert_eq!(a.weights.names().filter(|n| **n == name).count(), 1);
            assert_eq!(a.weights.get(&name).unwrap().data(), &[1.0]);
        }
    }
    assert_eq!(a.weights.names().filter(|n| n.ends_with("beta") || n.ends_with("gamma")).count(), 4);
}

#[test]
fn preset_t_count_matches_layer_sum() {
    let c = 36;
    let d = 16;
    let conv3 = |cin: usize, cout: usize| cin * cout * 9 + cout;
    let lin = |i: usize, o: usize| i * o + o;
    let ffn = lin(c, 4 * c) + (2 * c * 9 + 2 * c) + lin(2 * c, c);
    let expert = c * 9 + c + c * d + c + 2 * d * c + c * c + c;
    let sgme = 4 * c + lin(c, 2 * c) + lin(c, 3) + 3 * expert + lin(c, c) + ffn;
    let lsme = 4 * c + lin(c, c / 4) + lin(c / 4, c) + lin(c, 3 * c) + lin(c, c) + 15 * 15 * 4 + ffn;
    let loe = 2 * (sgme + lsme) + conv3(c, c) + 2;
    let total = conv3(3, c) + 3 * loe + conv3(c, c) + conv3(c, 48);

    let cfg = ModelConfig::preset("T", 4).unwrap();
    assert_eq!(param_count(&cfg), total);
    assert_eq!(Model::<f32>::build(cfg, 0).unwrap().param_count(), total);
    for (name, r) in [("B", 4), ("T-mini", 2), ("t", 3)] {
        let cfg = ModelConfig::preset(name, r).unwrap();
        assert_eq!(Model::<f32>::build(cfg.clone(), 0).unwrap().param_count(), param_count(&cfg));
    }
    assert!(ModelConfig::preset("XL", 4).is_err());
}

#[test]
fn single_conv_accounting() {
    for c in [1, 16, 36] {
        let mut tree = WeightTree::<f64>::new();
        init_conv(&mut tree, "c", c, 3, 3, &mut Rng::new(0)).unwrap();
        assert_eq!(tree.param_count(), 27 * c + c);
        assert_eq!(conv_params(c, 3, 3), 27 * c + c);
        assert_eq!(layers::conv_macs(20, 30, 3, c, 3), (20 * 30 * 3 * c * 9) as u64);
    }
    let cfg = ModelConfig::preset("T", 4).unwrap();
    let g = gmacs(&cfg, 720, 1280);
    assert!(g.is_finite() && g > 0.0);
}

fn loe_eval(x: &Tensor<f64>, cfg: &ModelConfig, tree: &WeightTree<f64>) -> Tensor<f64> {
    let tape = Tape::no_grad();
    let bound = tree.bind(&tape, false);
    let mut ctx = Ctx::new(Mode::Infer, 0);
    loe_forward(&tape.constant(x.clone()), cfg, 0, &bound.root().sub("loe.0"), &mut ctx)
        .unwrap()
        .value()
        .clone()
}

#[test]
fn loe_residual_scales() {
    let cfg = micro(2);
    let mut model = Model::<f64>::build(cfg.clone(), 1).unwrap();
    let x = image(&[1, 8, 8, 8], 1).map(|v| v - 0.5);
    model.weights.set("loe.0.beta", Tensor::zeros(&[1])).unwrap();
    model.weights.set("loe.0.gamma", Tensor::zeros(&[1])).unwrap();
    assert_eq!(loe_eval(&x, &cfg, &model.weights), x);

    let model = Model::<f64>::build(cfg.clone(), 2).unwrap();
    let got = loe_eval(&x, &cfg, &model.weights);
    assert_eq!(got.shape(), x.shape());

    // unscaled composition: x + conv(x + LSME(SGME(x)))
    let tape = Tape::no_grad();
    let bound = model.weights.bind(&tape, false);
    let s = bound.root().sub("loe.0.pairs.0");
    let mut ctx = Ctx::new(Mode::Infer, 0);
    let p = moe::sgme_forward(&tape.constant(x.clone()), &cfg.sgme, &s.sub("sgme"), &mut ctx).unwrap();
    let p = blocks::lsme_forward(&tape.constant(p.value().clone()), &cfg.lsme, 0, &s.sub("lsme")).unwrap();
    let y = x.add(p.value()).unwrap();
    let w = model.weights.get("loe.0.conv.weight").unwrap();
    let b = model.weights.get("loe.0.conv.bias").unwrap();
    let want = x.add(&conv2d(&y, w, Some(b), Padding::Same, 1).unwrap()).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-6);
}

#[test]
fn shape_law_and_padding() {
    let model = Model::<f64>::build(ModelConfig::preset("T-mini", 4).unwrap(), 3).unwrap();
    let lr = image(&[1, 3, 16, 16], 3);
    assert_eq!(model.forward(&lr, Mode::Infer, 0).unwrap().shape(), &[1, 3, 64, 64]);

    let model = Model::<f64>::build(micro(2), 3).unwrap();
    let lr = image(&[1, 3, 10, 13], 4);
    let sr = model.forward(&lr, Mode::Infer, 0).unwrap();
    assert_eq!(sr.shape(), &[1, 3, 20, 26]);
    // explicit reflect pad, forward, crop
    let (ph, pw) = model.config.padded_size(10, 13);
    assert_eq!((ph, pw), (16, 16));
    let pad = reflect_pad_map(lr.shape(), ph - 10, pw - 13).unwrap();
    let big = model.forward(&lr.gather(&pad.indices, &pad.shape), Mode::Infer, 0).unwrap();
    let crop = crop_map(big.shape(), 20, 26).unwrap();
    assert!(big.gather(&crop.indices, &crop.shape).max_abs_diff(&sr).unwrap() <= 1e-6);
}

#[test]
fn dead_network_emits_shuffled_head_bias() {
    let r = 2;
    let mut model = Model::<f64>::build(micro(r), 4).unwrap();
    let names: Vec<String> = model.weights.names().cloned().collect();
    for n in names.iter().filter(|n| !n.starts_with("shallow")) {
        let z = Tensor::zeros(model.weights.get(n).unwrap().shape());
        model.weights.set(n, z).unwrap();
    }
    let bias = Tensor::from_fn(&[12], |i| i as f64 * 0.25 - 1.0);
    model.weights.set("head.bias", bias.clone()).unwrap();
    let sr = model.forward(&image(&[1, 3, 8, 8], 5), Mode::Infer, 0).unwrap();
    for c in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(sr.at(&[0, c, y, x]), bias.data()[c * r * r + (y % r) * r + x % r]);
            }
        }
    }
}

#[test]
fn batch_independence_and_determinism() {
    let model = Model::<f64>::build(micro(2), 5).unwrap();
    let a = image(&[1, 3, 8, 8], 6);
    let b = image(&[1, 3, 8, 8], 7);
    let both = Tensor::concat(&[&a, &b], 0).unwrap();
    let ya = model.forward(&a, Mode::Infer, 0).unwrap();
    let yb = model.forward(&b, Mode::Infer, 0).unwrap();
    let yab = model.forward(&both, Mode::Infer, 0).unwrap();
    assert!(yab.narrow(0, 0, 1).unwrap().bit_eq(&ya));
    assert!(yab.narrow(0, 1, 1).unwrap().bit_eq(&yb));
    assert!(model.forward(&a, Mode::Infer, 9).unwrap().bit_eq(&ya));
}

#[test]
fn outputs_finite_across_seeds() {
    let lr = image(&[1, 3, 8, 8], 8);
    for seed in 0..10 {
        let model = Model::<f32>::build(micro(2), seed).unwrap();
        let lr32 = lr.cast::<f32>();
        assert!(model.forward(&lr32, Mode::Infer, 0).unwrap().is_finite());
        assert!(model.forward(&lr32, Mode::Train, seed).unwrap().is_finite());
    }
}

#[test]
fn self_ensemble() {
    let model = Model::<f64>::build(micro(2), 6).unwrap();
    let lr = image(&[1, 3, 8, 8], 9);
    let fwd = model.forward(&lr, Mode::Infer, 0).unwrap();
    assert!(model.self_ensemble_with(&lr, &[Dihedral::IDENTITY]).unwrap().bit_eq(&fwd));
    let rect = image(&[1, 3, 8, 16], 10);
    assert_eq!(model.self_ensemble(&rect).unwrap().shape(), &[1, 3, 16, 32]);

    // every transform of a constant image runs on the same input
    let flat = Tensor::full(&[1, 3, 8, 8], 0.3);
    let base = model.forward(&flat, Mode::Infer, 0).unwrap();
    for d in Dihedral::all() {
        let m = d.map(flat.shape()).unwrap();
        assert!(model.forward(&flat.gather(&m.indices, &m.shape), Mode::Infer, 0).unwrap().bit_eq(&base));
    }

    // when that output is itself symmetric, averaging leaves it unchanged
    let mut dead = model.clone();
    let names: Vec<String> = dead.weights.names().cloned().collect();
    for n in names.iter().filter(|n| !n.starts_with("shallow")) {
        let z = Tensor::zeros(dead.weights.get(n).unwrap().shape());
        dead.weights.set(n, z).unwrap();
    }
    dead.weights.set("head.bias", Tensor::from_fn(&[12], |i| (i / 4) as f64 * 0.5)).unwrap();
    let one = dead.forward(&flat, Mode::Infer, 0).unwrap();
    assert!(dead.self_ensemble(&flat).unwrap().max_abs_diff(&one).unwrap() <= 1e-6);
}

#[test]
fn from_parts_checks_layout() {
    let model = Model::<f64>::build(micro(2), 0).unwrap();
    assert!(Model::from_parts(micro(2), model.weights.clone()).is_ok());
    assert!(Model::from_parts(micro(3), model.weights.clone()).is_err());
    let mut extra = model.weights.clone();
    extra.insert("stray", Tensor::zeros(&[1])).unwrap();
    assert!(Model::from_parts(micro(2), extra).is_err());
}
