use super::*;
use crate::error::Error;
use crate::metrics::ImageU8;
use crate::model::{Model, ModelConfig};
use crate::params::WeightTree;
use crate::{Rng, Tensor};

fn random_image(h: usize, w: usize, seed: u64) -> ImageU8 {
    let mut rng = Rng::new(seed);
    ImageU8::from_fn(h, w, |_, _, _| rng.below(256) as u8)
}

fn encode_raw(w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(data).unwrap();
    }
    out
}

#[test]
fn png_round_trip() {
    for (h, w, seed) in [(8, 8, 1), (1, 13, 2), (17, 5, 3)] {
        let img = random_image(h, w, seed);
        assert_eq!(png_decode(&png_encode(&img).unwrap()).unwrap(), img);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let img = random_image(8, 8, 4);
    png_write(&path, &img).unwrap();
    assert_eq!(png_read(&path).unwrap(), img);
    assert!(matches!(png_read(dir.path().join("missing.png")), Err(Error::Io(_))));
}

#[test]
fn grayscale_is_promoted() {
    let gray: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
    let img = png_decode(&encode_raw(4, 3, png::ColorType::Grayscale, png::BitDepth::Eight, &gray)).unwrap();
    assert_eq!((img.height, img.width), (3, 4));
    for y in 0..3 {
        for x in 0..4 {
            let v = gray[y * 4 + x];
            assert_eq!(img.pixel(y, x), [v, v, v]);
        }
    }
    // 1-bit grayscale expands to 0 / 255
    let img = png_decode(&encode_raw(8, 1, png::ColorType::Grayscale, png::BitDepth::One, &[0b1010_0000])).unwrap();
    assert_eq!(img.pixel(0, 0), [255; 3]);
    assert_eq!(img.pixel(0, 1), [0; 3]);
}

#[test]
fn unsupported_inputs() {
    let deep = encode_raw(2, 2, png::ColorType::Rgb, png::BitDepth::Sixteen, &[7u8; 24]);
    assert!(matches!(png_decode(&deep), Err(Error::Unsupported(_))));
    let alpha = encode_raw(2, 2, png::ColorType::Rgba, png::BitDepth::Eight, &[7u8; 16]);
    assert!(matches!(png_decode(&alpha), Err(Error::Unsupported(_))));
}

#[test]
fn malformed_png_reports_offsets() {
    let bytes = png_encode(&random_image(8, 8, 5)).unwrap();
    for cut in [0, 5, 8, 20, 40, bytes.len() - 1] {
        match png_decode(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut, "cut {cut} offset {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    // corrupt a byte inside the IHDR payload: caught by its chunk CRC at 29
    let mut bad = bytes.clone();
    bad[18] ^= 0x40;
    match png_decode(&bad) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 29),
        other => panic!("{other:?}"),
    }
}

fn tree(seed: u64) -> WeightTree<f64> {
    let mut rng = Rng::new(seed);
    let mut t = WeightTree::new();
    t.insert("b.weight", Tensor::from_fn(&[3, 5], |_| rng.normal())).unwrap();
    t.insert("a", Tensor::from_fn(&[7], |_| rng.normal())).unwrap();
    t.insert("c.bias", Tensor::from_fn(&[1, 1, 2], |_| rng.normal())).unwrap();
    t
}

fn payload_start(bytes: &[u8]) -> usize {
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    (10 + len).div_ceil(64) * 64
}

#[test]
fn weights_layout() {
    let t = tree(1);
    let bytes = encode_weights(&t, None).unwrap();
    assert_eq!(&bytes[..4], b"SPMM");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[10..10 + len]).unwrap();
    let entries: Vec<TensorEntry> = serde_json::from_value(manifest["tensors"].clone()).unwrap();
    let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, vec!["a", "b.weight", "c.bias"]);
    let start = payload_start(&bytes);
    assert_eq!(start % 64, 0);
    let mut end = 0;
    for e in &entries {
        assert_eq!(e.offset % 64, 0);
        assert!(e.offset >= end);
        end = e.offset + e.nbytes;
        assert_eq!(e.dtype, "f64");
    }
    // first value of `a`, raw little-endian
    let a0 = f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
    assert_eq!(a0.to_bits(), t.get("a").unwrap().data()[0].to_bits());
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(&bytes[start..bytes.len() - 4]));
    assert_eq!(bytes.len() - 4 - start, end as usize);
}

#[test]
fn weights_round_trip() {
    let empty = WeightTree::<f32>::new();
    let bytes = encode_weights(&empty, None).unwrap();
    assert_eq!(bytes.len(), payload_start(&bytes) + 4);
    assert!(decode_weights::<f32>(&bytes).unwrap().tree.is_empty());

    let t = tree(2);
    assert!(decode_weights::<f64>(&encode_weights(&t, None).unwrap()).unwrap().tree.bit_eq(&t));
    let narrow = t.cast::<f32>();
    assert!(decode_weights::<f32>(&encode_weights(&narrow, None).unwrap()).unwrap().tree.bit_eq(&narrow));
    // a 64-bit file read into a 32-bit build rounds each value
    let converted = decode_weights::<f32>(&encode_weights(&t, None).unwrap()).unwrap().tree;
    assert!(converted.bit_eq(&narrow));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.spmm");
    for dtype64 in [false, true] {
        let cfg = ModelConfig::preset("T", 4).unwrap();
        if dtype64 {
            let model = Model::<f64>::build(cfg.clone(), 3).unwrap();
            save_model(&model, &path).unwrap();
            let back = load_model::<f64>(&path).unwrap();
            assert!(back.weights.bit_eq(&model.weights));
            assert_eq!(back.config, cfg);
        } else {
            let model = Model::<f32>::build(cfg.clone(), 3).unwrap();
            save_weights(&model.weights, &path).unwrap();
            assert!(load_weights::<f32>(&path).unwrap().bit_eq(&model.weights));
            assert!(matches!(load_model::<f32>(&path), Err(Error::Config(_))));
        }
    }
}

#[test]
fn weights_corruption_is_detected() {
    let bytes = encode_weights(&tree(3), None).unwrap();
    let start = payload_start(&bytes);

    let mut flipped = bytes.clone();
    flipped[start + 3] ^= 1;
    assert!(matches!(decode_weights::<f64>(&flipped), Err(Error::Checksum { .. })));

    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(decode_weights::<f64>(&v2), Err(Error::Version { found: 2, expected: 1 })));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_weights::<f64>(&magic), Err(Error::Format { offset: 0, .. })));

    for cut in [0, 3, 9, 40, bytes.len() - 1] {
        assert!(decode_weights::<f64>(&bytes[..cut]).is_err(), "cut {cut}");
    }
    // extra bytes before the checksum
    let mut longer = bytes[..bytes.len() - 4].to_vec();
    longer.extend_from_slice(&[0u8; 8]);
    let crc = crc32fast::hash(&longer[start..]);
    longer.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(decode_weights::<f64>(&longer), Err(Error::Format { .. })));
}

#[test]
fn run_config_defaults_and_overrides() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.model_config().unwrap(), ModelConfig::preset("T", 4).unwrap());

    let text = r#"
        preset = "B"
        scale = 2
        seed = 9
        [model]
        channels = 24
        [model.sgme]
        k = 2
        [train]
        steps = 50
    "#;
    let cfg = RunConfig::from_toml(text).unwrap();
    let m = cfg.model_config().unwrap();
    assert_eq!((m.n_loe, m.channels, m.upscale, m.sgme.k), (4, 24, 2, 2));
    assert_eq!(m.sgme.scales, vec![1, 2, 4]);
    assert_eq!(cfg.train.steps, 50);
    assert_eq!(cfg.train.lr, TrainSettings::default().lr);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn run_config_is_strict() {
    for bad in [
        "sead = 1",
        "[train]\nstep = 3",
        "[model]\nchanels = 8",
        "[model.lsme]\nwindw = 4",
        "scale = \"four\"",
        "preset = \"XL\"",
        "scale = 2\n[model]\nupscale = 4",
        "[model]\nchannels = 0",
    ] {
        assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_) | Error::Invalid { .. })), "{bad}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "preset = \"T-mini\"\nscale = 2\n").unwrap();
    assert_eq!(RunConfig::load(&path).unwrap().model_config().unwrap().channels, 16);
}
