use super::*;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

fn quick() -> Timing {
    Timing {
        trials: 1,
        warmups: 0,
        threads: 1,
    }
}

#[test]
fn recurrent_flops_double_with_length() {
    for (c, d) in [(1, 1), (16, 16), (36, 8)] {
        for k in [1usize, 7, 256, 4096] {
            assert_eq!(scan_flops(2 * k, c, d).total(), 2 * scan_flops(k, c, d).total());
        }
    }
    // padding to a power of two makes the parallel count step up at 2^k + 1
    assert_eq!(parallel_scan_flops(1, 1, 1), scan_flops(1, 1, 1).total());
    assert!(parallel_scan_flops(5, 2, 2) - parallel_scan_flops(4, 2, 2) > parallel_scan_flops(6, 2, 2) - parallel_scan_flops(5, 2, 2));
}

#[test]
fn scan_report_layout() {
    let cfg = ScanBench {
        lengths: vec![8, 16, 32],
        d_state: 4,
        channels: 3,
        timing: quick(),
        seed: 1,
    };
    let r = bench_scan::<f64>(&cfg).unwrap();
    assert_eq!(r.rows.len(), 6);
    let rec: Vec<&BenchRow> = r.with_label("recurrent").collect();
    assert_eq!(rec.iter().map(|r| r.length).collect::<Vec<_>>(), vec![8, 16, 32]);
    assert_eq!(rec.iter().map(|r| r.ratio).collect::<Vec<_>>(), vec![1.0, 2.0, 4.0]);
    assert!(r.rows.iter().all(|r| r.time_ns_median > 0 && r.bytes > 0));

    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.next().unwrap().split(',').count(), 5);
    assert_eq!(csv.lines().count(), 7);

    let single = ScanBench {
        lengths: vec![64],
        ..cfg.clone()
    };
    let r = bench_scan::<f32>(&single).unwrap();
    assert_eq!(r.with_label("recurrent").count(), 1);
    assert_eq!(r.with_label("parallel").count(), 1);

    assert!(bench_scan::<f32>(&ScanBench { lengths: vec![], ..cfg.clone() }).is_err());
    assert!(bench_scan::<f32>(&ScanBench { lengths: vec![4, 0], ..cfg }).is_err());
}

#[test]
fn median_and_timing_edges() {
    assert_eq!(median(vec![5, 1, 3]), 3);
    assert_eq!(median(vec![4, 1, 3, 2]), 2);
    let mut calls = 0;
    let t = time_median(&Timing::default(), || {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert!(t >= 1);
    assert_eq!(calls, 12);
    let zero = Timing {
        trials: 0,
        ..Timing::default()
    };
    assert!(time_median(&zero, || Ok(())).is_err());
}

#[test]
fn loglog_fit_recovers_power_laws() {
    let xs = [256.0, 1024.0, 4096.0, 16384.0];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
    let (slope, r2) = loglog_fit(&xs, &ys).unwrap();
    assert!((slope - 1.5).abs() <= 1e-12);
    assert!((r2 - 1.0).abs() <= 1e-12);
    let noisy = [1.0, 9.0, 2.0, 7.0];
    let (_, r2) = loglog_fit(&xs, &noisy).unwrap();
    assert!(r2 < 0.98);
    assert!(loglog_fit(&[1.0], &[1.0]).is_err());
    assert!(loglog_fit(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    assert!(loglog_fit(&[2.0, 2.0], &[1.0, 3.0]).is_err());
}

#[test]
fn spssm_ratio_reference_points() {
    let mut cfg = SpSsmBench::new(64, 64, 1, 64);
    cfg.channels = 4;
    cfg.timing = quick();
    let r = bench_spssm::<f32>(&cfg).unwrap();
    let sp = r.with_label("superpixel").next().unwrap();
    assert_eq!(sp.ratio, 64.0);
    assert_eq!(sp.length, 64);
    assert_eq!(r.with_label("dense").next().unwrap().length, 4096);
    assert_eq!(r.rows.len(), 3);

    let mut cfg = SpSsmBench::new(16, 16, 2, 64);
    cfg.channels = 4;
    cfg.timing = quick();
    assert_eq!(bench_spssm::<f32>(&cfg).unwrap().rows[0].ratio, 1.0);
    cfg.block.superpixels = 9;
    assert!(bench_spssm::<f32>(&cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn ratio_column_is_closed_form(gh in 1usize..5, gw in 1usize..5, ch in 1usize..4, cw in 1usize..4, s in 1usize..3) {
        let (h, w) = (gh * ch * s, gw * cw * s);
        let m = gh * gw;
        let mut cfg = SpSsmBench::new(h, w, s, m);
        cfg.channels = 2;
        cfg.timing = quick();
        let r = bench_spssm::<f32>(&cfg).unwrap();
        prop_assert_eq!(r.rows[0].ratio, ((h * w / (s * s)) as f64) / m as f64);
        prop_assert!(r.rows.iter().all(|row| row.time_ns_median > 0));
    }
}
