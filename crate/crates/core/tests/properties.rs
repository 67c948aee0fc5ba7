use candle_core::{DType, Device, Tensor};
use mtml_rsc::channel::power_normalize_tensor;
use mtml_rsc::config::FadingKind;
use mtml_rsc::loss::{loss_stage1, loss_stage3, scalar};
use mtml_rsc::{ResultRow, ResultsTable, Scheme};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_loss_dominates_reconstruction_loss(
        seed in 0u64..1000,
        lambda in 0.0f64..3.0,
        b in 1usize..4,
        classes in 2usize..10,
    ) {
        let dev = Device::Cpu;
        let s = Tensor::rand(0f64, 1.0, (b, 3, 4, 4), &dev).unwrap();
        let r = Tensor::rand(0f64, 1.0, (b, 3, 4, 4), &dev).unwrap();
        let logits = Tensor::randn(0f64, 3.0, (b, classes), &dev).unwrap();
        let labels: Vec<u32> = (0..b).map(|i| ((seed as usize + i) % classes) as u32).collect();
        let l1 = scalar(&loss_stage1(&s, &r).unwrap()).unwrap();
        let l3 = scalar(&loss_stage3(&s, &r, &logits, &labels, lambda).unwrap().total).unwrap();
        prop_assert!(l3 >= l1);
    }

    #[test]
    fn normalized_symbols_meet_the_power_budget(
        scale in 1e-3f64..1e3,
        power in 0.1f64..10.0,
        n in 1usize..20,
    ) {
        let x = (Tensor::randn(0f64, 1.0, (3, n, 8), &Device::Cpu).unwrap() * scale).unwrap();
        let y = power_normalize_tensor(&x, power).unwrap();
        let per = y.sqr().unwrap().sum((1, 2)).unwrap().to_vec1::<f64>().unwrap();
        for e in per {
            prop_assert!((e / (n * 4) as f64 / power - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn results_csv_round_trips(
        rows in proptest::collection::vec(
            (any::<bool>(), any::<bool>(), -10.0f64..30.0, 0.05f64..0.95, 0.0f64..60.0, 0.0f64..=1.0, 0u64..100),
            0..12,
        ),
    ) {
        let mut t = ResultsTable::default();
        for (m, ray, snr, d, psnr, acc, seed) in rows {
            t.push(ResultRow {
                scheme: if m { Scheme::MtmlRsc } else { Scheme::Baseline },
                fading: if ray { FadingKind::Rayleigh } else { FadingKind::Awgn },
                snr_db: snr,
                d_sr: d,
                psnr_db: psnr,
                saturated: false,
                accuracy: acc,
                seed,
                eval_size: 10,
            }).unwrap();
        }
        let text = t.to_csv(&[("note".into(), "x".into())]).unwrap();
        let back = ResultsTable::from_csv(&text).unwrap();
        prop_assert_eq!(back.rows, t.rows);
    }
}

#[test]
fn dtype_is_preserved_by_normalization() {
    let x = Tensor::ones((1, 2, 4), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(power_normalize_tensor(&x, 1.0).unwrap().dtype(), DType::F32);
}
