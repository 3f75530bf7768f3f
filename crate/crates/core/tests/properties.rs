//! Property tests over corruption, features, losses and the harness records.

use proptest::prelude::*;

use tta_core::audio::Waveform;
use tta_core::conmix::{nuclear_norm_loss, pseudo_label_loss_ce, pseudo_label_loss_nll};
use tta_core::corruption::{gaussian_shift, mix_noise, mix_noise_detailed, noise_scale, realized_snr_db, NoiseSource};
use tta_core::features::{roll, strong_augment, time_shift, weak_augment, AugmentConfig, ShiftClass, SpectrogramImage};
use tta_core::harness::run::{read_records, round2, write_records, ExperimentCell, MethodId, RunRecord, SeedFanout};
use tta_core::harness::{DatasetId, GridConfig};
use tta_core::models::cross_entropy_value;
use tta_core::nn::{Graph, Tensor};
use tta_core::seed::rng_from_seed;

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

/// Energy ratio in dB, written out independently of the library.
fn snr_oracle(clean: &[f64], noise: &[f64]) -> f64 {
    let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    10.0 * (e(clean) / e(noise)).log10()
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-3
}

proptest! {
    #[test]
    fn mixed_snr_is_exact(clean in signal(256), noise in signal(256), snr in -5.0f64..30.0) {
        prop_assume!(nonzero(&clean) && nonzero(&noise));
        let c = Waveform::new(clean.clone(), 8000).unwrap();
        let n = Waveform::new(noise.clone(), 8000).unwrap();
        let m = mix_noise_detailed(&c, &n, snr).unwrap();
        let added: Vec<f64> = m.waveform.samples().iter().zip(&clean).map(|(y, x)| y - x).collect();
        prop_assert!((snr_oracle(&clean, &added) - snr).abs() < 1e-6);
        prop_assert!((m.realized_snr_db - snr).abs() < 1e-6);
    }

    #[test]
    fn mixing_is_linear_in_the_clean_signal(a in signal(128), b in signal(128), noise in signal(128), k in 0.5f64..2.0) {
        prop_assume!(nonzero(&a) && nonzero(&noise));
        // Fix the noise gain from `a` and apply it to any clean input by hand.
        let ea: f64 = a.iter().map(|x| x * x).sum();
        let en: f64 = noise.iter().map(|x| x * x).sum();
        let s = noise_scale(ea, en, 10.0);
        let mix = |x: &[f64]| -> Vec<f64> { x.iter().zip(&noise).map(|(c, n)| c + s * n).collect() };
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| k * x + y).collect();
        let lhs = mix(&combo);
        let ma = mix(&a);
        let mb = mix(&b);
        for i in 0..128 {
            let rhs = k * ma[i] + mb[i] - k * s * noise[i];
            prop_assert!((lhs[i] - rhs).abs() < 1e-12);
        }
        let library = mix_noise(&Waveform::new(a.clone(), 8000).unwrap(), &Waveform::new(noise.clone(), 8000).unwrap(), 10.0).unwrap();
        for (x, y) in library.samples().iter().zip(&ma) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((realized_snr_db(&a, &noise, s) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn zero_lambda_gaussian_is_identity(x in signal(200), seed in any::<u64>()) {
        let w = Waveform::new(x, 8000).unwrap();
        prop_assert_eq!(gaussian_shift(&w, 0.0, &mut rng_from_seed(seed)).unwrap(), w);
    }

    #[test]
    fn time_shift_preserves_the_sample_multiset(x in signal(97), frac in 0.0f64..0.5) {
        let w = Waveform::new(x.clone(), 8000).unwrap();
        let mut original = x.clone();
        original.sort_by(f64::total_cmp);
        for cls in ShiftClass::ALL {
            let mut got = time_shift(&w, cls, frac).into_samples();
            got.sort_by(f64::total_cmp);
            prop_assert_eq!(&got, &original);
        }
    }

    #[test]
    fn roll_round_trips(x in prop::collection::vec(any::<i32>(), 1..50), k in -100isize..100) {
        prop_assert_eq!(roll(&roll(&x, k), -k), x);
    }

    #[test]
    fn augmentations_keep_shape_and_finiteness(v in signal(12 * 20), seed in any::<u64>()) {
        let s = SpectrogramImage::new(v, 12, 20).unwrap();
        let cfg = AugmentConfig::default();
        let mut rng = rng_from_seed(seed);
        for out in [weak_augment(&s, &cfg, &mut rng), strong_augment(&s, &cfg, &mut rng)] {
            prop_assert_eq!(out.shape(), (12, 20));
            prop_assert!(out.values().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn sharper_rows_never_raise_the_norm_loss(z in signal(12), row in 0usize..3, t in 1.0f64..5.0) {
        let base = Tensor::new(vec![3, 4], z.iter().map(|v| 3.0 * v).collect());
        let mut sharp = base.clone();
        for k in 0..4 {
            sharp.data_mut()[row * 4 + k] *= t;
        }
        let mut g = Graph::new();
        let a = g.input(base);
        let b = g.input(sharp);
        let la = nuclear_norm_loss(&mut g, a, true);
        let lb = nuclear_norm_loss(&mut g, b, true);
        prop_assert!(g.value(lb).item() <= g.value(la).item() + 1e-12);
    }

    #[test]
    fn pseudo_label_losses_agree_with_cross_entropy(
        z in signal(20),
        labels in prop::collection::vec(0usize..4, 5),
    ) {
        let logits = Tensor::new(vec![5, 4], z.iter().map(|v| 4.0 * v).collect());
        let oracle = cross_entropy_value(&logits, &labels).unwrap();
        let mut g = Graph::new();
        let v = g.input(logits);
        let ce = pseudo_label_loss_ce(&mut g, v, &labels).unwrap();
        let nll = pseudo_label_loss_nll(&mut g, v, &labels, &[1.0; 4]).unwrap();
        prop_assert!((g.value(ce).item() - oracle).abs() < 1e-6);
        prop_assert!((g.value(nll).item() - oracle / 4.0).abs() < 1e-6);
    }

    #[test]
    fn entropy_sum_is_bounded(z in signal(24)) {
        let mut g = Graph::new();
        let v = g.input(Tensor::new(vec![6, 4], z.iter().map(|x| 5.0 * x).collect()));
        let e = g.entropy_sum(v);
        let per = g.value(e).item() / 6.0;
        prop_assert!((-1e-12..=4f64.ln() + 1e-12).contains(&per));
    }

    #[test]
    fn run_records_round_trip(
        losses in prop::collection::vec(-1e3f64..1e3, 0..20),
        errors in prop::collection::vec(0.0f64..100.0, 1..10),
        seed in any::<u64>(),
        wall in 0.0f64..1e4,
    ) {
        let cell = ExperimentCell::new(MethodId::Conmix, DatasetId::Toy, 10, NoiseSource::RunningTap, 3.0, seed);
        let errors: Vec<f64> = errors.into_iter().map(round2).collect();
        let record = RunRecord {
            epoch_losses: losses.clone(),
            step_losses: losses.iter().map(|l| l * 0.5).collect(),
            epoch_pl_losses: losses,
            unadapted_error: errors[0],
            adapted_error: *errors.last().unwrap(),
            epoch_error_rates: errors,
            batch_size: 64,
            wall_clock_s: wall,
            config_hash: cell.config_hash(),
            provenance: "test".into(),
            seeds: SeedFanout { master: seed, corruption: cell.corruption().seed, adapter: cell.stda.seed },
            cell,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        write_records(&path, std::slice::from_ref(&record), false).unwrap();
        write_records(&path, std::slice::from_ref(&record), true).unwrap();
        prop_assert_eq!(read_records(&path).unwrap(), vec![record.clone(), record]);
    }

    #[test]
    fn grid_expands_to_the_product(
        methods in prop::sample::subsequence(MethodId::ALL.to_vec(), 1..=4),
        noises in prop::sample::subsequence(vec![NoiseSource::DoingDishes, NoiseSource::ExerciseBike, NoiseSource::RunningTap, NoiseSource::Gaussian], 1..=4),
        levels in 1usize..3,
        seeds in prop::collection::btree_set(0u64..100, 1..4),
    ) {
        let grid = GridConfig {
            snrs: (0..levels).map(|i| 3.0 + 7.0 * i as f64).collect(),
            gauss_levels: (0..levels).map(|i| 0.005 * (i + 1) as f64).collect(),
            seeds: seeds.into_iter().collect(),
            methods,
            noises,
            ..GridConfig::from_toml(r#"methods = ["tent"]
datasets = ["TOY"]
noises = ["eb"]
snrs = [3.0]
seeds = [0]"#).unwrap()
        };
        grid.validate().unwrap();
        let cells = grid.cells(|_| 10);
        let expected = grid.methods.len() * grid.datasets.len() * grid.noises.len() * grid.snrs.len() * grid.seeds.len();
        prop_assert_eq!(cells.len(), expected);
        let ids: std::collections::BTreeSet<String> = cells.iter().map(|c| c.id()).collect();
        prop_assert_eq!(ids.len(), expected);
    }
}
