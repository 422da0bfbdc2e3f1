use motalk::data::{
    build_vocabulary, generate_cyclic, generate_dataset, key_frames, read_jsonl, template_words, words, write_jsonl,
    CyclicParams, DatasetParams, QueryFamily,
};
use motalk::encoders::{EstimatorTraining, MotionEstimator, MotionSequence, VideoFeatureSequence};
use motalk::Matrix;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Argmax of the continuous signal per period, searched over integer frames
/// with float evaluation; near-ties go to the earlier frame.
fn peak_oracle(cycles: usize, frames: usize) -> Vec<usize> {
    let sig = |t: usize| (2.0 * std::f64::consts::PI * cycles as f64 * t as f64 / frames as f64).sin();
    (0..cycles)
        .map(|c| {
            let lo = c * frames / cycles;
            let hi = ((c + 1) * frames).div_ceil(cycles).min(frames);
            let mut best = lo;
            for t in lo..hi {
                if sig(t) > sig(best) + 1e-12 {
                    best = t;
                }
            }
            best
        })
        .collect()
}

/// Peaks of a 3-tap moving average with topographic prominence ≥ `min`.
fn count_peaks(x: &[f64], min: f64) -> usize {
    let n = x.len();
    let s: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            x[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    let mut count = 0;
    for i in 0..n {
        let left_ok = i == 0 || s[i] > s[i - 1];
        let right_ok = i == n - 1 || s[i] >= s[i + 1];
        if !(left_ok && right_ok) {
            continue;
        }
        let base = |range: &mut dyn Iterator<Item = usize>| {
            let mut lowest = s[i];
            for j in range {
                if s[j] > s[i] {
                    break;
                }
                lowest = lowest.min(s[j]);
            }
            lowest
        };
        let left = base(&mut (0..i).rev());
        let right = base(&mut (i + 1..n));
        if s[i] - left.max(right) >= min {
            count += 1;
        }
    }
    count
}

#[test]
fn key_frames_match_dense_argmax() {
    assert_eq!(key_frames(3, 60), vec![5, 25, 45]);
    for cycles in 1..6 {
        for frames in (2 * cycles)..80 {
            // Skip exact half-frame peaks, where float rounding decides.
            if (0..cycles).any(|n| frames * (1 + 4 * n) % (4 * cycles) == 2 * cycles) {
                continue;
            }
            assert_eq!(
                key_frames(cycles, frames),
                peak_oracle(cycles, frames),
                "f={cycles} T={frames}"
            );
        }
    }
}

#[test]
fn noisy_channel_keeps_its_repetition_count() {
    for seed in 0..10 {
        for cycles in 1..=4 {
            let s = generate_cyclic(&CyclicParams {
                seed,
                cycles,
                frames: 60,
                d_motion: 3,
                noise: 0.05,
                family: None,
                class: None,
            })
            .unwrap();
            let ch0: Vec<f64> = (0..60).map(|t| s.motion.values.get(t, 0)).collect();
            assert_eq!(count_peaks(&ch0, 0.5), cycles, "seed {seed} f {cycles}");
            assert_eq!(s.labels.rep_count, cycles);
        }
    }
}

#[test]
fn template_words_cover_every_generated_token() {
    let params = DatasetParams {
        samples: 200,
        cycles_max: 6,
        ..Default::default()
    };
    let data = generate_dataset(&params).unwrap();
    let known = template_words(params.frames, params.cycles_max);
    let vocab = build_vocabulary(&data);
    for token in &vocab.tokens()[4..] {
        assert!(known.contains(token), "{token} missing from template words");
    }
    for s in &data {
        for w in words(&s.query).chain(words(&s.answer)) {
            assert!(known.contains(&w));
        }
    }
}

#[test]
fn datasets_are_deterministic_and_rotate_families() {
    let p = DatasetParams {
        samples: 8,
        ..Default::default()
    };
    let a = generate_dataset(&p).unwrap();
    assert_eq!(a, generate_dataset(&p).unwrap());
    let counting: Vec<_> = a.iter().filter(|s| s.answer.ends_with("repetitions")).collect();
    assert_eq!(counting.len(), 2);
    for s in counting {
        assert_eq!(s.answer, format!("{} repetitions", s.labels.rep_count));
    }
    let other = generate_dataset(&DatasetParams { seed: 1, ..p.clone() }).unwrap();
    assert_ne!(a[0].motion, other[0].motion);
    let only = generate_dataset(&DatasetParams {
        families: vec![QueryFamily::Sequence],
        ..p
    })
    .unwrap();
    for s in only {
        let frames: Vec<String> = s.labels.key_frames.iter().map(|f| f.to_string()).collect();
        assert_eq!(s.answer, format!("frames {}", frames.join(" ")));
    }
}

fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().svd(true, true).solve(y, 1e-12).unwrap()
}

#[test]
fn estimator_matches_least_squares_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (dv, dm) = (4, 3);
    let w = Matrix::random_normal(dv, dm, 1.0, &mut rng);
    let b = Matrix::random_normal(1, dm, 1.0, &mut rng);
    let mut pairs = Vec::new();
    for _ in 0..3 {
        let v = Matrix::random_normal(12, dv, 1.0, &mut rng);
        let noise = Matrix::random_normal(12, dm, 0.1, &mut rng);
        let m = v.matmul(&w).unwrap().add_row(&b).unwrap().add(&noise).unwrap();
        pairs.push((
            VideoFeatureSequence { values: v },
            MotionSequence::new(m, 20.0).unwrap(),
        ));
    }
    let (est, mse) = MotionEstimator::train(&pairs, EstimatorTraining::default()).unwrap();

    let rows: usize = pairs.iter().map(|p| p.0.frames()).sum();
    let mut x = DMatrix::zeros(rows, dv + 1);
    let mut y = DMatrix::zeros(rows, dm);
    let mut r = 0;
    for (v, m) in &pairs {
        for t in 0..v.frames() {
            for c in 0..dv {
                x[(r, c)] = v.values.get(t, c);
            }
            x[(r, dv)] = 1.0;
            for c in 0..dm {
                y[(r, c)] = m.values.get(t, c);
            }
            r += 1;
        }
    }
    let sol = least_squares(&x, &y);
    for c in 0..dm {
        for i in 0..dv {
            assert!((est.weight.get(i, c) - sol[(i, c)]).abs() < 1e-6);
        }
        assert!((est.bias.get(0, c) - sol[(dv, c)]).abs() < 1e-6);
    }
    let resid = &x * &sol - &y;
    let expected_mse = resid.norm_squared() / (rows * dm) as f64;
    assert!((mse - expected_mse).abs() < 1e-9);
}

#[test]
fn untrained_estimator_refuses() {
    let v = VideoFeatureSequence {
        values: Matrix::zeros(3, 2),
    };
    assert!(matches!(
        MotionEstimator::untrained(2, 2).estimate(&v),
        Err(motalk::Error::State(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jsonl_round_trip_is_byte_stable(seed in 0u64..1000, n in 0usize..6, video in any::<bool>()) {
        let data = generate_dataset(&DatasetParams {
            seed,
            samples: n,
            frames: 12,
            d_video: if video { 4 } else { 0 },
            ..Default::default()
        })
        .unwrap();
        let mut first = Vec::new();
        write_jsonl(&mut first, &data).unwrap();
        let back = read_jsonl(first.as_slice()).unwrap();
        prop_assert_eq!(&back, &data);
        let mut second = Vec::new();
        write_jsonl(&mut second, &back).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn key_frames_are_one_per_period(cycles in 1usize..8, extra in 0usize..60) {
        let frames = 2 * cycles + extra;
        let k = key_frames(cycles, frames);
        prop_assert_eq!(k.len(), cycles);
        for (n, &f) in k.iter().enumerate() {
            prop_assert!(f < frames);
            let peak = frames as f64 * (1.0 + 4.0 * n as f64) / (4.0 * cycles as f64);
            prop_assert!((f as f64 - peak).abs() <= 0.5);
        }
    }
}
