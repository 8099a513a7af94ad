use proptest::prelude::*;

use protocaps::data::{malignancy_target, stratified_folds, synth_generate, AttributeSchema};
use protocaps::evaluation::{dice, malignancy_scalar, within1};
use protocaps::model::routing_trace;
use protocaps::numerics::ops::{softmax, squash};
use protocaps::numerics::Tensor;
use protocaps::prototypes::{decode_pgm, encode_pgm, PrototypeBank};
use protocaps::training::{assign_label_fraction, malignancy_kl_loss, total_loss, KL_CLAMP, Ablation, LossTerms, TrainConfig};

fn vec_in(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn dist5() -> impl Strategy<Value = Vec<f64>> {
    vec_in(5, -4.0, 4.0).prop_map(|l| softmax(&Tensor::vector(l), 0).unwrap().into_data())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn squash_shrinks_below_one_and_keeps_direction(v in vec_in(16, -10.0, 10.0)) {
        let t = Tensor::vector(v.clone());
        let s = squash(&t);
        let n = t.norm();
        prop_assume!(n > 1e-3);
        prop_assert!(s.norm() < 1.0);
        let cos = s.data().iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (s.norm() * n);
        prop_assert!((cos - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution(l in vec_in(5, -30.0, 30.0)) {
        let p = softmax(&Tensor::vector(l), 0).unwrap();
        prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn routing_couplings_sum_to_one(poses in vec_in(5 * 4, -1.0, 1.0), w in vec_in(3 * 5 * 6 * 4, -1.0, 1.0)) {
        let poses = Tensor::from_vec(&[5, 4], poses).unwrap();
        let w = Tensor::from_vec(&[3, 5, 6, 4], w).unwrap();
        let trace = routing_trace(&poses, &w, 3).unwrap();
        for c in &trace.couplings {
            for row in c.chunks(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(trace.final_output().chunks(6).all(|v| v.iter().map(|x| x * x).sum::<f64>() < 1.0));
    }

    #[test]
    fn within1_is_symmetric(a in 0.0f64..6.0, b in 0.0f64..6.0) {
        prop_assert_eq!(within1(a, b).unwrap(), within1(b, a).unwrap());
    }

    #[test]
    fn dice_is_bounded_and_reflexive(p in prop::collection::vec(0.0f32..1.0, 16), m in prop::collection::vec(0u8..2, 16)) {
        let p = Tensor::from_vec(&[1, 4, 4], p).unwrap();
        let m = Tensor::from_vec(&[1, 4, 4], m.into_iter().map(f32::from).collect()).unwrap();
        let d = dice(&p, &m).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn malignancy_target_is_a_mirrored_distribution(mean in 1.0f64..5.0, std in 0.0f64..2.0) {
        let t = malignancy_target(mean, std);
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mirrored = malignancy_target(6.0 - mean, std);
        for s in 0..5 {
            prop_assert!((t[s] - mirrored[4 - s]).abs() < 1e-12);
        }
    }

    #[test]
    fn malignancy_scalar_stays_on_the_scale(p in dist5()) {
        let s = malignancy_scalar(&p);
        prop_assert!((1.0..=5.0).contains(&s));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_target(p in dist5(), mean in 1.0f64..5.0, std in 0.0f64..2.0) {
        let t = malignancy_target(mean, std);
        prop_assert!(malignancy_kl_loss(&p, &t).unwrap() >= -1e-12);
        // target mass below the clamp is compared against the clamp, not itself
        prop_assert!(malignancy_kl_loss(&t, &t).unwrap().abs() < 1e2 * KL_CLAMP);
    }

    #[test]
    fn prototype_terms_gated_by_schedule_and_ablation(
        terms in vec_in(5, 0.0, 10.0),
        epoch in 0usize..300,
    ) {
        let t = LossTerms { malignancy: terms[0], reconstruction: terms[1], attribute: terms[2], cluster: terms[3], separation: terms[4] };
        let no_proto = LossTerms { cluster: 0.0, separation: 0.0, ..t };
        let base = terms[0] + 0.512 * terms[1] + terms[2];
        let learn = TrainConfig { ablation: Ablation::WoLearn, ..TrainConfig::default() };
        prop_assert_eq!(total_loss(&t, &learn.loss_weights(epoch)).unwrap(), total_loss(&no_proto, &learn.loss_weights(epoch)).unwrap());
        let full = TrainConfig::default();
        let v = total_loss(&t, &full.loss_weights(epoch)).unwrap();
        let expect = if epoch >= full.push_start_epoch { base + 0.125 * (terms[3] + 0.1 * terms[4]) } else { base };
        prop_assert!((v - expect).abs() < 1e-9);
    }

    #[test]
    fn prototype_losses_are_bounded(latent in vec_in(8 * 16, -0.3, 0.3), seed in 0u64..1000, pick in vec_in(8, 0.0, 1.0)) {
        let schema = AttributeSchema::lidc();
        let bank = PrototypeBank::<f64>::new(&schema, 16, 2.0, seed).unwrap();
        let classes: Vec<i32> = schema
            .iter()
            .zip(&pick)
            .map(|(a, u)| a.class_of(a.min_score as f64 + u * (a.max_score - a.min_score) as f64))
            .collect();
        let l = bank.losses(&latent, &classes).unwrap();
        prop_assert!(l.cluster >= 0.0);
        prop_assert!((0.0..=2.0).contains(&l.separation));
        // the cluster term uses the nearest same-class prototype
        let mut bound = 0.0;
        for (a, &c) in classes.iter().enumerate() {
            let v = &latent[a * 16..(a + 1) * 16];
            let any = bank.group(a, c).unwrap().start;
            bound += v.iter().zip(bank.vector(any)).map(|(x, p)| (x - p).powi(2)).sum::<f64>().sqrt() / 8.0;
        }
        prop_assert!(l.cluster <= bound + 1e-12);
    }

    #[test]
    fn pgm_round_trip_within_quantization(px in prop::collection::vec(0.0f32..=1.0, 32 * 32)) {
        let img = Tensor::from_vec(&[1, 32, 32], px).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        prop_assert!(img.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-7));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn label_fraction_count_and_reproducibility(n in 1usize..60, f in 0.0f64..=1.0, seed in 0u64..100) {
        let mut a = synth_generate(n, 0);
        let mut b = a.clone();
        let k = assign_label_fraction(&mut a, f, seed).unwrap();
        assign_label_fraction(&mut b, f, seed).unwrap();
        prop_assert_eq!(k, (f * n as f64).round() as usize);
        prop_assert_eq!(a.iter().filter(|s| s.has_attr_labels()).count(), k);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.labels.b == y.labels.b));
    }

    #[test]
    fn folds_partition_evenly(n in 10usize..80, k in 2usize..6, seed in 0u64..100) {
        let samples = synth_generate(n, seed);
        let folds = stratified_folds(&samples, k, seed).unwrap();
        let mut sizes = vec![0usize; k];
        for &f in &folds.fold_of {
            sizes[f] += 1;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for fold in 0..k {
            let split = folds.split(&samples, fold).unwrap();
            let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
