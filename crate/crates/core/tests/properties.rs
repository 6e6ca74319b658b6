use ae_lab::dataset::resize_bilinear;
use ae_lab::eval::{compute_mos, RatingItem, RatingRecord};
use ae_lab::nn::{mse_loss, uniform_fan_in, AdamConfig, AdamState};
use ae_lab::tensor::{ConvGeometry, Tape, Tensor};
use chrono::{DateTime, Utc};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn values(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, len)
}

proptest! {
    #[test]
    fn relu_is_non_negative_and_sigmoid_is_open_unit(xs in prop::collection::vec(-60.0f32..60.0, 1..64)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new(&[xs.len()], xs.clone()).unwrap());
        let r = tape.relu(x);
        prop_assert!(tape.value(r).iter().all(|&v| v >= 0.0));
        let mut tape64 = Tape::<f64>::new();
        let x64 = tape64.leaf(&Tensor::new(&[xs.len()], xs.iter().map(|&v| v as f64 / 3.0).collect()).unwrap());
        let s = tape64.sigmoid(x64);
        prop_assert!(tape64.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mse_is_zero_exactly_when_equal((a, b) in (1usize..40).prop_flat_map(|n| (values(n), values(n)))) {
        let mut tape = Tape::<f32>::new();
        let pa = tape.leaf(&Tensor::new(&[a.len()], a.clone()).unwrap());
        let pb = tape.leaf(&Tensor::new(&[b.len()], b.clone()).unwrap());
        let diff = mse_loss(&mut tape, pa, pb).unwrap();
        let same = mse_loss(&mut tape, pa, pa).unwrap();
        prop_assert!(tape.value(diff)[0] >= 0.0);
        prop_assert_eq!(tape.value(same)[0], 0.0);
        prop_assert_eq!(tape.value(diff)[0] == 0.0, a == b);
    }

    #[test]
    fn adam_keeps_second_moment_non_negative(
        grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..8),
        lr in 1e-5f64..1e-1,
    ) {
        let mut p = vec![Tensor::<f64>::zeros(&[3]).with_requires_grad(true)];
        let mut adam = AdamState::new(AdamConfig { lr, ..Default::default() }, &p);
        for (k, g) in grads.iter().enumerate() {
            p[0].zero_grad();
            p[0].accumulate_grad(g).unwrap();
            adam.step(&mut p).unwrap();
            prop_assert_eq!(adam.steps(), k as u64 + 1);
            prop_assert!(adam.second_moment(0).iter().all(|&v| v >= 0.0));
            prop_assert!(p[0].data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn adam_with_zero_gradient_from_fresh_state_is_a_no_op(start in values(5)) {
        let mut p = vec![Tensor::new(&[5], start.clone()).unwrap().with_requires_grad(true)];
        p[0].accumulate_grad(&[0.0; 5]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p).unwrap();
        prop_assert_eq!(p[0].data(), &start[..]);
    }

    #[test]
    fn init_is_bounded_and_seed_deterministic(fan_in in 1usize..500, seed: u64) {
        let a = uniform_fan_in::<f32, _>(&[7, 3], fan_in, &mut Xoshiro256PlusPlus::seed_from_u64(seed));
        let b = uniform_fan_in::<f32, _>(&[7, 3], fan_in, &mut Xoshiro256PlusPlus::seed_from_u64(seed));
        prop_assert_eq!(a.data(), b.data());
        let bound = (1.0 / fan_in as f64).sqrt() as f32;
        prop_assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn conv_shapes_follow_the_output_formula(
        c in 1usize..3, h in 1usize..9, w in 1usize..9, k in 1usize..5, s in 1usize..4, p in 0usize..3,
    ) {
        let geo = ConvGeometry::new(c, h, w, 2, k, k, s, p);
        let expect = |n: usize| (n + 2 * p >= k).then(|| (n + 2 * p - k) / s + 1);
        match (expect(h), expect(w)) {
            (Some(oh), Some(ow)) => {
                let geo = geo.unwrap();
                prop_assert_eq!((geo.out_h(), geo.out_w()), (oh, ow));
                let mut tape = Tape::<f32>::new();
                let x = tape.leaf(&Tensor::zeros(&[1, c, h, w]));
                let wt = tape.leaf(&Tensor::zeros(&[2, c, k, k]));
                let b = tape.leaf(&Tensor::zeros(&[2]));
                let y = tape.conv2d(x, wt, b, s, p).unwrap();
                prop_assert_eq!(tape.shape(y), &[1, 2, oh, ow][..]);

                let t = tape.leaf(&Tensor::zeros(&[1, 2, oh, ow]));
                let tw = tape.leaf(&Tensor::zeros(&[2, c, k, k]));
                let tb = tape.leaf(&Tensor::zeros(&[c]));
                if let Ok(back) = tape.conv_transpose2d(t, tw, tb, s, p) {
                    let shape = tape.shape(back);
                    prop_assert_eq!(shape[2], (oh - 1) * s + k - 2 * p);
                    prop_assert_eq!(shape[3], (ow - 1) * s + k - 2 * p);
                }
            }
            _ => prop_assert!(geo.is_err()),
        }
    }

    #[test]
    fn conv_transpose_is_the_adjoint_of_conv(
        h in 2usize..7, k in 1usize..4, s in 1usize..3, p in 0usize..2, seed: u64,
    ) {
        prop_assume!(h + 2 * p >= k && p < k);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut rnd = |shape: &[usize]| {
            use rand::Rng;
            Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
        };
        let x = rnd(&[1, 2, h, h]);
        let w = rnd(&[3, 2, k, k]);
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let b3 = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.conv2d(xv, wv, b3, s, p).unwrap();
        let y_shape = tape.shape(y).to_vec();
        let probe = rnd(&y_shape);
        let lhs: f64 = tape.value(y).iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let pv = tape.leaf(&probe);
        let b2 = tape.leaf(&Tensor::zeros(&[2]));
        let back = tape.conv_transpose2d(pv, wv, b2, s, p).unwrap();
        let bs = tape.shape(back).to_vec();
        prop_assume!(bs[2] == h);
        let rhs: f64 = tape.value(back).iter().zip(x.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn resize_keeps_constant_fields_and_unit_range(
        v in 0.0f32..=1.0, h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20,
        noise in prop::collection::vec(0.0f32..=1.0, 3 * 11 * 11),
    ) {
        let flat = vec![v; 3 * h * w];
        prop_assert!(resize_bilinear(&flat, 3, h, w, oh, ow).iter().all(|&x| x == v));
        let src = &noise[..3 * h * w];
        prop_assert!(resize_bilinear(src, 3, h, w, oh, ow).iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn mos_is_invariant_to_record_order(
        ratings in prop::collection::vec((0usize..3, 1u8..=5), 1..60),
        seed: u64,
    ) {
        let items: Vec<RatingItem> = (0..3)
            .map(|m| RatingItem {
                item_id: format!("i{m}"),
                image_id: String::new(),
                original_id: String::new(),
                model: format!("m{}", m % 2),
                class: String::new(),
            })
            .collect();
        let mut records: Vec<RatingRecord> = ratings
            .iter()
            .map(|&(i, r)| RatingRecord {
                session_id: "s".into(),
                rater_id: "r".into(),
                item_id: format!("i{i}"),
                rating: r,
                timestamp: DateTime::<Utc>::UNIX_EPOCH,
            })
            .collect();
        let before = compute_mos(&records, &items);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        records.shuffle(&mut rng);
        prop_assert_eq!(compute_mos(&records, &items), before.clone());
        let count: u64 = before.models.values().map(|m| m.count).sum();
        prop_assert_eq!(count as usize, ratings.len());
    }
}
