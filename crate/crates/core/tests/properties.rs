use cardiac_ssl::anatomask::{apply_hard_mask, View, ViewCategoryTable, MASKED_LOGIT, SEG_CLASSES};
use cardiac_ssl::augment::cutmix_with;
use cardiac_ssl::boundref::iou;
use cardiac_ssl::checkpoint::Checkpoint;
use cardiac_ssl::metrics::{dice, nsd, nsd_brute};
use cardiac_ssl::phantom::{generate_phantom, PhantomConfig};
use cardiac_ssl::pseudolabel::{bundle_from_logits, ViewSource};
use cardiac_ssl::semanchor::{build_prototypes, filter_pseudo, FilterMode};
use cardiac_ssl::{Mask, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

const SIDE: usize = 10;

fn mask() -> impl Strategy<Value = Mask> {
    prop::collection::vec(0u8..4, SIDE * SIDE).prop_map(|d| Mask::new(SIDE, SIDE, d).unwrap())
}

fn view() -> impl Strategy<Value = View> {
    (0usize..4).prop_map(|i| View::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_and_dice_are_symmetric(a in mask(), b in mask(), c in 1u8..4) {
        prop_assert_eq!(iou(&a, &b, c).unwrap(), iou(&b, &a, c).unwrap());
        prop_assert_eq!(dice(&a, &b, c).unwrap(), dice(&b, &a, c).unwrap());
        let (d, i) = (dice(&a, &b, c).unwrap(), iou(&a, &b, c).unwrap());
        // dice = 2 iou / (1 + iou)
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
    }

    #[test]
    fn self_overlap_is_perfect(a in mask(), c in 1u8..4) {
        prop_assert_eq!(dice(&a, &a, c).unwrap(), 1.0);
        prop_assert_eq!(iou(&a, &a, c).unwrap(), 1.0);
        prop_assert_eq!(nsd(&a, &a, c, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn nsd_fast_path_matches_brute_force(a in mask(), b in mask(), c in 1u8..4, tol in 0.0f64..4.0) {
        prop_assert_eq!(nsd(&a, &b, c, tol).unwrap().to_bits(), nsd_brute(&a, &b, c, tol).unwrap().to_bits());
    }

    #[test]
    fn confident_count_never_grows_with_tau(
        seg in prop::collection::vec(-6.0f32..6.0, SEG_CLASSES * 6 * 5),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
        v in view(),
    ) {
        let table = ViewCategoryTable::default();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let view_logits = [0.0f32; 4];
        let chd = [0.0f32; 7];
        for source in [ViewSource::Off, ViewSource::Given(v)] {
            let a = bundle_from_logits(&seg, 6, 5, &view_logits, &chd, lo, source, &table).unwrap();
            let b = bundle_from_logits(&seg, 6, 5, &view_logits, &chd, hi, source, &table).unwrap();
            prop_assert!(b.confident() <= a.confident());
            prop_assert_eq!(a.hard_mask.clone(), b.hard_mask.clone());
        }
    }

    #[test]
    fn higher_theta_never_turns_reject_into_accept(
        emb in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 14),
        query in prop::collection::vec(-1.0f32..1.0, 6),
        class in 0usize..7,
        t1 in -1.0f64..1.0,
        t2 in -1.0f64..1.0,
    ) {
        prop_assume!(query.iter().any(|&v| v != 0.0));
        prop_assume!(emb.iter().all(|e| e.iter().any(|&v| v != 0.0)));
        let labels: Vec<usize> = (0..emb.len()).map(|i| i % 7).collect();
        let bank = build_prototypes(&emb, &labels, 7).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        for mode in [FilterMode::Dual, FilterMode::ThresholdOnly] {
            let a = filter_pseudo(&query, class, &bank, lo, mode).unwrap().verdict.accepted();
            let b = filter_pseudo(&query, class, &bank, hi, mode).unwrap().verdict.accepted();
            prop_assert!(a || !b);
        }
    }

    #[test]
    fn hard_mask_is_idempotent_and_exact(
        logits in prop::collection::vec(-5.0f32..5.0, SEG_CLASSES * 4 * 3),
        v in view(),
    ) {
        let table = ViewCategoryTable::default();
        let mut once = logits.clone();
        apply_hard_mask(&mut once, v, &table).unwrap();
        let mut twice = once.clone();
        apply_hard_mask(&mut twice, v, &table).unwrap();
        prop_assert_eq!(&once, &twice);
        let hw = 12;
        for c in 0..SEG_CLASSES {
            let plane = &once[c * hw..(c + 1) * hw];
            if table.allows(v, c) {
                prop_assert_eq!(plane, &logits[c * hw..(c + 1) * hw]);
            } else {
                prop_assert!(plane.iter().all(|&x| x == MASKED_LOGIT));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(
            (
                "[a-z./_0-9]{1,24}",
                prop::collection::vec(1usize..5, 1..4)
                    .prop_flat_map(|dims| {
                        let n: usize = dims.iter().product();
                        (Just(dims), prop::collection::vec(any::<u32>(), n))
                    }),
            ),
            0..5,
        )
    ) {
        let mut c = Checkpoint::new();
        for (name, (dims, bits)) in &tensors {
            // arbitrary finite bit patterns: an all-ones exponent loses its top bit
            let data = bits
                .iter()
                .map(|&b| f32::from_bits(if (b >> 23) & 0xff == 0xff { b & !(1 << 30) } else { b }))
                .collect();
            c.push(name.clone(), Tensor::new(dims, data).unwrap());
        }
        let bytes = c.encode().unwrap();
        let d = Checkpoint::decode(std::path::Path::new("p"), &bytes).unwrap();
        prop_assert_eq!(d.tensors.len(), c.tensors.len());
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&d.tensors) {
            prop_assert_eq!(n1, n2);
            prop_assert!(t1.bits_eq(t2));
        }
    }

    #[test]
    fn cutmix_pixels_come_from_either_parent(seed in 0u64..1000, lambda in 0.0f64..1.0) {
        let cfg = PhantomConfig::clean(32);
        let a = generate_phantom(seed, View::FourChamber, 0, &cfg).unwrap();
        let b = generate_phantom(seed + 1, View::Rvot, 3, &cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = cutmix_with(&a, &b, lambda, &mut rng).unwrap();
        let mut from_a = 0usize;
        for (i, &c) in m.sample.mask.data().iter().enumerate() {
            let (ca, cb) = (a.mask.data()[i], b.mask.data()[i]);
            prop_assert!(c == ca || c == cb);
            let pa = a.image.data()[i];
            let pb = b.image.data()[i];
            let pm = m.sample.image.data()[i];
            prop_assert!(pm == pa || pm == pb);
            from_a += usize::from(!m.cut.contains(i % 32, i / 32));
        }
        prop_assert!((from_a as f64 / 1024.0 - m.lambda).abs() < 1e-12);
    }
}
