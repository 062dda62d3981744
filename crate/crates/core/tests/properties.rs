use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use evokernel::dsl::{FormKind, KernelExpr, Node, WarpKind};
use evokernel::selection::{crps_gaussian, loo_predictives, select_best, Candidate};
use evokernel::validation::{check_psd, check_shape_agnostic};

fn warp_kind() -> impl Strategy<Value = WarpKind> {
    prop_oneof![
        Just(WarpKind::Ard),
        Just(WarpKind::CenterScale),
        Just(WarpKind::Tanh),
        (1u8..=4).prop_map(|depth| WarpKind::ArctanLayers { depth }),
        Just(WarpKind::KumaraswamyRadial),
        Just(WarpKind::Stereographic),
        Just(WarpKind::UnitDirection),
    ]
}

fn form_kind() -> impl Strategy<Value = FormKind> {
    prop_oneof![
        Just(FormKind::Rbf),
        Just(FormKind::Matern52),
        Just(FormKind::Matern32),
        Just(FormKind::Rq),
        Just(FormKind::Imq),
        Just(FormKind::Linear),
        (1u8..=3).prop_map(|degree| FormKind::Poly { degree }),
        Just(FormKind::Cos1d),
        Just(FormKind::Periodic),
    ]
}

fn leaf_kernel() -> impl Strategy<Value = Node> {
    prop_oneof![
        9 => (form_kind(), prop::collection::vec(warp_kind(), 0..=3)).prop_map(|(f, warps)| {
            let mut feat = Node::Input;
            for w in warps {
                feat = Node::warp(w, feat);
            }
            Node::form(f, feat)
        }),
        1 => Just(Node::constant()),
    ]
}

fn kernel_tree() -> impl Strategy<Value = KernelExpr> {
    leaf_kernel()
        .prop_recursive(3, 24, 3, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 2..=3).prop_map(Node::Sum),
                prop::collection::vec(inner.clone(), 2..=3).prop_map(Node::Product),
                inner.prop_map(Node::scale),
            ]
        })
        .prop_filter_map("outside the grammar limits", |n| KernelExpr::new(n).ok())
}

fn spd(n: usize, entries: &[f64], ridge: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |i, j| entries[(i * n + j) % entries.len()]);
    &b * b.transpose() + DMatrix::identity(n, n) * ridge
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn expressible_kernels_pass_the_validator(e in kernel_tree(), seed in 0u64..1000) {
        let v = check_shape_agnostic(&e);
        prop_assert!(v.passed, "{}: {}", e.render(), v.detail);
        let v = check_psd(&e, 1, 1, seed);
        prop_assert!(v.passed, "{}: {}", e.render(), v.detail);
    }
}

proptest! {
    #[test]
    fn crps_is_nonnegative_and_shift_invariant(
        mu in -50.0f64..50.0,
        sigma in 1e-3f64..20.0,
        y in -50.0f64..50.0,
        shift in -10.0f64..10.0,
    ) {
        let c = crps_gaussian(mu, sigma, y).unwrap();
        prop_assert!(c >= 0.0);
        let s = crps_gaussian(mu + shift, sigma, y + shift).unwrap();
        prop_assert!((c - s).abs() <= 1e-9 * (1.0 + c));
        // E|X - y| - E|X - X'| / 2 with Jensen on the first term
        prop_assert!(c + sigma / std::f64::consts::PI.sqrt() >= (y - mu).abs() - 1e-9);
    }

    #[test]
    fn loo_predictives_follow_permutations(
        n in 3usize..9,
        entries in prop::collection::vec(-1.0f64..1.0, 81),
        ys in prop::collection::vec(-2.0f64..2.0, 9),
        ridge in 0.1f64..1.0,
        rot in 1usize..8,
    ) {
        let k = spd(n, &entries, ridge);
        let y = DVector::from_fn(n, |i, _| ys[i]);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let kp = DMatrix::from_fn(n, n, |i, j| k[(perm[i], perm[j])]);
        let yp = DVector::from_fn(n, |i, _| y[perm[i]]);
        let (m, v) = loo_predictives(&k, &y).unwrap();
        let (mp, vp) = loo_predictives(&kp, &yp).unwrap();
        for i in 0..n {
            prop_assert!((mp[i] - m[perm[i]]).abs() <= 1e-9 * (1.0 + m[perm[i]].abs()));
            prop_assert!((vp[i] - v[perm[i]]).abs() <= 1e-9 * (1.0 + v[perm[i]]));
        }
    }

    #[test]
    fn selection_ignores_candidate_order(
        scores in prop::collection::vec(prop::option::of(0u8..4), 1..8),
        rot in 0usize..8,
    ) {
        let digests: Vec<String> = (0..scores.len()).map(|i| format!("d{}", (i * 7) % 5)).collect();
        let cands: Vec<Candidate> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| Candidate { digest: &digests[i], insertion: i as u64, score: s.map(f64::from) })
            .collect();
        let best = &cands[select_best(&cands).unwrap()];
        let r = rot % cands.len();
        let rotated: Vec<Candidate> = cands[r..].iter().chain(&cands[..r]).cloned().collect();
        let again = &rotated[select_best(&rotated).unwrap()];
        prop_assert_eq!(best, again);
    }
}
