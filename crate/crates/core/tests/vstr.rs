mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use texture_reformer::vstr::{
    extract_patches, fuse_semantics, global_patch_size, sgtw_match, sgtw_reassemble, standardize, vstr, vstr_with_matches,
};
use texture_reformer::{Error, FeatureMap, FusionKind, FusionMode, MatchMap, Scalar};

/// A random match fixture: source and target features plus patch geometry.
fn match_fixture<T: Scalar>(seed: u64) -> (FeatureMap<T>, FeatureMap<T>, usize) {
    let mut r = rng(seed);
    let p = r.gen_range(1..=3);
    let c = r.gen_range(1..=8);
    let dim = |r: &mut rand_chacha::ChaCha8Rng| r.gen_range(p..=8);
    let (sh, sw, th, tw) = (dim(&mut r), dim(&mut r), dim(&mut r), dim(&mut r));
    (random_map(&mut r, c, sh, sw), random_map(&mut r, c, th, tw), p)
}

fn check_argmax<T: Scalar>(seed: u64) -> Result<(), String> {
    let (source, target, p) = match_fixture::<T>(seed);
    let bank = extract_patches(&source, p, 1).unwrap();
    let got = sgtw_match(&bank, &target).unwrap();
    let (rows, cols, want) = cosine_argmax_oracle(&source, &target, p, 1);
    if got.grid() != (rows, cols) {
        return Err(format!("seed {seed}: grid {:?} vs {:?}", got.grid(), (rows, cols)));
    }
    match got.indices().iter().zip(&want).position(|(a, b)| a != b) {
        None => Ok(()),
        Some(j) => Err(format!("seed {seed}: position {j} picked {} but oracle picked {}", got.indices()[j], want[j])),
    }
}

#[test]
fn match_argmax_equals_brute_force_cosine_f64() {
    for seed in 0..150 {
        check_argmax::<f64>(seed).unwrap();
    }
}

#[test]
fn match_argmax_equals_brute_force_cosine_f32() {
    for seed in 0..150 {
        check_argmax::<f32>(seed).unwrap();
    }
}

#[test]
fn match_argmax_with_stride() {
    for seed in 0..40 {
        let (source, target, p) = match_fixture::<f64>(500 + seed);
        let s = p.max(2);
        if source.height() < p || target.height() < p {
            continue;
        }
        let got = sgtw_match(&extract_patches(&source, p, s).unwrap(), &target).unwrap();
        let (_, _, want) = cosine_argmax_oracle(&source, &target, p, s);
        assert_eq!(got.indices(), &want[..], "seed {seed}");
    }
}

#[test]
fn zero_norm_patches_never_win() {
    // Left half zero, right half a constant positive field: only nonzero
    // patches may be chosen, even for a zero target.
    let source = FeatureMap::<f32>::from_fn(2, 4, 4, |_, _, x| if x < 2 { 0.0 } else { 1.0 });
    let bank = extract_patches(&source, 1, 1).unwrap();
    let target = FeatureMap::from_fn(2, 3, 3, |c, y, _| if y == 0 { 0.0 } else { c as f32 - 0.5 });
    let m = sgtw_match(&bank, &target).unwrap();
    for &i in m.indices() {
        let (_, x) = bank.origin(i);
        assert!(x >= 2, "zero patch {i} selected");
    }
    let blank = extract_patches(&FeatureMap::<f32>::zeros(1, 3, 3), 2, 1).unwrap();
    let all_zero = sgtw_match(&blank, &FeatureMap::filled(1, 3, 3, 1.0)).unwrap();
    assert!(all_zero.indices().iter().all(|&i| i == 0));
}

#[test]
fn ties_break_to_lowest_index() {
    let source = FeatureMap::<f32>::filled(3, 4, 4, 2.0);
    let m = sgtw_match(&extract_patches(&source, 2, 1).unwrap(), &FeatureMap::filled(3, 5, 5, 1.0)).unwrap();
    assert!(m.indices().iter().all(|&i| i == 0));
}

#[test]
fn non_overlapping_reassembly_copies_source_patches_bit_exactly() {
    for seed in 0..50 {
        let mut r = rng(700 + seed);
        let p = r.gen_range(1..=3);
        let c = r.gen_range(1..=6);
        let (h, w) = (p * r.gen_range(1..=3), p * r.gen_range(1..=3));
        let source = random_map::<f32>(&mut r, c, h, w);
        let (rows, cols) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let bank = extract_patches(&source, p, p).unwrap();
        let n = bank.count();
        let matches = MatchMap::new(n, rows, cols, (0..rows * cols).map(|_| r.gen_range(0..n)).collect()).unwrap();
        let out = sgtw_reassemble(&bank, &matches).unwrap();
        assert_eq!(out.dims(), (c, rows * p, cols * p));
        for gr in 0..rows {
            for gc in 0..cols {
                let block = out.crop(gr * p, gc * p, p, p).unwrap();
                let (oy, ox) = bank.origin(matches.index(gr, gc));
                assert_eq!(block, source.crop(oy, ox, p, p).unwrap(), "seed {seed} block ({gr},{gc})");
            }
        }
    }
}

#[test]
fn overlapping_reassembly_stays_within_source_range() {
    for seed in 0..50 {
        let mut r = rng(800 + seed);
        let p = r.gen_range(1..=3);
        let (h, w) = (r.gen_range(p..=8), r.gen_range(p..=8));
        let source = random_map::<f32>(&mut r, 3, h, w);
        let bank = extract_patches(&source, p, 1).unwrap();
        let n = bank.count();
        let (rows, cols) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let matches = MatchMap::new(n, rows, cols, (0..rows * cols).map(|_| r.gen_range(0..n)).collect()).unwrap();
        let out = sgtw_reassemble(&bank, &matches).unwrap();
        let lo = source.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = source.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert!(out.data().iter().all(|&v| lo <= v && v <= hi), "seed {seed}");
    }
}

#[test]
fn self_transfer_is_identity() {
    for seed in 0..20 {
        let mut r = rng(900 + seed);
        let (c, h, w) = (r.gen_range(2..=8), r.gen_range(3..=8), r.gen_range(3..=8));
        let feature = random_map::<f32>(&mut r, c, h, w);
        let sem = random_map::<f32>(&mut r, 3, h, w);
        for (kind, sem) in [(FusionKind::Concat, sem.clone()), (FusionKind::Add, random_map(&mut r, c, h, w))] {
            for p in [1, 2, 3] {
                let out = vstr(&feature, &feature, &sem, &sem, p, 1, FusionMode::new(kind, 50.0)).unwrap();
                let diff = out.max_abs_diff(&feature).unwrap();
                assert!(diff <= 1e-5, "seed {seed} {kind:?} p={p}: {diff}");
            }
        }
    }
}

#[test]
fn global_patch_size_is_smallest_dim_minus_one() {
    let fm = |h, w| FeatureMap::<f32>::zeros(1, h, w);
    assert_eq!(global_patch_size(&fm(32, 32), &fm(32, 32)).unwrap(), 31);
    assert_eq!(global_patch_size(&fm(16, 20), &fm(12, 40)).unwrap(), 11);
    assert_eq!(global_patch_size(&fm(5, 9), &fm(7, 3)).unwrap(), 2);
    assert_eq!(global_patch_size(&fm(2, 2), &fm(2, 2)).unwrap(), 1);
    assert!(matches!(global_patch_size(&fm(1, 8), &fm(8, 8)), Err(Error::DegenerateFeature(_))));
}

#[test]
fn local_bank_size_at_relu4_1_for_512_input() {
    // 512x512 input -> relu4_1 is 64x64; p = 3 gives (64 - 3 + 1)^2 patches.
    let bank = extract_patches(&FeatureMap::<f32>::zeros(1, 64, 64), 3, 1).unwrap();
    assert_eq!(bank.count(), 3844);
}

#[test]
fn fusion_shapes() {
    let f = FeatureMap::<f32>::filled(4, 2, 2, 1.0);
    let concat = fuse_semantics(&f, &FeatureMap::filled(3, 2, 2, 0.5), FusionMode::new(FusionKind::Concat, 2.0)).unwrap();
    assert_eq!(concat.dims(), (7, 2, 2));
    assert_eq!(concat.at(5, 1, 1), 1.0);
    let add = fuse_semantics(&f, &FeatureMap::filled(4, 2, 2, 0.5), FusionMode::new(FusionKind::Add, 2.0)).unwrap();
    assert_eq!(add, FeatureMap::filled(4, 2, 2, 2.0));
    assert!(fuse_semantics(&f, &FeatureMap::filled(3, 2, 2, 0.5), FusionMode::new(FusionKind::Add, 1.0)).is_err());
}

#[test]
fn vanishing_omega_reduces_to_content_matching() {
    for seed in 0..20 {
        let mut r = rng(1100 + seed);
        let fs = random_map::<f64>(&mut r, 4, 6, 6);
        let ft = random_map::<f64>(&mut r, 4, 5, 5);
        let (ss, st) = (random_map::<f64>(&mut r, 3, 6, 6), random_map::<f64>(&mut r, 3, 5, 5));
        let mode = FusionMode::new(FusionKind::Concat, 0.0);
        let fused = vstr_with_matches(&fs, &ft, &ss, &st, 2, 1, mode).unwrap();
        let (_, _, want) = cosine_argmax_oracle(&standardize(&fs), &standardize(&ft), 2, 1);
        assert_eq!(fused.matches.indices(), &want[..], "seed {seed}");
    }
}

fn match_map_strategy() -> impl Strategy<Value = MatchMap> {
    (1usize..=12, 1usize..=5, 1usize..=5).prop_flat_map(|(n, r, c)| {
        proptest::collection::vec(0..n, r * c).prop_map(move |idx| MatchMap::new(n, r, c, idx).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn match_map_is_exactly_one_hot(m in match_map_strategy()) {
        let one_hot = m.to_one_hot::<f32>();
        let (rows, cols) = m.grid();
        for j in 0..rows * cols {
            let column: Vec<f32> = (0..m.n_patches()).map(|i| one_hot.data()[i * rows * cols + j]).collect();
            prop_assert_eq!(column.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert!(column.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        prop_assert_eq!(MatchMap::from_one_hot(&one_hot).unwrap(), m);
    }

    #[test]
    fn reassembly_is_bounded(seed in any::<u64>(), p in 1usize..=3) {
        let mut r = rng(seed);
        let source = random_map::<f32>(&mut r, 2, 6, 6);
        let bank = extract_patches(&source, p, 1).unwrap();
        let m = sgtw_match(&bank, &random_map(&mut r, 2, 7, 5)).unwrap();
        let out = sgtw_reassemble(&bank, &m).unwrap();
        let lo = source.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = source.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(out.dims(), (2, 7, 5));
        prop_assert!(out.data().iter().all(|&v| lo <= v && v <= hi));
    }

    #[test]
    fn matching_is_deterministic(seed in any::<u64>()) {
        let (source, target, p) = match_fixture::<f32>(seed);
        let bank = extract_patches(&source, p, 1).unwrap();
        prop_assert_eq!(sgtw_match(&bank, &target).unwrap(), sgtw_match(&bank, &target).unwrap());
    }
}
