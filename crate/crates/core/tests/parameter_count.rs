use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lungseg::unet::build_unet;
use lungseg::UNetConfig;

/// Layer-by-layer enumeration, independent of the crate's own formula.
fn enumerate(depth: usize, base: usize) -> usize {
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let f = |l: usize| base << l;
    let mut total = 0;
    let mut cin = 2;
    for l in 0..depth {
        total += conv(cin, f(l)) + conv(f(l), f(l));
        cin = f(l);
    }
    total += conv(f(depth - 1), f(depth)) + conv(f(depth), f(depth));
    for l in (0..depth).rev() {
        total += conv(f(l + 1), f(l)) + conv(2 * f(l), f(l)) + conv(f(l), f(l));
    }
    total + f(0) + 1
}

#[test]
fn known_configurations() {
    for (depth, base, want) in [(1, 2, 489), (4, 8, 540_145), (4, 16, 2_158_561), (4, 32, 8_630_209)] {
        assert_eq!(enumerate(depth, base), want);
        assert_eq!(UNetConfig::new(depth, base, 320).parameter_count(), want, "depth {depth} base {base}");
    }
}

#[test]
fn random_configurations_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let depth = rng.random_range(1..=4);
        let base = rng.random_range(1..=12);
        let cfg = UNetConfig::new(depth, base, 16 << depth);
        let model = build_unet(&cfg, 0).unwrap();
        let stored: usize = model.tensors.iter().map(|t| t.data.len()).sum();
        assert_eq!(cfg.parameter_count(), enumerate(depth, base), "{cfg:?}");
        assert_eq!(stored, enumerate(depth, base), "{cfg:?}");
    }
}
