mod common;

use lpdiagram::rectilinear::{check_pieces, rectilinearize, MonomialMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_cells_split_into_rectilinear_pieces() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..120 {
        let n = 1 + i % 3;
        let cell = common::random_cell(&mut rng, n);
        let pieces = rectilinearize(&cell, &MonomialMap::coordinates(n)).unwrap_or_else(|e| panic!("{cell}: {e}"));
        assert!(!pieces.is_empty(), "{cell}");
        for p in &pieces {
            assert!(p.target.is_l_rectilinear(p.l), "{cell}: target {}", p.target);
        }
        for x in [0.3141, 0.7182] {
            let chk = check_pieces(&cell, &pieces, &[x], 1000, i as u64);
            assert!(chk.coverage >= 0.999, "{cell} at x = {x}: {chk:?}");
            assert_eq!(chk.collisions, 0, "{cell} at x = {x}");
            assert!(chk.jacobian_rel_err <= 1e-6, "{cell} at x = {x}: {chk:?}");
            assert!(chk.max_flips <= 1, "{cell} at x = {x}: {chk:?}");
        }
    }
}
