//! Extracted meshes against a brute-force inside/outside oracle. A cell centre
//! whose margin exceeds one cell diagonal is far from the surface and must
//! classify as inside by ray parity against the mesh closed off at the node
//! faces; the mirror case must classify as outside.

mod common;

use common::oracle::*;
use lodstream_core::model::{Limit, SubVolumeSpec};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[test]
fn deep_interior_and_exterior_classify_by_ray_parity() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut checked = (0, 0);
    for case in 0..24 {
        let side = rng.gen_range(6..=17);
        let fields = [Field::random(&mut rng), Field::random(&mut rng)];
        let mut limits = vec![random_limit(&mut rng, "a")];
        if rng.gen_bool(0.6) {
            limits.push(random_limit(&mut rng, "b"));
        }
        let spec = SubVolumeSpec::new(0, limits);
        let (open, closed) = closed_surface(&fields, &spec, side);
        assert!(
            directed_edges_balance(&closed),
            "case {case}: closed surface has a hole"
        );
        assert!(closed.triangle_count() >= open.triangle_count());
        let (i, o) = check_parity(&fields, &spec, side, &closed)
            .unwrap_or_else(|e| panic!("case {case}: {e}"));
        checked.0 += i;
        checked.1 += o;
    }
    assert!(
        checked.0 > 50 && checked.1 > 50,
        "too few decisive samples: {checked:?}"
    );
}

#[test]
fn open_surface_is_part_of_the_closed_one() {
    let mut rng = StdRng::seed_from_u64(7);
    let fields = [Field::random(&mut rng), Field::random(&mut rng)];
    let spec = SubVolumeSpec::new(0, vec![Limit::new("a", -0.4, 0.9)]);
    let (open, closed) = closed_surface(&fields, &spec, 12);
    let key = |t: &[[f32; 3]]| {
        let mut v: Vec<[u32; 3]> = t.iter().map(|p| p.map(f32::to_bits)).collect();
        v.sort_unstable();
        v
    };
    let all: std::collections::HashSet<_> = closed.positions.chunks_exact(3).map(key).collect();
    assert!(open.triangle_count() > 0);
    assert!(open
        .positions
        .chunks_exact(3)
        .all(|t| all.contains(&key(t))));
}
