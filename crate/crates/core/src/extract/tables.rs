//! Marching-cubes case table.
//!
//! Corner `i` of a cell sits at `CORNERS[i]` (offsets in x, y, z); case bit `i`
//! is set when corner `i` is inside (margin > 0). The 256 triangulations are
//! derived from one face rule: on a face whose inside corners are diagonal, each
//! inside corner is cut off on its own. Both cells sharing a face see the same
//! four corner signs and so draw the same contour on it, which keeps the
//! surface closed across cells for every case and its complement.

use std::sync::LazyLock;

pub const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Cell edges as corner pairs, lower-coordinate corner first.
pub const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Faces as cyclic corner loops with their outward normal.
const FACES: [([usize; 4], [i32; 3]); 6] = [
    ([0, 1, 2, 3], [0, 0, -1]),
    ([4, 5, 6, 7], [0, 0, 1]),
    ([0, 1, 5, 4], [0, -1, 0]),
    ([3, 2, 6, 7], [0, 1, 0]),
    ([0, 3, 7, 4], [-1, 0, 0]),
    ([1, 2, 6, 5], [1, 0, 0]),
];

/// Triangles per case as edge-index triples, wound so that the right-hand
/// normal points from the inside to the outside.
pub static TRIANGLES: LazyLock<Vec<Vec<[u8; 3]>>> =
    LazyLock::new(|| (0..256).map(|case| triangulate_case(case as u8)).collect());

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

fn corner_pos(c: usize) -> [f64; 3] {
    CORNERS[c].map(|v| v as f64)
}

fn edge_mid(e: usize) -> [f64; 3] {
    let [a, b] = EDGES[e];
    let (pa, pb) = (corner_pos(a), corner_pos(b));
    [0, 1, 2].map(|i| 0.5 * (pa[i] + pb[i]))
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Contour segments on the cell faces, each oriented so that the inside lies to
/// its left when the face is viewed from outside the cell.
fn face_segments(case: u8) -> Vec<(usize, usize)> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut segments = Vec::new();
    for (corners, normal) in FACES {
        let normal = normal.map(|v| v as f64);
        let crossing: Vec<usize> = (0..4)
            .filter(|&k| inside(corners[k]) != inside(corners[(k + 1) % 4]))
            .collect();
        // (edge a, edge b, an inside corner on the segment's inner side)
        let mut raw: Vec<(usize, usize, usize)> = Vec::new();
        match crossing.len() {
            0 => {}
            2 => {
                let e = |k: usize| edge_between(corners[k], corners[(k + 1) % 4]);
                let reference = *corners
                    .iter()
                    .find(|&&c| inside(c))
                    .expect("an inside corner");
                raw.push((e(crossing[0]), e(crossing[1]), reference));
            }
            4 => {
                for k in 0..4 {
                    let c = corners[k];
                    if inside(c) {
                        let prev = edge_between(corners[(k + 3) % 4], c);
                        let next = edge_between(c, corners[(k + 1) % 4]);
                        raw.push((prev, next, c));
                    }
                }
            }
            n => unreachable!("a square has an even number of sign changes, got {n}"),
        }
        for (ea, eb, reference) in raw {
            let (a, b) = (edge_mid(ea), edge_mid(eb));
            let side = dot(cross(sub(b, a), sub(corner_pos(reference), a)), normal);
            if side > 0.0 {
                segments.push((ea, eb));
            } else {
                segments.push((eb, ea));
            }
        }
    }
    segments
}

fn triangulate_case(case: u8) -> Vec<[u8; 3]> {
    let mut segments = face_segments(case);
    let mut triangles = Vec::new();
    while let Some((start, mut next)) = segments.pop() {
        let mut polygon = vec![start];
        while next != start {
            polygon.push(next);
            let i = segments
                .iter()
                .position(|&(a, _)| a == next)
                .expect("face contours close into loops");
            next = segments.swap_remove(i).1;
        }
        // The loop runs counter-clockwise around the inside seen from outside the
        // cell; reversing the fan makes the normals face away from the inside.
        for k in 1..polygon.len() - 1 {
            triangles.push([polygon[0] as u8, polygon[k + 1] as u8, polygon[k] as u8]);
        }
    }
    triangles
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn trivial_cases_are_empty() {
        assert!(TRIANGLES[0].is_empty());
        assert!(TRIANGLES[255].is_empty());
    }

    #[test]
    fn single_corner_gives_one_triangle_facing_away() {
        for c in 0..8 {
            let tris = &TRIANGLES[1 << c];
            assert_eq!(tris.len(), 1, "corner {c}");
            let [a, b, d] = tris[0].map(|e| edge_mid(e as usize));
            let n = cross(sub(b, a), sub(d, a));
            let to_corner = sub(corner_pos(c), a);
            assert!(dot(n, to_corner) < 0.0, "corner {c} normal points inward");
        }
    }

    #[test]
    fn every_case_uses_exactly_its_crossing_edges() {
        for case in 0..=255u8 {
            let inside = |c: usize| case & (1 << c) != 0;
            let expected: Vec<usize> = (0..12)
                .filter(|&e| inside(EDGES[e][0]) != inside(EDGES[e][1]))
                .collect();
            let mut used: Vec<usize> = TRIANGLES[case as usize]
                .iter()
                .flatten()
                .map(|&e| e as usize)
                .collect();
            used.sort_unstable();
            used.dedup();
            assert_eq!(used, expected, "case {case:#04x}");
        }
    }

    #[test]
    fn surface_pieces_close_up_with_the_cell_faces() {
        // Each interior triangle edge is shared by two triangles with opposite
        // directions; edges left over are contour segments lying on the faces.
        for case in 0..=255u8 {
            let mut directed: HashMap<(u8, u8), i32> = HashMap::new();
            for t in &TRIANGLES[case as usize] {
                for k in 0..3 {
                    let (a, b) = (t[k], t[(k + 1) % 3]);
                    *directed.entry((a, b)).or_default() += 1;
                    *directed.entry((b, a)).or_default() -= 1;
                }
            }
            let mut boundary: Vec<(usize, usize)> = directed
                .into_iter()
                .filter(|&(_, n)| n > 0)
                .map(|((a, b), _)| (a as usize, b as usize))
                .collect();
            boundary.sort_unstable();
            // Boundary of the fan surface (traversed opposite to the face loops).
            let mut segs: Vec<(usize, usize)> = face_segments(case)
                .into_iter()
                .map(|(a, b)| (b, a))
                .collect();
            segs.sort_unstable();
            assert_eq!(boundary, segs, "case {case:#04x}");
        }
    }

    #[test]
    fn face_contour_depends_only_on_face_corners() {
        for case in 0..=255u8 {
            for (corners, _) in FACES {
                let mask: u8 = corners.iter().map(|&c| 1u8 << c).fold(0, |a, b| a | b);
                let on_face = |s: &[(usize, usize)]| {
                    let mut v: Vec<(usize, usize)> = s
                        .iter()
                        .filter(|(a, b)| {
                            let face_edge =
                                |e: usize| EDGES[e].iter().all(|c| mask & (1 << c) != 0);
                            face_edge(*a) && face_edge(*b)
                        })
                        .copied()
                        .collect();
                    v.sort_unstable();
                    v
                };
                let other = (case & mask) | (!case & !mask);
                assert_eq!(
                    on_face(&face_segments(case)),
                    on_face(&face_segments(other))
                );
            }
        }
    }
}
