//! Reference per-pixel fragment resolve for translucent sub-volumes.
//!
//! Fragments of one sub-volume alternate between entry and exit along the ray.
//! Each entry/exit pair is a slab of constant density whose total opacity is
//! `alpha_fn(id, thickness)`; overlapping slabs (nested sub-volumes) add their
//! densities, and the ray integral is evaluated exactly between fragment depths.

use std::collections::HashMap;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub depth: f64,
    pub subvolume_id: u8,
    pub color: Rgb,
}

/// Default per-pixel capacity.
pub const DEFAULT_CAPACITY: usize = 16;

/// Bounded fragment list of one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentList {
    capacity: usize,
    fragments: Vec<Fragment>,
    overflowed: u64,
}

impl FragmentList {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            fragments: Vec::with_capacity(capacity),
            overflowed: 0,
        }
    }

    /// Adds a fragment. A full list drops whichever fragment is farthest,
    /// possibly the new one.
    pub fn insert(&mut self, f: Fragment) {
        if self.fragments.len() < self.capacity {
            self.fragments.push(f);
            return;
        }
        self.overflowed += 1;
        let farthest = self
            .fragments
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.depth.total_cmp(&b.1.depth))
            .map(|(i, _)| i);
        if let Some(i) = farthest {
            if self.fragments[i].depth > f.depth {
                self.fragments[i] = f;
            }
        }
    }

    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn overflowed(&self) -> u64 {
        self.overflowed
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }
}

/// A sub-volume interval along the ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub entry: f64,
    pub exit: f64,
    pub alpha: f64,
    pub color: Rgb,
}

/// Pairs fragments into segments: per sub-volume, the 1st, 3rd, ... fragment
/// enters and the next one exits. An entry without exit closes at `far`.
pub fn pair_segments(
    list: &FragmentList,
    alpha_fn: impl Fn(u8, f64) -> f64,
    far: f64,
) -> Vec<Segment> {
    let mut sorted = list.fragments.clone();
    sorted.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let mut open: HashMap<u8, Fragment> = HashMap::new();
    let mut segments = Vec::new();
    let mut close = |entry: Fragment, exit: f64| {
        let thickness = (exit - entry.depth).max(0.0);
        segments.push(Segment {
            entry: entry.depth,
            exit: entry.depth + thickness,
            alpha: alpha_fn(entry.subvolume_id, thickness).clamp(0.0, 1.0),
            color: entry.color,
        });
    };
    for f in sorted {
        match open.remove(&f.subvolume_id) {
            Some(entry) => close(entry, f.depth),
            None => {
                open.insert(f.subvolume_id, f);
            }
        }
    }
    let mut trailing: Vec<Fragment> = open.into_values().collect();
    trailing.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.subvolume_id.cmp(&b.subvolume_id))
    });
    for entry in trailing {
        close(entry, far.max(entry.depth));
    }
    segments
}

/// Composites the pixel's segments front to back over `background`.
pub fn resolve_fragments(
    list: &FragmentList,
    alpha_fn: impl Fn(u8, f64) -> f64,
    background: Rgb,
    far: f64,
) -> Rgb {
    composite_segments(&pair_segments(list, alpha_fn, far), background)
}

/// Exact emission-absorption integral of constant-density slabs. A slab's
/// optical depth is `-ln(1 - alpha)`; where slabs overlap, densities add and
/// colours mix in proportion to density. Zero-thickness slabs act as thin
/// layers with their own alpha.
pub fn composite_segments(segments: &[Segment], background: Rgb) -> Rgb {
    let mut events: Vec<f64> = segments.iter().flat_map(|s| [s.entry, s.exit]).collect();
    events.sort_by(f64::total_cmp);
    events.dedup();

    let mut out = [0.0; 3];
    let mut transmittance = 1.0;
    let blend = |out: &mut Rgb, t: &mut f64, alpha: f64, color: Rgb| {
        for c in 0..3 {
            out[c] += *t * alpha * color[c];
        }
        *t *= 1.0 - alpha;
    };

    for (k, &z) in events.iter().enumerate() {
        for s in segments.iter().filter(|s| s.entry == z && s.exit == z) {
            blend(&mut out, &mut transmittance, s.alpha, s.color);
        }
        let Some(&next) = events.get(k + 1) else {
            break;
        };
        let width = next - z;
        let active = segments
            .iter()
            .filter(|s| s.entry <= z && s.exit >= next && s.exit > s.entry);
        // Density weights: finite slabs by tau/thickness; opaque slabs dominate.
        let mut opaque: Vec<Rgb> = Vec::new();
        let mut sigma = 0.0;
        let mut weighted = [0.0; 3];
        for s in active {
            if s.alpha >= 1.0 {
                opaque.push(s.color);
                continue;
            }
            let density = -(1.0 - s.alpha).ln() / (s.exit - s.entry);
            sigma += density;
            for c in 0..3 {
                weighted[c] += density * s.color[c];
            }
        }
        if !opaque.is_empty() {
            let n = opaque.len() as f64;
            let mix = [0, 1, 2].map(|c| opaque.iter().map(|o| o[c]).sum::<f64>() / n);
            blend(&mut out, &mut transmittance, 1.0, mix);
            break;
        }
        if sigma > 0.0 {
            let alpha = 1.0 - (-sigma * width).exp();
            let mix = weighted.map(|w| w / sigma);
            blend(&mut out, &mut transmittance, alpha, mix);
        }
    }
    for c in 0..3 {
        out[c] += transmittance * background[c];
    }
    out
}
