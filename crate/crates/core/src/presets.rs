//! Static architectures embedded in the L=16 routing space.
//!
//! Placements are readings of published diagrams, reproduced as connection
//! patterns rather than the original networks.

use crate::error::{Error, Result};
use crate::space::{ArchMask, NodeId, PathKind, RoutingSpace, DEFAULT_BASE_CHANNELS};

pub const PRESET_LAYERS: usize = 16;

pub const PRESET_NAMES: [&str; 9] =
    ["fcn32s", "unet", "deeplabv3", "hrnetv2", "autodeeplab", "common_a", "common_b", "common_c", "full"];

/// Mask for a named architecture. Masks carry `layers = 16` but no channel
/// width, so they apply at any base width.
pub fn preset_mask(name: &str) -> Result<ArchMask> {
    let mut m = match name {
        "fcn32s" => chain(&ramp(&[6, 3, 3, 4])),
        "unet" => unet_like(&[1, 2, 1, 9, 1, 1, 1], &[1]),
        "deeplabv3" => {
            let mut m = chain(&ramp(&[3, 4, 9]));
            m.open(NodeId::new(11, 2), PathKind::Down);
            for l in 12..15 {
                m.open(NodeId::new(l, 3), PathKind::Keep);
            }
            m.open(NodeId::new(15, 3), PathKind::Up);
            m
        }
        "hrnetv2" => parallel(&[1, 9, 10, 11]),
        "autodeeplab" => chain(&[0, 1, 1, 2, 2, 3, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2]),
        "common_a" => unet_like(&[1, 1, 2, 4, 4, 3, 1], &[2]),
        "common_b" => unet_like(&[1, 1, 2, 5, 4, 1, 2], &[1]),
        "common_c" => unet_like(&[1, 1, 2, 6, 2, 1, 3], &[0]),
        "full" => {
            let space = RoutingSpace::new(PRESET_LAYERS, DEFAULT_BASE_CHANNELS)?;
            ArchMask::full(&space)
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    m.name = Some(name.to_string());
    m.layers = Some(PRESET_LAYERS);
    m.base_channels = None;
    Ok(m)
}

/// `counts[s]` consecutive layers at scale `s`.
fn ramp(counts: &[usize]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(s, &k)| std::iter::repeat_n(s, k)).collect()
}

/// Single path visiting `seq[i]` at layer `i + 1`, ending with a keep.
fn chain(seq: &[usize]) -> ArchMask {
    let mut m = ArchMask::new();
    for (i, &s) in seq.iter().enumerate() {
        let kind = match seq.get(i + 1) {
            None => PathKind::Keep,
            Some(&t) if t == s => PathKind::Keep,
            Some(&t) if t > s => PathKind::Down,
            Some(_) => PathKind::Up,
        };
        m.open(NodeId::new(i + 1, s), kind);
    }
    m
}

/// Encoder-decoder chain with layer counts `[a, b, c, d, c2, b2, a2]` for
/// scales 0,1,2,3,2,1,0, plus keep chains bridging each scale in `skips`
/// from its last encoder node to its first decoder node.
fn unet_like(counts: &[usize; 7], skips: &[usize]) -> ArchMask {
    let [a, b, c, d, c2, b2, a2] = *counts;
    let seq: Vec<usize> = [(0, a), (1, b), (2, c), (3, d), (2, c2), (1, b2), (0, a2)]
        .into_iter()
        .flat_map(|(s, k)| std::iter::repeat_n(s, k))
        .collect();
    let mut m = chain(&seq);
    let ends = [a, a + b, a + b + c];
    let starts = [a + b + c + d + c2 + b2 + 1, a + b + c + d + c2 + 1, a + b + c + d + 1];
    for &s in skips {
        for l in ends[s]..starts[s] {
            m.open(NodeId::new(l, s), PathKind::Keep);
        }
    }
    m
}

/// Parallel branches: scale `s` enters at layer `start[s]` and then keeps to
/// the end; each branch spawns the next one with a down path.
fn parallel(start: &[usize; 4]) -> ArchMask {
    let mut m = ArchMask::new();
    for l in 1..=PRESET_LAYERS {
        for s in 0..4 {
            if l < start[s] {
                continue;
            }
            m.open(NodeId::new(l, s), PathKind::Keep);
            if s < 3 && l + 1 == start[s + 1] {
                m.open(NodeId::new(l, s), PathKind::Down);
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{param_count, static_cost_report, Convention};
    use crate::space::validate_mask;
    use crate::tensor::Shape;

    fn space() -> RoutingSpace {
        RoutingSpace::new(PRESET_LAYERS, DEFAULT_BASE_CHANNELS).unwrap()
    }

    /// Scale visited at each layer by a single-path mask.
    fn chain_scales(m: &ArchMask) -> Vec<usize> {
        let mut out = vec![0];
        let mut s = 0;
        for l in 1..PRESET_LAYERS {
            let v = m.get(NodeId::new(l, s));
            assert_eq!(v.iter().filter(|&&x| x > 0.0).count(), 1, "layer {l}");
            let kind = PathKind::ALL.into_iter().find(|k| v[k.index()] > 0.0).unwrap();
            s = kind.target_scale(s).unwrap();
            out.push(s);
        }
        out
    }

    #[test]
    fn all_presets_are_valid() {
        let sp = space();
        for name in PRESET_NAMES {
            let m = preset_mask(name).unwrap();
            let check = validate_mask(&sp, &m);
            assert!(check.is_ok(), "{name}: {:?}", check.violations);
            let reach = crate::space::reachable(&sp, &m);
            assert!(m.active_nodes().all(|n| reach.contains(&n)), "{name}");
            assert_eq!(m.name.as_deref(), Some(name));
            assert_eq!(ArchMask::parse(&m.to_text()).unwrap(), m);
        }
        assert!(matches!(preset_mask("resnet"), Err(Error::Argument(_))));
    }

    #[test]
    fn fcn_is_a_single_chain_ending_at_coarsest_scale() {
        let m = preset_mask("fcn32s").unwrap();
        assert_eq!(m.support().len(), PRESET_LAYERS);
        assert!(m.values.values().all(|v| v.iter().filter(|&&x| x > 0.0).count() == 1));
        let seq = chain_scales(&m);
        assert!(seq.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*seq.last().unwrap(), 3);
    }

    #[test]
    fn autodeeplab_is_a_single_chain() {
        let m = preset_mask("autodeeplab").unwrap();
        assert_eq!(m.support().len(), PRESET_LAYERS);
        assert_eq!(chain_scales(&m), vec![0, 1, 1, 2, 2, 3, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn unet_scales_go_down_then_up() {
        for name in ["unet", "common_a", "common_b", "common_c"] {
            let m = preset_mask(name).unwrap();
            // The main path is the unique route through the last layer's node.
            let mut seq = Vec::new();
            let mut node = m.active_nodes().find(|n| n.layer == PRESET_LAYERS).unwrap();
            seq.push(node.scale);
            while node.layer > 1 {
                let prev = RoutingSpace::new(PRESET_LAYERS, 8).unwrap().predecessors(node);
                let mut from: Vec<NodeId> =
                    prev.iter().filter(|(src, k)| m.is_open(*src, *k)).map(|(src, _)| *src).collect();
                // At a skip junction prefer the main path, which changes scale.
                from.sort_by_key(|src| src.scale == node.scale);
                node = from[0];
                seq.push(node.scale);
            }
            seq.reverse();
            let peak = seq.iter().position(|&s| s == 3).unwrap();
            assert!(seq[..=peak].windows(2).all(|w| w[1] >= w[0]), "{name}: {seq:?}");
            assert!(seq[peak..].windows(2).all(|w| w[1] <= w[0]), "{name}: {seq:?}");
            assert_eq!(seq[0], 0);
        }
    }

    #[test]
    fn hrnet_keeps_all_scales_at_the_end() {
        let m = preset_mask("hrnetv2").unwrap();
        for s in 0..4 {
            assert!(m.is_open(NodeId::new(PRESET_LAYERS, s), PathKind::Keep));
        }
    }

    #[test]
    fn full_mask_equals_space() {
        let sp = space();
        let m = preset_mask("full").unwrap();
        assert!(validate_mask(&sp, &m).is_ok());
        let legal: usize = sp.nodes().iter().map(|&n| sp.legal_paths(n).iter().filter(|&&b| b).count()).sum();
        assert_eq!(m.support().len(), legal);
    }

    #[test]
    fn preset_costs_at_reference_resolution() {
        // Totals from an independent enumeration script, K = 19, 3x1024x2048.
        let sp = space();
        let input = Shape::new(1, 3, 1024, 2048);
        let want = [
            ("autodeeplab", 24_452_792_320u64, 2_637_120u64),
            ("fcn32s", 24_844_959_744, 2_965_952),
            ("deeplabv3", 29_232_201_728, 3_924_032),
            ("unet", 37_866_176_512, 6_032_064),
            ("hrnetv2", 49_931_091_968, 4_857_792),
        ];
        for (name, macs, params) in want {
            let r = static_cost_report(&sp, &preset_mask(name).unwrap(), input, 19, Convention::Macs, false).unwrap();
            assert_eq!(r.total, crate::cost::OpCost::new(macs, params), "{name}");
        }
        let full = static_cost_report(&sp, &preset_mask("full").unwrap(), input, 19, Convention::Macs, false).unwrap();
        assert_eq!(full.total.params, param_count(&sp, false, 19).unwrap());
    }
}
