//! Analytic parameter and multiply-accumulate counts.
//!
//! MACs count multiply-accumulates of convolutions, linear maps and the
//! attention products only; softmax, activations, normalization and other
//! elementwise work are free.

use super::spec::{ConvType, VariantSpec, STAGES};
use super::weights::schema;
use crate::attention::WindowLayout;
use crate::error::{Error, Result};

/// A total with a labelled breakdown that sums to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Breakdown {
    pub total: u64,
    pub parts: Vec<(String, u64)>,
}

impl Breakdown {
    fn from_parts(parts: Vec<(String, u64)>) -> Self {
        Self {
            total: parts.iter().map(|(_, v)| v).sum(),
            parts,
        }
    }

    pub fn part(&self, label: &str) -> Option<u64> {
        self.parts.iter().find(|(l, _)| l == label).map(|&(_, v)| v)
    }
}

/// Part label of a parameter: its first dotted component.
fn part_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn accumulate(parts: &mut Vec<(String, u64)>, label: &str, n: u64) {
    match parts.iter_mut().find(|(l, _)| l == label) {
        Some((_, v)) => *v += n,
        None => parts.push((label.to_string(), n)),
    }
}

/// Exact number of scalars in the weight store of `spec`.
pub fn count_params(spec: &VariantSpec) -> u64 {
    param_breakdown(spec).total
}

pub fn param_breakdown(spec: &VariantSpec) -> Breakdown {
    let mut parts = Vec::new();
    for p in schema(spec) {
        accumulate(&mut parts, part_of(&p.name), p.len() as u64);
    }
    Breakdown::from_parts(parts)
}

pub fn conv_macs(k: usize, cin: usize, cout: usize, groups: usize, h: usize, w: usize) -> u64 {
    (k * k * cin * cout / groups) as u64 * (h * w) as u64
}

pub fn linear_macs(cin: usize, cout: usize, tokens: usize) -> u64 {
    (cin * cout) as u64 * tokens as u64
}

/// `QKᵀ` and `AV` over every window, padded windows included.
pub fn attention_core_macs(layout: &WindowLayout, channels: usize) -> u64 {
    let w2 = (layout.window * layout.window) as u64;
    layout.windows_per_sample() as u64 * 2 * w2 * w2 * channels as u64
}

pub fn count_macs(spec: &VariantSpec, height: usize, width: usize) -> Result<u64> {
    Ok(mac_breakdown(spec, height, width)?.total)
}

/// Per-part MACs of one forward pass on a single `height × width` image.
pub fn mac_breakdown(spec: &VariantSpec, height: usize, width: usize) -> Result<Breakdown> {
    spec.validate()?;
    if height == 0 || width == 0 || !height.is_multiple_of(4) || !width.is_multiple_of(4) {
        return Err(Error::shape(format!(
            "extents {height}x{width} must be positive multiples of 4"
        )));
    }
    let d = spec.dims;
    let extent = |stage: usize| match stage {
        0 | 4 => (height, width),
        1 | 3 => (height / 2, width / 2),
        _ => (height / 4, width / 4),
    };
    let mut parts = Vec::new();
    parts.push(("embed".to_string(), conv_macs(3, 3, d[0], 1, height, width)));
    for stage in 0..STAGES {
        let (h, w) = extent(stage);
        let hw = h * w;
        match stage {
            1 => parts.push(("down1".into(), conv_macs(3, d[0], d[1], 1, h, w))),
            2 => parts.push(("down2".into(), conv_macs(3, d[1], d[2], 1, h, w))),
            3 | 4 => {
                let (ph, pw) = extent(stage - 1);
                let (c_in, c_skip) = (d[stage - 1], d[4 - stage]);
                let c = d[stage];
                let r = c / spec.sk_reduction;
                let n = if stage == 3 { 1 } else { 2 };
                parts.push((format!("up{n}"), linear_macs(c_in, 4 * c, ph * pw)));
                parts.push((
                    format!("fusion{n}"),
                    linear_macs(c_skip, c, hw) + linear_macs(c, r, 1) + linear_macs(r, 2 * c, 1),
                ));
            }
            _ => {}
        }
        let c = d[stage];
        let mut total = 0u64;
        for block in 0..spec.depths[stage] {
            if spec.block_has_attention(stage, block) {
                let layout = WindowLayout::new(spec.window, spec.block_shift(block), spec.scheme, h, w)?;
                total += linear_macs(c, 3 * c, hw) + attention_core_macs(&layout, c);
            } else {
                total += linear_macs(c, c, hw);
            }
            total += match spec.conv {
                ConvType::DwConv => conv_macs(5, c, c, c, h, w),
                ConvType::ConvBlock => 2 * conv_macs(3, c, c, 1, h, w),
            };
            total += linear_macs(c, c, hw);
            total += 2 * linear_macs(c, c * spec.mlp_ratios[stage], hw);
        }
        parts.push((format!("stage{}", stage + 1), total));
    }
    parts.push(("head".into(), conv_macs(3, d[4], 4, 1, height, width)));
    Ok(Breakdown::from_parts(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::weights::WeightStore;

    #[test]
    fn formula_examples() {
        assert_eq!(conv_macs(3, 16, 16, 1, 8, 8), 147_456);
        assert_eq!(linear_macs(2, 3, 1) + 3, 9);
    }

    #[test]
    fn params_match_store() {
        for name in VariantSpec::NAMES {
            let spec = VariantSpec::named(name).unwrap();
            let store = WeightStore::init(&spec, 0).unwrap();
            assert_eq!(count_params(&spec), store.element_count() as u64, "{name}");
        }
    }

    #[test]
    fn breakdown_sums() {
        let spec = VariantSpec::named("S").unwrap();
        let b = mac_breakdown(&spec, 64, 96).unwrap();
        assert_eq!(b.total, b.parts.iter().map(|p| p.1).sum::<u64>());
        assert_eq!(b.part("head"), Some(conv_macs(3, 24, 4, 1, 64, 96)));
        let p = param_breakdown(&spec);
        assert_eq!(p.part("embed"), Some(3 * 3 * 3 * 24 + 24));
    }

    #[test]
    fn rejects_indivisible() {
        let spec = VariantSpec::named("T").unwrap();
        assert!(count_macs(&spec, 30, 32).is_err());
    }
}
