//! PPM renders of workspace layers.

use semnav_core::irl::{Cell, CostMap};
use semnav_core::raster::{pnm, LabelPalette, SemanticRaster};

/// Route cells are drawn in this colour; palettes may not use it.
pub const HIGHLIGHT: [u8; 3] = [255, 0, 255];

pub fn semantic_rgb(semantic: &SemanticRaster, palette: &LabelPalette) -> Vec<u8> {
    semantic
        .data()
        .iter()
        .flat_map(|&c| palette.color(c).unwrap_or([0, 0, 0]))
        .collect()
}

pub fn render_semantic(semantic: &SemanticRaster, palette: &LabelPalette) -> Vec<u8> {
    pnm::encode(semantic.width(), semantic.height(), 3, &semantic_rgb(semantic, palette))
}

/// Linear gray ramp: the cheapest finite cell is black, the most expensive
/// white. Forbidden cells are white too.
pub fn render_cost(costs: &CostMap) -> Vec<u8> {
    let finite = costs.costs().iter().copied().filter(|c| c.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c), hi.max(c)));
    let span = hi - lo;
    let samples: Vec<u8> = costs
        .costs()
        .iter()
        .flat_map(|&c| {
            let v = if !c.is_finite() {
                255
            } else if span > 0.0 {
                (255.0 * (c - lo) / span).round() as u8
            } else {
                0
            };
            [v, v, v]
        })
        .collect();
    pnm::encode(costs.width(), costs.height(), 3, &samples)
}

pub fn render_route(semantic: &SemanticRaster, palette: &LabelPalette, path: &[Cell]) -> Vec<u8> {
    let mut rgb = semantic_rgb(semantic, palette);
    for &(r, c) in path {
        let i = 3 * (r * semantic.width() + c);
        rgb[i..i + 3].copy_from_slice(&HIGHLIGHT);
    }
    pnm::encode(semantic.width(), semantic.height(), 3, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_ramp_endpoints() {
        let costs = CostMap::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = render_cost(&costs);
        let img = pnm::decode(&bytes).unwrap();
        assert_eq!(img.samples, vec![0, 0, 0, 128, 128, 128, 255, 255, 255]);
    }

    #[test]
    fn route_cells_highlighted() {
        let sem = SemanticRaster::filled(2, 2, 0);
        let palette = LabelPalette::from_names(&[("a", [1, 2, 3])]).unwrap();
        let img = pnm::decode(&render_route(&sem, &palette, &[(0, 0), (1, 1)])).unwrap();
        assert_eq!(&img.samples[0..3], &HIGHLIGHT);
        assert_eq!(&img.samples[3..6], &[1, 2, 3]);
        assert_eq!(&img.samples[9..12], &HIGHLIGHT);
    }
}
