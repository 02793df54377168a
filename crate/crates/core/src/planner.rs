//! Least-cost routes over cost maps, and per-class explanations of why a
//! route differs from the distance-shortest one.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::irl::{Cell, CostMap, KING_MOVES};
use crate::raster::{LabelPalette, SemanticRaster};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("no route from {start:?} to {goal:?}")]
    NoRoute { start: Cell, goal: Cell },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("plans do not share endpoints")]
    EndpointMismatch,
    #[error("invalid path: {0}")]
    InvalidPath(String),
}

/// Blend between learned cost (`lambda = 1`) and pure distance (`lambda = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteQuery {
    pub start: Cell,
    pub goal: Cell,
    pub lambda: f64,
}

impl RouteQuery {
    pub fn new(start: Cell, goal: Cell, lambda: f64) -> Self {
        Self { start, goal, lambda }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), PlanError> {
        for (name, cell) in [("start", self.start), ("goal", self.goal)] {
            if cell.0 >= height || cell.1 >= width {
                return Err(PlanError::InvalidQuery(format!("{name} {cell:?} outside {width}x{height}")));
            }
        }
        if self.start == self.goal {
            return Err(PlanError::InvalidQuery("start equals goal".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(PlanError::InvalidQuery(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePlan {
    pub path: Vec<Cell>,
    pub total_cost: f64,
    /// Unit steps, diagonals count `sqrt(2)`.
    pub total_distance: f64,
}

/// Named blend presets.
pub fn profile_lambda(profile: &str) -> Option<f64> {
    match profile {
        "safe" => Some(1.0),
        "fast" => Some(0.25),
        _ => None,
    }
}

fn step_length(a: Cell, b: Cell) -> f64 {
    if a.0 != b.0 && a.1 != b.1 {
        SQRT_2
    } else {
        1.0
    }
}

/// Share of edge `a -> b` assigned to `a`; the edge costs `half(a) + half(b)`
/// up to rounding.
fn half_edge(len: f64, cost: f64, lambda: f64) -> f64 {
    len * (lambda * cost / 2.0 + (1.0 - lambda) / 2.0)
}

/// `len * [lambda * (c(a) + c(b)) / 2 + (1 - lambda)]`.
pub fn edge_cost(costs: &CostMap, a: Cell, b: Cell, lambda: f64) -> f64 {
    let len = step_length(a, b);
    len * (lambda * (costs.get(a) + costs.get(b)) / 2.0 + (1.0 - lambda))
}

fn check_path(path: &[Cell], width: usize, height: usize) -> Result<(), PlanError> {
    if path.len() < 2 {
        return Err(PlanError::InvalidPath("fewer than two cells".into()));
    }
    for (i, &c) in path.iter().enumerate() {
        if c.0 >= height || c.1 >= width {
            return Err(PlanError::InvalidPath(format!("cell {i} {c:?} out of bounds")));
        }
        if i > 0 {
            let p = path[i - 1];
            let (dr, dc) = (p.0.abs_diff(c.0), p.1.abs_diff(c.1));
            if dr > 1 || dc > 1 || dr + dc == 0 {
                return Err(PlanError::InvalidPath(format!("step {i} {p:?} -> {c:?} is not a king move")));
            }
        }
    }
    Ok(())
}

/// Recomputes a path's cost edge by edge, in path order.
pub fn path_cost(costs: &CostMap, path: &[Cell], lambda: f64) -> Result<f64, PlanError> {
    check_path(path, costs.width(), costs.height())?;
    Ok(path.windows(2).map(|e| edge_cost(costs, e[0], e[1], lambda)).sum())
}

pub fn path_distance(path: &[Cell]) -> f64 {
    path.windows(2).map(|e| step_length(e[0], e[1])).sum()
}

#[derive(Clone, Copy, PartialEq)]
struct Key {
    cost: f64,
    steps: usize,
    cell: usize,
}

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.steps.cmp(&other.steps))
            .then(self.cell.cmp(&other.cell))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over the 8-connected grid. Labels compare by accumulated cost,
/// then step count, then predecessor index, which fixes one path among
/// equal-cost alternatives.
fn dijkstra(
    width: usize,
    height: usize,
    query: &RouteQuery,
    edge: impl Fn(Cell, Cell) -> f64,
    passable: impl Fn(Cell) -> bool,
) -> Result<RoutePlan, PlanError> {
    query.validate(width, height)?;
    let no_route = PlanError::NoRoute {
        start: query.start,
        goal: query.goal,
    };
    if !passable(query.start) || !passable(query.goal) {
        return Err(no_route);
    }
    let n = width * height;
    let index = |c: Cell| c.0 * width + c.1;
    let cell = |i: usize| (i / width, i % width);
    let mut cost = vec![f64::INFINITY; n];
    let mut steps = vec![usize::MAX; n];
    let mut pred = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    let source = index(query.start);
    let target = index(query.goal);
    cost[source] = 0.0;
    steps[source] = 0;
    heap.push(Reverse(Key {
        cost: 0.0,
        steps: 0,
        cell: source,
    }));
    while let Some(Reverse(key)) = heap.pop() {
        let u = key.cell;
        if done[u] || key.cost != cost[u] || key.steps != steps[u] {
            continue;
        }
        done[u] = true;
        if u == target {
            break;
        }
        let (r, c) = cell(u);
        for (dr, dc) in KING_MOVES {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                continue;
            }
            let next = (nr as usize, nc as usize);
            let v = index(next);
            if done[v] || !passable(next) {
                continue;
            }
            let candidate = cost[u] + edge((r, c), next);
            let candidate_steps = steps[u] + 1;
            let better = match candidate.total_cmp(&cost[v]).then(candidate_steps.cmp(&steps[v])) {
                Ordering::Less => true,
                Ordering::Equal => u < pred[v],
                Ordering::Greater => false,
            };
            if better {
                let relabel = candidate != cost[v] || candidate_steps != steps[v];
                cost[v] = candidate;
                steps[v] = candidate_steps;
                pred[v] = u;
                if relabel {
                    heap.push(Reverse(Key {
                        cost: candidate,
                        steps: candidate_steps,
                        cell: v,
                    }));
                }
            }
        }
    }
    if !done[target] {
        return Err(no_route);
    }
    let mut path = vec![query.goal];
    let mut at = target;
    while at != source {
        at = pred[at];
        path.push(cell(at));
    }
    path.reverse();
    Ok(RoutePlan {
        total_distance: path_distance(&path),
        total_cost: cost[target],
        path,
    })
}

/// Minimal-cost route. Cells with infinite cost are never entered.
pub fn plan(costs: &CostMap, query: &RouteQuery) -> Result<RoutePlan, PlanError> {
    let lambda = query.lambda;
    dijkstra(
        costs.width(),
        costs.height(),
        query,
        |a, b| edge_cost(costs, a, b, lambda),
        |c| costs.get(c).is_finite(),
    )
}

/// Pure-distance route on an open grid of `dimensions = (width, height)`.
pub fn shortest_distance_path(dimensions: (usize, usize), query: &RouteQuery) -> Result<RoutePlan, PlanError> {
    dijkstra(dimensions.0, dimensions.1, query, step_length, |_| true)
}

/// Plans to every goal and keeps the cheapest; ties go to the earlier goal.
pub fn plan_nearest(costs: &CostMap, start: Cell, goals: &[Cell], lambda: f64) -> Result<(usize, RoutePlan), PlanError> {
    let mut best: Option<(usize, RoutePlan)> = None;
    let mut last_err = PlanError::InvalidQuery("no goals".into());
    for (i, &goal) in goals.iter().enumerate() {
        match plan(costs, &RouteQuery::new(start, goal, lambda)) {
            Ok(p) => {
                if best.as_ref().is_none_or(|(_, b)| p.total_cost < b.total_cost) {
                    best = Some((i, p));
                }
            }
            Err(e) => last_err = e,
        }
    }
    best.ok_or(last_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAttribution {
    pub cells_on_alternative: usize,
    pub cost_share_alternative: f64,
    pub cells_on_chosen: usize,
    pub cost_share_chosen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub chosen: RoutePlan,
    /// The distance-shortest route, costed under the chosen route's cost
    /// function.
    pub alternative: RoutePlan,
    pub per_class_attribution: BTreeMap<String, ClassAttribution>,
    pub top_class: Option<String>,
    pub summary: String,
}

/// Per-class half-edge cost shares and cell counts along `path`.
pub fn attribute(
    path: &[Cell],
    costs: &CostMap,
    lambda: f64,
    semantic: &SemanticRaster,
) -> Result<BTreeMap<u8, (usize, f64)>, PlanError> {
    check_path(path, costs.width(), costs.height())?;
    let class_of = |c: Cell| semantic.get(c.1, c.0);
    let mut out: BTreeMap<u8, (usize, f64)> = BTreeMap::new();
    for &c in path {
        out.entry(class_of(c)).or_default().0 += 1;
    }
    for e in path.windows(2) {
        let len = step_length(e[0], e[1]);
        for c in [e[0], e[1]] {
            out.entry(class_of(c)).or_default().1 += half_edge(len, costs.get(c), lambda);
        }
    }
    Ok(out)
}

pub fn explain(
    chosen: &RoutePlan,
    alternative: &RoutePlan,
    costs: &CostMap,
    lambda: f64,
    semantic: &SemanticRaster,
    palette: &LabelPalette,
) -> Result<Explanation, PlanError> {
    if semantic.dims() != (costs.width(), costs.height()) {
        return Err(PlanError::DimensionMismatch(format!(
            "semantic {:?} vs cost map {}x{}",
            semantic.dims(),
            costs.width(),
            costs.height()
        )));
    }
    let (a, b) = (&chosen.path, &alternative.path);
    if a.first() != b.first() || a.last() != b.last() {
        return Err(PlanError::EndpointMismatch);
    }
    let recost = |p: &RoutePlan| -> Result<RoutePlan, PlanError> {
        Ok(RoutePlan {
            path: p.path.clone(),
            total_cost: path_cost(costs, &p.path, lambda)?,
            total_distance: path_distance(&p.path),
        })
    };
    let chosen = recost(chosen)?;
    let alternative = recost(alternative)?;
    let on_chosen = attribute(&chosen.path, costs, lambda, semantic)?;
    let on_alt = attribute(&alternative.path, costs, lambda, semantic)?;

    let classes: BTreeSet<u8> = on_chosen.keys().chain(on_alt.keys()).copied().collect();
    let name = |id: u8| palette.name(id).map(str::to_string).unwrap_or_else(|| format!("class {id}"));
    let mut per_class_attribution = BTreeMap::new();
    let mut top: Option<(u8, f64)> = None;
    for &id in &classes {
        let (ca, sa) = on_alt.get(&id).copied().unwrap_or_default();
        let (cc, sc) = on_chosen.get(&id).copied().unwrap_or_default();
        per_class_attribution.insert(
            name(id),
            ClassAttribution {
                cells_on_alternative: ca,
                cost_share_alternative: sa,
                cells_on_chosen: cc,
                cost_share_chosen: sc,
            },
        );
        let delta = sa - sc;
        if top.is_none_or(|(_, best)| delta > best) {
            top = Some((id, delta));
        }
    }

    if chosen.path == alternative.path {
        return Ok(Explanation {
            chosen,
            alternative,
            per_class_attribution,
            top_class: None,
            summary: "The shortest route is also the lowest-cost route.".to_string(),
        });
    }
    let (top_id, _) = top.expect("paths have at least two cells");
    let chosen_cells: BTreeSet<Cell> = chosen.path.iter().copied().collect();
    let avoided = alternative
        .path
        .iter()
        .filter(|&&c| semantic.get(c.1, c.0) == top_id && !chosen_cells.contains(&c))
        .count();
    let share = on_alt.get(&top_id).map_or(0.0, |v| v.1);
    let percent = 100.0 * share / alternative.total_cost;
    let summary = format!(
        "Route avoids {} cells of '{}', which contribute {:.1}% of the alternative's cost; chosen route is {:.2} steps longer and {:.2} cheaper.",
        avoided,
        name(top_id),
        percent,
        chosen.total_distance - alternative.total_distance,
        alternative.total_cost - chosen.total_cost
    );
    Ok(Explanation {
        chosen,
        alternative,
        per_class_attribution,
        top_class: Some(name(top_id)),
        summary,
    })
}

/// Plans `query`, plans the pure-distance route between the same endpoints
/// and explains the difference.
pub fn plan_and_explain(
    costs: &CostMap,
    query: &RouteQuery,
    semantic: &SemanticRaster,
    palette: &LabelPalette,
) -> Result<Explanation, PlanError> {
    let chosen = plan(costs, query)?;
    let alternative = plan(costs, &RouteQuery { lambda: 0.0, ..*query })?;
    explain(&chosen, &alternative, costs, query.lambda, semantic, palette)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_row_is_straight() {
        let costs = CostMap::uniform(6, 3, 2.0).unwrap();
        let p = plan(&costs, &RouteQuery::new((1, 0), (1, 5), 1.0)).unwrap();
        assert_eq!(p.path, (0..6).map(|c| (1, c)).collect::<Vec<_>>());
        assert_eq!(p.total_distance, 5.0);
        assert_eq!(p.total_cost, 10.0);
    }

    #[test]
    fn shortest_distance_cases() {
        let p = shortest_distance_path((4, 4), &RouteQuery::new((0, 0), (0, 1), 1.0)).unwrap();
        assert_eq!(p.path.len(), 2);
        assert_eq!(p.total_distance, 1.0);
        let p = shortest_distance_path((4, 4), &RouteQuery::new((0, 0), (3, 3), 1.0)).unwrap();
        assert_eq!(p.total_distance, 3.0 * SQRT_2);
        assert_eq!(p.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn query_validation() {
        let costs = CostMap::uniform(3, 3, 1.0).unwrap();
        assert!(matches!(plan(&costs, &RouteQuery::new((0, 0), (0, 0), 1.0)), Err(PlanError::InvalidQuery(_))));
        assert!(matches!(plan(&costs, &RouteQuery::new((0, 0), (3, 0), 1.0)), Err(PlanError::InvalidQuery(_))));
        assert!(matches!(plan(&costs, &RouteQuery::new((0, 0), (1, 0), 1.5)), Err(PlanError::InvalidQuery(_))));
    }

    #[test]
    fn forbidden_wall_means_no_route() {
        let mut c = vec![1.0; 9];
        for r in 0..3 {
            c[r * 3 + 1] = f64::INFINITY;
        }
        let costs = CostMap::new(3, 3, c).unwrap();
        assert_eq!(
            plan(&costs, &RouteQuery::new((0, 0), (0, 2), 1.0)),
            Err(PlanError::NoRoute { start: (0, 0), goal: (0, 2) })
        );
    }

    fn flood_case() -> (CostMap, SemanticRaster, LabelPalette) {
        // 5x5, class 0 "dry" cost 1, a vertical 3-cell "flooded" band of cost 10
        // in column 2, rows 1..=3.
        let mut sem = SemanticRaster::filled(5, 5, 0);
        let mut c = vec![1.0; 25];
        for r in 1..=3 {
            sem.set(2, r, 1);
            c[r * 5 + 2] = 10.0;
        }
        let palette = LabelPalette::from_names(&[("dry", [200, 200, 200]), ("flooded", [0, 0, 255])]).unwrap();
        (CostMap::new(5, 5, c).unwrap(), sem, palette)
    }

    #[test]
    fn flooded_band_explanation() {
        let (costs, sem, palette) = flood_case();
        let e = plan_and_explain(&costs, &RouteQuery::new((2, 0), (2, 4), 1.0), &sem, &palette).unwrap();
        assert_eq!(e.alternative.path, (0..5).map(|c| (2, c)).collect::<Vec<_>>());
        assert_eq!(e.top_class.as_deref(), Some("flooded"));
        // Straight line: edges 1, 5.5, 5.5, 1. The flooded cell takes 5 + 5.
        let flooded = &e.per_class_attribution["flooded"];
        assert_eq!(flooded.cost_share_alternative, 10.0);
        assert_eq!(e.alternative.total_cost, 13.0);
        assert_eq!(flooded.cost_share_alternative / e.alternative.total_cost, 10.0 / 13.0);
        assert_eq!(flooded.cells_on_chosen, 0);
        // Detour over row 0 or row 4: four diagonals at cost 1.
        assert!((e.chosen.total_cost - 4.0 * SQRT_2).abs() < 1e-12);
        assert!(e.summary.starts_with("Route avoids 1 cells of 'flooded', which contribute 76.9% of the alternative's cost;"));
        assert!(e.summary.ends_with("chosen route is 1.66 steps longer and 7.34 cheaper."));
    }

    #[test]
    fn identity_explanation() {
        let costs = CostMap::uniform(4, 1, 1.0).unwrap();
        let sem = SemanticRaster::filled(4, 1, 0);
        let palette = LabelPalette::from_names(&[("dry", [1, 2, 3])]).unwrap();
        let e = plan_and_explain(&costs, &RouteQuery::new((0, 0), (0, 3), 1.0), &sem, &palette).unwrap();
        assert_eq!(e.summary, "The shortest route is also the lowest-cost route.");
        let a = &e.per_class_attribution["dry"];
        assert_eq!(a.cost_share_alternative, a.cost_share_chosen);
        assert_eq!(a.cells_on_alternative, a.cells_on_chosen);
    }

    #[test]
    fn endpoint_mismatch() {
        let (costs, sem, palette) = flood_case();
        let a = plan(&costs, &RouteQuery::new((2, 0), (2, 4), 1.0)).unwrap();
        let b = plan(&costs, &RouteQuery::new((2, 0), (3, 4), 1.0)).unwrap();
        assert_eq!(explain(&a, &b, &costs, 1.0, &sem, &palette), Err(PlanError::EndpointMismatch));
    }

    #[test]
    fn nearest_goal() {
        let (costs, _, _) = flood_case();
        let (i, p) = plan_nearest(&costs, (2, 0), &[(2, 4), (0, 1)], 1.0).unwrap();
        assert_eq!(i, 1);
        assert_eq!(p.path.last(), Some(&(0, 1)));
    }

    #[test]
    fn profiles() {
        assert_eq!(profile_lambda("safe"), Some(1.0));
        assert_eq!(profile_lambda("fast"), Some(0.25));
        assert_eq!(profile_lambda("scenic"), None);
    }
}
