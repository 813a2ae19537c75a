//! Spatial graphs: validated node/edge sets, lattices, Laplacians and
//! centroid distances.
//!
//! Edge weights are conductances. With every conductance equal to one the
//! adjacency matrix is the plain 0/1 neighbourhood matrix.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometres, used by the equirectangular projection.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub conductance: f64,
}

/// A connected, undirected, weighted spatial graph.
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    node_ids: Vec<String>,
    centroids: Vec<[f64; 2]>,
    /// Original latitudes when the graph came from geographic coordinates.
    latitudes: Option<Vec<f64>>,
    edges: Vec<Edge>,
    adjacency: DMatrix<f64>,
    index: HashMap<String, usize>,
}

impl SpatialGraph {
    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Weighted adjacency matrix `A`; entries are conductances.
    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// North-south coordinate per node: the source latitude for geographic
    /// graphs, otherwise the planar `y` coordinate.
    pub fn latitudes(&self) -> Vec<f64> {
        match &self.latitudes {
            Some(lat) => lat.clone(),
            None => self.centroids.iter().map(|c| c[1]).collect(),
        }
    }

    /// Copy of this graph with the conductance of every edge touching a node
    /// in `nodes` multiplied by `factor`.
    pub fn scale_conductances(&self, nodes: &HashSet<usize>, factor: f64) -> Result<SpatialGraph> {
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let c = if nodes.contains(&e.a) || nodes.contains(&e.b) {
                    e.conductance * factor
                } else {
                    e.conductance
                };
                (self.node_ids[e.a].clone(), self.node_ids[e.b].clone(), c)
            })
            .collect::<Vec<_>>();
        let nodes = self
            .node_ids
            .iter()
            .zip(&self.centroids)
            .map(|(id, c)| (id.clone(), c[0], c[1]))
            .collect::<Vec<_>>();
        let mut g = build_graph(&nodes, &edges)?;
        g.latitudes = self.latitudes.clone();
        Ok(g)
    }
}

/// Build and validate a graph from `(id, x, y)` nodes and `(id, id,
/// conductance)` edges.
pub fn build_graph(nodes: &[(String, f64, f64)], edges: &[(String, String, f64)]) -> Result<SpatialGraph> {
    if nodes.len() < 2 {
        return Err(Error::DegenerateSize(format!(
            "need at least 2 nodes, got {}",
            nodes.len()
        )));
    }
    let mut index = HashMap::with_capacity(nodes.len());
    for (i, (id, x, y)) in nodes.iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidInput(format!("node {id:?} has non-finite centroid")));
        }
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::InvalidInput(format!("duplicate node id {id:?}")));
        }
    }
    let n = nodes.len();
    let mut adjacency = DMatrix::zeros(n, n);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(edges.len());
    for (a, b, c) in edges {
        let ia = *index.get(a).ok_or_else(|| Error::UnknownNode(a.clone()))?;
        let ib = *index.get(b).ok_or_else(|| Error::UnknownNode(b.clone()))?;
        if !(*c > 0.0) || !c.is_finite() {
            return Err(Error::NonpositiveConductance(a.clone(), b.clone(), *c));
        }
        if ia == ib {
            return Err(Error::InvalidInput(format!("self-loop at node {a:?}")));
        }
        if !seen.insert((ia.min(ib), ia.max(ib))) {
            return Err(Error::DuplicateEdge(a.clone(), b.clone()));
        }
        adjacency[(ia, ib)] = *c;
        adjacency[(ib, ia)] = *c;
        out.push(Edge {
            a: ia,
            b: ib,
            conductance: *c,
        });
    }
    let components = count_components(&adjacency);
    if components != 1 {
        return Err(Error::DisconnectedGraph { components });
    }
    Ok(SpatialGraph {
        node_ids: nodes.iter().map(|n| n.0.clone()).collect(),
        centroids: nodes.iter().map(|n| [n.1, n.2]).collect(),
        latitudes: None,
        edges: out,
        adjacency,
        index,
    })
}

fn count_components(adjacency: &DMatrix<f64>) -> usize {
    let n = adjacency.nrows();
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(j) = queue.pop_front() {
            for k in 0..n {
                if !seen[k] && adjacency[(j, k)] > 0.0 {
                    seen[k] = true;
                    queue.push_back(k);
                }
            }
        }
    }
    components
}

/// Node id of lattice cell `(row, col)`.
pub fn lattice_id(row: usize, col: usize) -> String {
    format!("r{row}c{col}")
}

/// Rook-adjacency lattice with unit conductances. Row 0 is the northern
/// (top) row: cell `(r, c)` sits at `x = c`, `y = rows - 1 - r`.
pub fn lattice(rows: usize, cols: usize) -> Result<SpatialGraph> {
    if rows == 0 || cols == 0 || rows * cols < 2 {
        return Err(Error::DegenerateSize(format!("lattice {rows}x{cols}")));
    }
    let mut nodes = Vec::with_capacity(rows * cols);
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            nodes.push((lattice_id(r, c), c as f64, (rows - 1 - r) as f64));
            if c + 1 < cols {
                edges.push((lattice_id(r, c), lattice_id(r, c + 1), 1.0));
            }
            if r + 1 < rows {
                edges.push((lattice_id(r, c), lattice_id(r + 1, c), 1.0));
            }
        }
    }
    build_graph(&nodes, &edges)
}

fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for k in (j + 1)..n {
            worst = worst.max((a[(j, k)] - a[(k, j)]).abs());
        }
    }
    worst
}

/// `L = diag(A 1) - A`.
pub fn laplacian(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "adjacency is {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax().max(1.0);
    let asym = max_asymmetry(a);
    if asym > 1e-12 * scale {
        return Err(Error::Asymmetric(asym));
    }
    if a.diagonal().iter().any(|&d| d != 0.0) {
        return Err(Error::InvalidInput("adjacency has nonzero diagonal".into()));
    }
    if a.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidInput("adjacency has negative entries".into()));
    }
    let mut l = -a.clone();
    for j in 0..a.nrows() {
        l[(j, j)] = a.row(j).sum();
    }
    Ok(l)
}

/// A graph with two synthetic terminals: the battery at index `n` and the
/// ground at index `n + 1`.
#[derive(Debug, Clone)]
pub struct AugmentedGraph {
    base: SpatialGraph,
    battery_attach: Vec<usize>,
    ground_attach: Vec<usize>,
    a_star: DMatrix<f64>,
}

impl AugmentedGraph {
    pub fn base(&self) -> &SpatialGraph {
        &self.base
    }
    pub fn battery_attach(&self) -> &[usize] {
        &self.battery_attach
    }
    pub fn ground_attach(&self) -> &[usize] {
        &self.ground_attach
    }
    /// `(n + 2) x (n + 2)` adjacency of the augmented graph.
    pub fn a_star(&self) -> &DMatrix<f64> {
        &self.a_star
    }
    pub fn battery_index(&self) -> usize {
        self.base.n()
    }
    pub fn ground_index(&self) -> usize {
        self.base.n() + 1
    }
}

/// Attach battery and ground nodes with unit-conductance edges.
pub fn augment(g: &SpatialGraph, battery: &[String], ground: &[String]) -> Result<AugmentedGraph> {
    augment_with_conductance(g, battery, ground, 1.0)
}

pub fn augment_with_conductance(
    g: &SpatialGraph,
    battery: &[String],
    ground: &[String],
    terminal_conductance: f64,
) -> Result<AugmentedGraph> {
    if battery.is_empty() {
        return Err(Error::EmptyTerminalSet("battery"));
    }
    if ground.is_empty() {
        return Err(Error::EmptyTerminalSet("ground"));
    }
    if !(terminal_conductance > 0.0) || !terminal_conductance.is_finite() {
        return Err(Error::NonpositiveConductance(
            "battery/ground".into(),
            "attachment".into(),
            terminal_conductance,
        ));
    }
    let resolve = |ids: &[String]| -> Result<Vec<usize>> {
        let mut out: Vec<usize> = ids.iter().map(|id| g.index_of(id)).collect::<Result<_>>()?;
        out.sort_unstable();
        out.dedup();
        Ok(out)
    };
    let battery_attach = resolve(battery)?;
    let ground_attach = resolve(ground)?;
    if let Some(&shared) = battery_attach.iter().find(|j| ground_attach.contains(j)) {
        return Err(Error::OverlappingTerminals(g.node_ids[shared].clone()));
    }
    let n = g.n();
    let mut a_star = DMatrix::zeros(n + 2, n + 2);
    a_star.view_mut((0, 0), (n, n)).copy_from(&g.adjacency);
    for &j in &battery_attach {
        a_star[(n, j)] = terminal_conductance;
        a_star[(j, n)] = terminal_conductance;
    }
    for &j in &ground_attach {
        a_star[(n + 1, j)] = terminal_conductance;
        a_star[(j, n + 1)] = terminal_conductance;
    }
    Ok(AugmentedGraph {
        base: g.clone(),
        battery_attach,
        ground_attach,
        a_star,
    })
}

/// Euclidean distances between node centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(DMatrix<f64>);

impl DistanceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

pub fn distance_matrix(g: &SpatialGraph) -> Result<DistanceMatrix> {
    let n = g.n();
    let c = g.centroids();
    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in (j + 1)..n {
            let dist = (c[j][0] - c[k][0]).hypot(c[j][1] - c[k][1]);
            if dist <= 0.0 {
                return Err(Error::CoincidentCentroids(
                    g.node_ids[j].clone(),
                    g.node_ids[k].clone(),
                ));
            }
            d[(j, k)] = dist;
            d[(k, j)] = dist;
        }
    }
    Ok(DistanceMatrix(d))
}

/// Equirectangular projection to kilometres about a reference latitude.
pub fn project_equirectangular(lon: f64, lat: f64, lon0: f64, lat0: f64) -> (f64, f64) {
    let x = EARTH_RADIUS_KM * (lon - lon0).to_radians() * lat0.to_radians().cos();
    let y = EARTH_RADIUS_KM * (lat - lat0).to_radians();
    (x, y)
}

// ---------------------------------------------------------------------------
// Graph file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub a: String,
    pub b: String,
    #[serde(default = "unit", skip_serializing_if = "is_unit")]
    pub conductance: f64,
}

fn unit() -> f64 {
    1.0
}

fn is_unit(c: &f64) -> bool {
    *c == 1.0
}

/// On-disk graph description. Nodes carry either planar `x`/`y` or
/// geographic `lon`/`lat` (degrees); geographic nodes are projected to
/// kilometres about their mean position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
    #[serde(default)]
    pub battery: Vec<String>,
    #[serde(default)]
    pub ground: Vec<String>,
    #[serde(default = "unit", skip_serializing_if = "is_unit")]
    pub terminal_conductance: f64,
}

/// A graph together with its battery/ground terminal sets.
#[derive(Debug, Clone)]
pub struct GraphSpec {
    pub graph: SpatialGraph,
    pub battery: Vec<String>,
    pub ground: Vec<String>,
    pub terminal_conductance: f64,
}

impl GraphSpec {
    pub fn augmented(&self) -> Result<AugmentedGraph> {
        augment_with_conductance(&self.graph, &self.battery, &self.ground, self.terminal_conductance)
    }

    /// Lattice with the battery on the top row and the ground on the bottom row.
    pub fn lattice(rows: usize, cols: usize) -> Result<GraphSpec> {
        if rows < 2 {
            return Err(Error::DegenerateSize(format!(
                "lattice {rows}x{cols} needs two rows for battery and ground"
            )));
        }
        let graph = lattice(rows, cols)?;
        Ok(GraphSpec {
            graph,
            battery: (0..cols).map(|c| lattice_id(0, c)).collect(),
            ground: (0..cols).map(|c| lattice_id(rows - 1, c)).collect(),
            terminal_conductance: 1.0,
        })
    }

    /// Parse either `lattice:RxC` or a path to a graph JSON file.
    pub fn from_arg(arg: &str) -> Result<GraphSpec> {
        if let Some(dims) = arg.strip_prefix("lattice:") {
            let (r, c) = dims
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::InvalidInput(format!("bad lattice shorthand {arg:?}")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidInput(format!("bad lattice shorthand {arg:?}")))
            };
            return GraphSpec::lattice(parse(r)?, parse(c)?);
        }
        GraphSpec::load(arg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GraphSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GraphFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            msg: e.to_string(),
        })?;
        GraphSpec::from_file(file)
    }

    pub fn from_file(file: GraphFile) -> Result<GraphSpec> {
        let geographic = file.nodes.iter().all(|n| n.lon.is_some() && n.lat.is_some());
        let planar = file.nodes.iter().all(|n| n.x.is_some() && n.y.is_some());
        let (nodes, latitudes) = if planar {
            let nodes = file
                .nodes
                .iter()
                .map(|n| (n.id.clone(), n.x.unwrap(), n.y.unwrap()))
                .collect::<Vec<_>>();
            let lat = file
                .nodes
                .iter()
                .all(|n| n.lat.is_some())
                .then(|| file.nodes.iter().map(|n| n.lat.unwrap()).collect());
            (nodes, lat)
        } else if geographic {
            let m = file.nodes.len() as f64;
            let lon0 = file.nodes.iter().map(|n| n.lon.unwrap()).sum::<f64>() / m;
            let lat0 = file.nodes.iter().map(|n| n.lat.unwrap()).sum::<f64>() / m;
            let nodes = file
                .nodes
                .iter()
                .map(|n| {
                    let (x, y) = project_equirectangular(n.lon.unwrap(), n.lat.unwrap(), lon0, lat0);
                    (n.id.clone(), x, y)
                })
                .collect::<Vec<_>>();
            let lat = file.nodes.iter().map(|n| n.lat.unwrap()).collect();
            (nodes, Some(lat))
        } else {
            return Err(Error::InvalidInput(
                "every node needs either x/y or lon/lat".into(),
            ));
        };
        let edges = file
            .edges
            .iter()
            .map(|e| (e.a.clone(), e.b.clone(), e.conductance))
            .collect::<Vec<_>>();
        let mut graph = build_graph(&nodes, &edges)?;
        graph.latitudes = latitudes;
        Ok(GraphSpec {
            graph,
            battery: file.battery,
            ground: file.ground,
            terminal_conductance: file.terminal_conductance,
        })
    }

    pub fn to_file(&self) -> GraphFile {
        let g = &self.graph;
        GraphFile {
            nodes: g
                .node_ids
                .iter()
                .zip(&g.centroids)
                .enumerate()
                .map(|(j, (id, c))| NodeRecord {
                    id: id.clone(),
                    x: Some(c[0]),
                    y: Some(c[1]),
                    lon: None,
                    lat: g.latitudes.as_ref().map(|l| l[j]),
                })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    a: g.node_ids[e.a].clone(),
                    b: g.node_ids[e.b].clone(),
                    conductance: e.conductance,
                })
                .collect(),
            battery: self.battery.clone(),
            ground: self.ground.clone(),
            terminal_conductance: self.terminal_conductance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn path3() -> SpatialGraph {
        build_graph(
            &[("a".into(), 0.0, 0.0), ("b".into(), 1.0, 0.0), ("c".into(), 2.0, 0.0)],
            &[("a".into(), "b".into(), 1.0), ("b".into(), "c".into(), 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn two_node_adjacency() {
        let g = build_graph(
            &[("0".into(), 0.0, 0.0), ("1".into(), 1.0, 0.0)],
            &[("0".into(), "1".into(), 1.0)],
        )
        .unwrap();
        assert_eq!(g.adjacency(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn path_adjacency() {
        let g = path3();
        let a = g.adjacency();
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(1, 2)], 1.0);
        assert_eq!(a[(0, 2)], 0.0);
    }

    #[test]
    fn build_errors() {
        let nodes = vec![("a".to_string(), 0.0, 0.0), ("b".to_string(), 1.0, 0.0)];
        assert!(matches!(
            build_graph(&nodes, &[("a".into(), "b".into(), 0.0)]),
            Err(Error::NonpositiveConductance(..))
        ));
        assert!(matches!(
            build_graph(&nodes, &[("a".into(), "z".into(), 1.0)]),
            Err(Error::UnknownNode(_))
        ));
        assert!(matches!(
            build_graph(&nodes, &[("a".into(), "b".into(), 1.0), ("b".into(), "a".into(), 2.0)]),
            Err(Error::DuplicateEdge(..))
        ));
        assert!(matches!(
            build_graph(&nodes, &[]),
            Err(Error::DisconnectedGraph { components: 2 })
        ));
        assert!(matches!(
            build_graph(&nodes[..1], &[]),
            Err(Error::DegenerateSize(_))
        ));
    }

    #[test]
    fn lattice_sizes() {
        assert_eq!(lattice(2, 2).unwrap().edges().len(), 4);
        assert_eq!(lattice(1, 2).unwrap().edges().len(), 1);
        let g = lattice(12, 5).unwrap();
        assert_eq!(g.n(), 60);
        // brute-force count of rook neighbours
        let mut count = 0;
        for r1 in 0..12i64 {
            for c1 in 0..5i64 {
                for r2 in 0..12i64 {
                    for c2 in 0..5i64 {
                        if (r1 - r2).abs() + (c1 - c2).abs() == 1 {
                            count += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(count / 2, 103);
        assert_eq!(g.edges().len(), 103);
        assert!(lattice(1, 1).is_err());
        assert!(lattice(0, 4).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let l = laplacian(path3().adjacency()).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(l, want);
        assert!((l * DVector::from_element(3, 1.0)).amax() == 0.0);

        let g = build_graph(
            &[("a".into(), 0.0, 0.0), ("b".into(), 1.0, 0.0)],
            &[("a".into(), "b".into(), 2.0)],
        )
        .unwrap();
        let l = laplacian(g.adjacency()).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]));

        let bad = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert!(matches!(laplacian(&bad), Err(Error::Asymmetric(_))));
    }

    #[test]
    fn augment_chain() {
        let g = build_graph(
            &[("0".into(), 0.0, 0.0), ("1".into(), 1.0, 0.0)],
            &[("0".into(), "1".into(), 1.0)],
        )
        .unwrap();
        let ag = augment(&g, &ids(&["0"]), &ids(&["1"])).unwrap();
        // battery(2) - 0 - 1 - ground(3)
        let want = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 1.0, 0.0, //
                1.0, 0.0, 0.0, 1.0, //
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0,
            ],
        );
        assert_eq!(ag.a_star(), &want);
        assert!(matches!(
            augment(&g, &ids(&["0"]), &ids(&["0"])),
            Err(Error::OverlappingTerminals(_))
        ));
        assert!(matches!(
            augment(&g, &[], &ids(&["0"])),
            Err(Error::EmptyTerminalSet("battery"))
        ));
    }

    #[test]
    fn augment_lattice_edge_count() {
        let spec = GraphSpec::lattice(12, 5).unwrap();
        let ag = spec.augmented().unwrap();
        assert_eq!(ag.a_star().nrows(), 62);
        let count = |m: &DMatrix<f64>| m.iter().filter(|&&x| x > 0.0).count() / 2;
        assert_eq!(count(ag.a_star()) - count(spec.graph.adjacency()), 10);
        assert_eq!(
            ag.a_star().view((0, 0), (60, 60)).into_owned(),
            spec.graph.adjacency().clone()
        );
    }

    #[test]
    fn distances() {
        let g = build_graph(
            &[("a".into(), 0.0, 0.0), ("b".into(), 3.0, 4.0)],
            &[("a".into(), "b".into(), 1.0)],
        )
        .unwrap();
        let d = distance_matrix(&g).unwrap();
        assert_eq!(d.matrix()[(0, 1)], 5.0);
        assert_eq!(d.matrix()[(0, 0)], 0.0);

        let d = distance_matrix(&lattice(2, 2).unwrap()).unwrap();
        let mut off: Vec<f64> = (0..4)
            .flat_map(|j| ((j + 1)..4).map(move |k| (j, k)))
            .map(|(j, k)| d.matrix()[(j, k)])
            .collect();
        off.sort_by(f64::total_cmp);
        let s = 2f64.sqrt();
        assert_eq!(off, vec![1.0, 1.0, 1.0, 1.0, s, s]);

        let g = build_graph(
            &[("a".into(), 1.0, 1.0), ("b".into(), 1.0, 1.0)],
            &[("a".into(), "b".into(), 1.0)],
        )
        .unwrap();
        assert!(matches!(distance_matrix(&g), Err(Error::CoincidentCentroids(..))));
    }

    #[test]
    fn graph_file_roundtrip_and_defaults() {
        let text = r#"{
            "nodes": [{"id": "a", "lon": -75.0, "lat": 42.0}, {"id": "b", "lon": -75.0, "lat": 43.0}],
            "edges": [{"a": "a", "b": "b"}],
            "battery": ["b"],
            "ground": ["a"]
        }"#;
        let spec = GraphSpec::from_file(serde_json::from_str(text).unwrap()).unwrap();
        assert_eq!(spec.graph.edges()[0].conductance, 1.0);
        let d = distance_matrix(&spec.graph).unwrap();
        // one degree of latitude
        assert!((d.matrix()[(0, 1)] - 111.195).abs() < 0.01);
        assert_eq!(spec.graph.latitudes(), vec![42.0, 43.0]);
        let again = GraphSpec::from_file(spec.to_file()).unwrap();
        assert_eq!(again.graph.adjacency(), spec.graph.adjacency());
        assert_eq!(again.graph.latitudes(), vec![42.0, 43.0]);
    }

    #[test]
    fn lattice_shorthand() {
        let spec = GraphSpec::from_arg("lattice:12x5").unwrap();
        assert_eq!(spec.graph.n(), 60);
        assert_eq!(spec.battery.len(), 5);
        assert!(GraphSpec::from_arg("lattice:12").is_err());
    }
}
