//! County adjacency graph and population table.
//!
//! Regions are kept in the order the region table lists them, and that order
//! fixes the row/column layout of every spatial precision matrix built from
//! the graph. Lookups go through an id map; iteration never touches a hash
//! map, so run output does not depend on hasher state.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Undirected county adjacency graph with per-region population and state
/// membership.
///
/// Every region must have at least one neighbor: the conditional
/// autoregression scales by neighbor count, so an isolated region has no
/// valid conditional distribution. Loading rejects such inputs outright.
#[derive(Debug, Clone)]
pub struct CountyGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    populations: Vec<u64>,
    states: Vec<String>,
    adjacency: Vec<Vec<usize>>,
    n_edges: usize,
}

#[derive(Debug, Deserialize)]
struct RegionRow {
    region_id: String,
    population: u64,
    state_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct AdjacencyRow {
    region_id: String,
    neighbor_id: String,
}

/// Reads the adjacency pair list and region table from CSV files.
///
/// Both files are UTF-8 with a header row. The region table needs columns
/// `region_id,population` and may carry an optional `state_id` used to group
/// counties under state-level surveillance totals; without it, five-digit
/// numeric ids are grouped by their two-digit prefix (FIPS convention) and
/// anything else falls into one shared group. Adjacency rows may list each
/// undirected pair in either or both directions; duplicates collapse.
///
/// # Errors
///
/// Unknown region ids in the pair list, duplicate region rows, zero
/// populations, self-loops, and isolated regions are all rejected.
pub fn load_graph(adjacency_csv: &Path, region_csv: &Path) -> Result<CountyGraph> {
    let mut rdr = csv::Reader::from_path(region_csv)?;
    let mut ids = Vec::new();
    let mut populations = Vec::new();
    let mut states: Vec<Option<String>> = Vec::new();
    for row in rdr.deserialize() {
        let row: RegionRow = row?;
        ids.push(row.region_id);
        populations.push(row.population);
        states.push(row.state_id);
    }

    let mut rdr = csv::Reader::from_path(adjacency_csv)?;
    let mut pairs = Vec::new();
    for row in rdr.deserialize() {
        let row: AdjacencyRow = row?;
        pairs.push((row.region_id, row.neighbor_id));
    }

    let states = resolve_states(&ids, states)?;
    CountyGraph::from_parts(ids, populations, states, &pairs)
}

fn resolve_states(ids: &[String], given: Vec<Option<String>>) -> Result<Vec<String>> {
    let n_given = given.iter().filter(|s| s.is_some()).count();
    if n_given == ids.len() {
        return Ok(given.into_iter().map(|s| s.unwrap()).collect());
    }
    if n_given != 0 {
        return Err(Error::Data(
            "region table: state_id must be present for all regions or none".into(),
        ));
    }
    // No state column: fall back to the FIPS prefix when ids look like FIPS.
    let all_fips = ids
        .iter()
        .all(|id| id.len() == 5 && id.bytes().all(|b| b.is_ascii_digit()));
    Ok(ids
        .iter()
        .map(|id| {
            if all_fips {
                id[..2].to_string()
            } else {
                "00".to_string()
            }
        })
        .collect())
}

impl CountyGraph {
    /// Builds a graph from already-parsed parts. `pairs` lists undirected
    /// edges by external id, either direction, duplicates allowed.
    pub fn from_parts(
        ids: Vec<String>,
        populations: Vec<u64>,
        states: Vec<String>,
        pairs: &[(String, String)],
    ) -> Result<CountyGraph> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Graph("region table is empty".into()));
        }
        if populations.len() != n || states.len() != n {
            return Err(Error::Graph("region table column lengths disagree".into()));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate region id '{id}'")));
            }
        }
        for (i, &pop) in populations.iter().enumerate() {
            if pop == 0 {
                return Err(Error::Graph(format!(
                    "region '{}' has zero population",
                    ids[i]
                )));
            }
        }

        let mut edge_set: HashSet<(usize, usize)> = HashSet::new();
        for (a, b) in pairs {
            let ia = *index
                .get(a)
                .ok_or_else(|| Error::Graph(format!("adjacency references unknown region '{a}'")))?;
            let ib = *index
                .get(b)
                .ok_or_else(|| Error::Graph(format!("adjacency references unknown region '{b}'")))?;
            if ia == ib {
                return Err(Error::Graph(format!("self-loop on region '{a}'")));
            }
            edge_set.insert((ia.min(ib), ia.max(ib)));
        }

        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edge_set {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for (i, nbrs) in adjacency.iter_mut().enumerate() {
            if nbrs.is_empty() {
                return Err(Error::Graph(format!(
                    "region '{}' is isolated (no neighbors)",
                    ids[i]
                )));
            }
            nbrs.sort_unstable();
        }

        Ok(CountyGraph {
            ids,
            index,
            populations,
            states,
            adjacency,
            n_edges: edge_set.len(),
        })
    }

    pub fn n_regions(&self) -> usize {
        self.ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn region_id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn region_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn population(&self, i: usize) -> u64 {
        self.populations[i]
    }

    pub fn state_id(&self, i: usize) -> &str {
        &self.states[i]
    }

    /// Neighbor indices of region `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Undirected edges as (low, high) index pairs, ascending.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_edges);
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            for &j in nbrs {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Region indices grouped by state id, states in sorted order.
    pub fn state_groups(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.states.iter().enumerate() {
            groups.entry(s.clone()).or_default().push(i);
        }
        groups
    }

    /// Restriction to the named regions (order preserved from `keep`).
    ///
    /// # Errors
    ///
    /// Unknown ids, and regions left isolated by the restriction, are
    /// rejected.
    pub fn induced_subgraph(&self, keep: &[String]) -> Result<CountyGraph> {
        let mut keep_idx = Vec::with_capacity(keep.len());
        for id in keep {
            let i = self
                .index_of(id)
                .ok_or_else(|| Error::Graph(format!("unknown region '{id}' in subset")))?;
            keep_idx.push(i);
        }
        let keep_set: HashSet<usize> = keep_idx.iter().copied().collect();
        if keep_set.len() != keep_idx.len() {
            return Err(Error::Graph("duplicate region in subset".into()));
        }
        let ids: Vec<String> = keep_idx.iter().map(|&i| self.ids[i].clone()).collect();
        let pops: Vec<u64> = keep_idx.iter().map(|&i| self.populations[i]).collect();
        let states: Vec<String> = keep_idx.iter().map(|&i| self.states[i].clone()).collect();
        let mut pairs = Vec::new();
        for &i in &keep_idx {
            for &j in self.neighbors(i) {
                if i < j && keep_set.contains(&j) {
                    pairs.push((self.ids[i].clone(), self.ids[j].clone()));
                }
            }
        }
        CountyGraph::from_parts(ids, pops, states, &pairs)
    }
}

/// Builders for the small standard graphs used throughout the test suites.
pub mod shapes {
    use super::CountyGraph;

    fn mk(n: usize, pairs: Vec<(usize, usize)>) -> CountyGraph {
        let ids: Vec<String> = (0..n).map(|i| format!("r{i:03}")).collect();
        let pops = vec![100_000u64; n];
        let states = vec!["00".to_string(); n];
        let named: Vec<(String, String)> = pairs
            .into_iter()
            .map(|(a, b)| (ids[a].clone(), ids[b].clone()))
            .collect();
        CountyGraph::from_parts(ids, pops, states, &named).expect("valid fixture graph")
    }

    /// Path graph 0-1-2-...-(n-1).
    pub fn path(n: usize) -> CountyGraph {
        mk(n, (0..n - 1).map(|i| (i, i + 1)).collect())
    }

    /// Cycle graph on n nodes.
    pub fn cycle(n: usize) -> CountyGraph {
        let mut pairs: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        pairs.push((0, n - 1));
        mk(n, pairs)
    }

    /// Star graph: node 0 adjacent to all others.
    pub fn star(n: usize) -> CountyGraph {
        mk(n, (1..n).map(|i| (0, i)).collect())
    }

    /// rows x cols grid with 4-neighbor adjacency, row-major node order.
    pub fn grid(rows: usize, cols: usize) -> CountyGraph {
        let mut pairs = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    pairs.push((i, i + 1));
                }
                if r + 1 < rows {
                    pairs.push((i, i + cols));
                }
            }
        }
        mk(rows * cols, pairs)
    }
}
