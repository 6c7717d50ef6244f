//! Shared toy fixture for the kernel unit tests: two counties in one
//! state, eight days, with tests, vaccinations, and admissions.

use std::collections::BTreeMap;

use crate::graph::CountyGraph;
use crate::grid::Grid;
use crate::observation::SurveillanceData;

use super::context::ModelContext;
use super::params::{ParameterSet, Priors};
use super::structures::Workspace;

pub(crate) fn two_county_fixture() -> (ModelContext, ParameterSet, Workspace) {
    let graph = CountyGraph::from_parts(
        vec!["a".to_string(), "b".to_string()],
        vec![500, 500],
        vec!["S".to_string(), "S".to_string()],
        &[("a".to_string(), "b".to_string())],
    )
    .unwrap();
    let n_days = 8;
    let mut reported = Grid::zeros(2, n_days);
    for (t, v) in [3, 2, 4, 5, 3, 2, 2].iter().enumerate() {
        reported.set(0, t + 1, *v);
    }
    for (t, v) in [2, 3, 3, 4, 2, 1].iter().enumerate() {
        reported.set(1, t + 2, *v);
    }
    let mut raw_vax = Grid::zeros(2, n_days);
    for t in 0..n_days {
        raw_vax.set(0, t, 30);
        raw_vax.set(1, t, 25);
    }
    let mut state_tests = BTreeMap::new();
    state_tests.insert("S".to_string(), vec![60i64; n_days]);
    let mut state_admissions = BTreeMap::new();
    state_admissions.insert("S".to_string(), vec![0, 0, 1, 2, 2, 3, 2, 1]);
    let data = SurveillanceData {
        reported_cases: reported,
        state_tests,
        state_admissions: Some(state_admissions),
        raw_vaccinations: raw_vax,
        flags: Vec::new(),
    };
    let mut ctx = ModelContext::from_data(graph, data).unwrap();
    ctx.options.vax_lag_days = 2;
    let mut params = ParameterSet::init(&ctx, &Priors::default()).unwrap();
    // Push some mass into D and E so every kernel sees a non-trivial state.
    params.traj.apply_e_delta(0, 5, 4);
    params.traj.apply_d_delta(0, 6, 1);
    let ws = Workspace::new(&ctx, &params);
    (ctx, params, ws)
}
