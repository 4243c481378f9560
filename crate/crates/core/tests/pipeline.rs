use svarfm::dag_project::{project_graph, DagProjectConfig};
use svarfm::discovery::{self, EffectOptions, TestConfig};
use svarfm::intervention::InterventionDataset;
use svarfm::simulators::{self, DoRequest, LinearSvarParams, SimulatorSpec};
use svarfm::{graph_metrics, CausalGraph};

fn diamond() -> SimulatorSpec {
    // x0 → x1, x0 → x2, x1 → x3, x2 → x3
    let mut b0 = vec![vec![0.0; 4]; 4];
    b0[1][0] = 0.8;
    b0[2][0] = -0.6;
    b0[3][1] = 0.7;
    b0[3][2] = 0.9;
    SimulatorSpec::linear_svar(LinearSvarParams::from_b0(b0))
}

fn cfg() -> TestConfig {
    TestConfig {
        m: 300,
        b: 300,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn interventional_pipeline_recovers_total_effects() {
    let spec = diamond();
    let names = spec.var_names();
    let effects = discovery::interventional_effects(&spec, &names, 0, &cfg(), &EffectOptions::default()).unwrap();
    let res = discovery::phase3(&effects, &cfg()).unwrap();
    // Interventions find ancestors: x0 → x3 has total effect 0.8·0.7 − 0.6·0.9 = 0.02.
    let truth = CausalGraph::from_triples(4, &[(0, 1, 0), (0, 2, 0), (0, 3, 0), (1, 3, 0), (2, 3, 0)]).unwrap();
    let m = graph_metrics(&res.graph, &truth).unwrap();
    assert_eq!((m.false_positives, m.false_negatives), (0, 0), "{:?}", res.graph.edges());

    for (i, j, want) in [(0, 2, -0.6), (0, 3, 0.02)] {
        let e = effects[0][i][j].unwrap();
        assert!((e.point - want).abs() < 4.0 * e.se, "{i}→{j}: {e:?}");
    }

    let (dag, proj) = project_graph(&res.graph, &DagProjectConfig::default()).unwrap();
    assert!(proj.converged);
    assert!(dag.is_lag0_acyclic());
    assert_eq!(dag.len(), 5);
}

#[test]
fn stored_datasets_give_the_same_effects() {
    let spec = diamond();
    let dir = tempfile::tempdir().unwrap();
    let req = DoRequest::new("x1", 1.0).horizon(0);
    let ds = simulators::simulate_do(&spec, &req, 400, 5).unwrap();
    let manifest = ds.write(dir.path()).unwrap();
    let back = InterventionDataset::read(&manifest).unwrap();
    assert_eq!(back, ds);

    let effs = discovery::dataset_effects(&back, None, 300, 1).unwrap();
    assert!(effs[1].is_none());
    let x3 = effs[3].unwrap();
    assert!((x3.point - 0.7).abs() < 4.0 * x3.se + 1e-9, "{x3:?}");
    for j in [0, 2] {
        assert_eq!(effs[j].unwrap().point, 0.0);
    }
}
