use super::*;
use crate::autodiff::value_and_grad;
use crate::scene::{build_lane_graph, preprocess_history, to_focal_frame, LaneSegment, RuleFlags};
use crate::scenegen::{generate_scene, ScenarioKind, ScenarioSpec};

fn small_config() -> ModelConfig {
    ModelConfig {
        d_a: 8,
        d_m: 8,
        k: 3,
        history_steps: 4,
        future_steps: 3,
        mlp_hidden: 8,
        ..ModelConfig::default()
    }
}

fn scene(kind: ScenarioKind, seed: u64, cfg: &ModelConfig) -> Scene {
    let spec = ScenarioSpec {
        history_steps: cfg.history_steps,
        future_steps: cfg.future_steps,
        n_agents: 3,
        ..ScenarioSpec::new(kind, seed)
    };
    to_focal_frame(&generate_scene(&spec).unwrap()).unwrap().0
}

fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|id| store.name(*id).starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameter under {prefix}");
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn history(points: &[Vec2]) -> AgentHistory {
    preprocess_history(points, &vec![true; points.len()]).unwrap()
}

fn agent_features(model: &Model, p: &ParamStore, hs: &[&AgentHistory]) -> Tensor {
    let mut t = Tape::new();
    let v = model.encode_agents(&mut t, p, hs).unwrap();
    t.value(v).clone()
}

#[test]
fn zero_encoder_gives_zero_features() {
    let (model, mut p) = Model::init(small_config(), 1).unwrap();
    zero_prefix(&mut p, "agent_encoder");
    let h = history(&[[0.0, 0.0], [1.0, 0.5], [2.0, 1.0], [3.0, 1.0]]);
    assert!(agent_features(&model, &p, &[&h]).data().iter().all(|v| *v == 0.0));
}

#[test]
fn agent_encoding_is_per_agent() {
    let (model, p) = Model::init(small_config(), 2).unwrap();
    let a = history(&[[0.0, 0.0], [1.0, 0.5], [2.0, 1.0], [3.0, 1.0]]);
    let b = history(&[[5.0, 5.0], [5.0, 4.0], [5.5, 3.0], [6.0, 2.0]]);
    let f = agent_features(&model, &p, &[&a, &b, &a]);
    assert_eq!(f.row(0), f.row(2));
    let g = agent_features(&model, &p, &[&b, &a]);
    assert_eq!(f.row(0), g.row(1));
    assert_eq!(f.row(1), g.row(0));
}

fn map_features(model: &Model, p: &ParamStore, graph: &LaneGraph, agents: &[AgentHistory]) -> Tensor {
    let mut t = Tape::new();
    let hs: Vec<&AgentHistory> = agents.iter().collect();
    let a = model.encode_agents(&mut t, p, &hs).unwrap();
    let pos: Vec<Vec2> = agents.iter().map(AgentHistory::current_position).collect();
    let m = model.encode_map(&mut t, p, graph, a, &pos).unwrap().unwrap();
    t.value(m).clone()
}

fn seg(x: f64, y: f64) -> LaneSegment {
    LaneSegment::from_endpoints([x, y], [x + 2.0, y], RuleFlags::STRAIGHT)
}

#[test]
fn edgeless_map_is_per_node() {
    let (model, p) = Model::init(small_config(), 3).unwrap();
    let agents = vec![history(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])];
    let segs = vec![seg(0.0, 0.0), seg(4.0, 1.0), seg(30.0, -3.0)];
    let all = map_features(&model, &p, &build_lane_graph(segs.clone(), &[]).unwrap(), &agents);
    for (i, s) in segs.into_iter().enumerate() {
        let alone = map_features(&model, &p, &build_lane_graph(vec![s], &[]).unwrap(), &agents);
        assert_eq!(all.row(i), alone.row(0));
    }
}

#[test]
fn isomorphic_components_match() {
    let (model, p) = Model::init(small_config(), 4).unwrap();
    let agents = vec![history(&[[0.0, 1.0], [1.0, 1.0], [2.0, 1.0], [3.0, 1.0]])];
    let mut segs = vec![seg(0.0, 0.0), seg(2.0, 0.0), seg(4.0, 0.0)];
    segs.extend(segs.clone());
    let g = build_lane_graph(segs, &[(0, 1), (1, 2), (3, 4), (4, 5)]).unwrap();
    let m = map_features(&model, &p, &g, &agents);
    for i in 0..3 {
        assert_eq!(m.row(i), m.row(i + 3));
    }
}

#[test]
fn dilation_four_edge_only_affects_its_receptive_field() {
    let (model, p) = Model::init(small_config(), 5).unwrap();
    let agents = vec![history(&[[0.0, 0.5], [1.0, 0.5], [2.0, 0.5], [3.0, 0.5]])];
    // Two 10-node chains; the second lies far away.
    let mut segs = Vec::new();
    let mut pairs = Vec::new();
    for c in 0..2 {
        for i in 0..10 {
            segs.push(seg(2.0 * i as f64, 100.0 * c as f64));
            if i > 0 {
                pairs.push((10 * c + i - 1, 10 * c + i));
            }
        }
    }
    let g = build_lane_graph(segs, &pairs).unwrap();
    let (u, v) = (2, 6);
    assert!(g.successors(2)[u].contains(&v));
    let cut = g.without_edge(2, u, v);
    let (before, after) = (
        map_features(&model, &p, &g, &agents),
        map_features(&model, &p, &cut, &agents),
    );

    // The first layer changes u and v; each further layer spreads one hop
    // along any relation of the (original) graph.
    let mut reach: std::collections::BTreeSet<usize> = [u, v].into();
    for _ in 1..LANE_CONV_LAYERS {
        let mut next = reach.clone();
        for x in &reach {
            for level in 0..3 {
                next.extend(g.successors(level)[*x].iter());
                next.extend(g.predecessors(level)[*x].iter());
            }
        }
        reach = next;
    }
    for i in 0..20 {
        if reach.contains(&i) {
            continue;
        }
        assert_eq!(
            before.row(i),
            after.row(i),
            "node {i} outside the receptive field changed"
        );
    }
    assert_ne!(before.row(u), after.row(u));
    assert_ne!(before.row(v), after.row(v));
    assert!((10..20).all(|i| !reach.contains(&i)));
}

#[test]
fn neighbour_ball() {
    let cfg = ModelConfig::default();
    let segs = vec![
        seg(9.0, 0.0),
        seg(10.0, 0.0),
        seg(58.0, 0.0),
        seg(59.0, 0.0),
        seg(-11.0, 0.0),
    ];
    // Centers at x = 10, 11, 59, 60, -10.
    let g = build_lane_graph(segs, &[]).unwrap();
    let still = history(&[[0.0, 0.0], [0.0, 0.0]]);
    assert_eq!(select_map_neighbors(&still, &g, &cfg), vec![0, 4]);
    let moving = history(&[[-1.0, 0.0], [0.0, 0.0]]);
    // Center (25, 0), radius 35: x = 60 sits exactly on the boundary.
    assert_eq!(select_map_neighbors(&moving, &g, &cfg), vec![0, 1, 2, 3, 4]);
    let far = build_lane_graph(vec![seg(59.000001, 0.0)], &[]).unwrap();
    assert!(select_map_neighbors(&moving, &far, &cfg).is_empty());
}

fn conv_out(gc: &GraphConv, p: &ParamStore, a: &Tensor, edges: &Edges) -> Tensor {
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let out = gc.forward(&mut t, p, av, av, edges).unwrap();
    t.value(out.features).clone()
}

#[test]
fn agent_agent_radius_and_translation() {
    let (model, p) = Model::init(small_config(), 6).unwrap();
    let gc = model.a2a.as_ref().unwrap();
    assert!(agent_agent_edges(&[[0.0, 0.0]], 100.0).is_empty());
    assert!(agent_agent_edges(&[[0.0, 0.0], [150.0, 0.0]], 100.0).is_empty());
    let a = Tensor::matrix(3, 8, (0..24).map(|i| ((i * 7) % 5) as f64 * 0.1 - 0.2).collect());
    let pos = [[0.0, 0.0], [12.0, -3.0], [40.0, 7.0]];
    let moved: Vec<Vec2> = pos.iter().map(|q| [q[0] + 321.0, q[1] - 77.0]).collect();
    let (e1, e2) = (agent_agent_edges(&pos, 100.0), agent_agent_edges(&moved, 100.0));
    assert_eq!(e1.len(), 6);
    let (x, y) = (conv_out(gc, &p, &a, &e1), conv_out(gc, &p, &a, &e2));
    for (u, v) in x.data().iter().zip(y.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

fn branches(model: &Model, p: &ParamStore, a: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let b = model.differentiate_modes(&mut t, p, av).unwrap();
    t.value(b).clone()
}

#[test]
fn mode_differentiation() {
    let (model, mut p) = Model::init(small_config(), 7).unwrap();
    let a = Tensor::matrix(2, 8, (0..16).map(|i| i as f64 * 0.05 - 0.3).collect());
    let before = branches(&model, &p, &a);
    let id = p.id("modes/2/0/weight").unwrap();
    p.get_mut(id).data_mut()[0] += 0.5;
    let after = branches(&model, &p, &a);
    for k in 0..3 {
        let same = (0..2).all(|i| before.row(2 * k + i) == after.row(2 * k + i));
        assert_eq!(same, k != 2, "branch {k}");
    }
    zero_prefix(&mut p, "modes");
    let b = branches(&model, &p, &a);
    for k in 0..3 {
        for i in 0..2 {
            assert_eq!(b.row(2 * k + i), a.row(i));
        }
    }
    let (single, p1) = Model::init(ModelConfig { k: 1, ..small_config() }, 7).unwrap();
    assert_eq!(branches(&single, &p1, &a).shape(), &[2, 8]);
}

fn decode(model: &Model, p: &ParamStore, b: &Tensor, a: &Tensor, pos: &[Vec2]) -> (Tensor, Tensor) {
    let mut t = Tape::new();
    let (bv, av) = (t.constant(b.clone()), t.constant(a.clone()));
    let (tr, s) = model.decode_and_score(&mut t, p, bv, av, pos).unwrap();
    (t.value(tr).clone(), t.value(s).clone())
}

#[test]
fn decoding_and_scoring() {
    let (model, mut p) = Model::init(small_config(), 8).unwrap();
    let a = Tensor::matrix(2, 8, (0..16).map(|i| (i as f64 * 0.37).sin()).collect());
    let b = Tensor::matrix(6, 8, (0..48).map(|i| (i as f64 * 0.11).cos()).collect());
    let pos = [[1.0, 2.0], [-3.0, 0.5]];
    let (traj, scores) = decode(&model, &p, &b, &a, &pos);
    assert_eq!(traj.shape(), &[6, 6]);
    for i in 0..2 {
        assert!((scores.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // Identical branches: uniform scores.
    let same = Tensor::matrix(6, 8, (0..48).map(|i| (i % 8) as f64 * 0.1).collect());
    let (_, s) = decode(&model, &p, &same, &a, &pos);
    assert!(s.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));

    zero_prefix(&mut p, "decoder");
    let (traj, _) = decode(&model, &p, &b, &a, &pos);
    for k in 0..3 {
        for (i, q) in pos.iter().enumerate() {
            for c in traj.row(2 * k + i).chunks(2) {
                assert_eq!(c, q);
            }
        }
    }
}

#[test]
fn scores_are_a_distribution_for_random_params() {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..1000 {
        let (model, p) = Model::init(
            ModelConfig {
                d_a: 4,
                mlp_hidden: 4,
                ..small_config()
            },
            trial,
        )
        .unwrap();
        let a = Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(-3.0..3.0)).collect());
        let b = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-3.0..3.0)).collect());
        let (_, s) = decode(&model, &p, &b, &a, &[[0.0, 0.0], [1.0, 1.0]]);
        for i in 0..2 {
            assert!(s.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn topologies() {
    let rows = Topology::ablation_rows();
    let distinct: std::collections::HashSet<Topology> = rows.iter().map(|r| r.1).collect();
    assert_eq!(distinct.len(), 6);
    assert_eq!(rows[0].1, Topology::ONE_STAGE);
    assert_eq!(rows[5].1, Topology::FULL);
    assert_eq!("m2a_e,a2a".parse::<Topology>().unwrap(), Topology::ONE_STAGE);
    assert_eq!(Topology::FULL.to_string().parse::<Topology>().unwrap(), Topology::FULL);
    assert!("m2a_x".parse::<Topology>().is_err());

    let (_, p) = Model::init(
        ModelConfig {
            topology: Topology::ONE_STAGE,
            ..small_config()
        },
        1,
    )
    .unwrap();
    assert!(p
        .iter()
        .all(|(n, _)| !n.starts_with("m2a_s") && !n.starts_with("m2a_m")));
    assert!(p.iter().any(|(n, _)| n.starts_with("m2a_e")));
    for (_, topo) in rows {
        let cfg = ModelConfig {
            topology: topo,
            ..small_config()
        };
        let (model, p) = Model::init(cfg.clone(), 1).unwrap();
        let s = scene(ScenarioKind::LeftTurn, 1, &cfg);
        let out = model.forward(&p, &s, true).unwrap();
        assert_eq!(out.agents.len(), 3);
        assert_eq!(out.attention.iter().any(|r| r.stage == Stage::M2aS), topo.m2a_s);
        assert_eq!(out.attention.iter().any(|r| r.stage == Stage::M2aM), topo.m2a_m);
    }
}

#[test]
fn forward_is_deterministic_and_dumps_per_mode() {
    let cfg = small_config();
    let (model, p) = Model::init(cfg.clone(), 11).unwrap();
    let s = scene(ScenarioKind::LaneChangeBlocked, 4, &cfg);
    let (x, y) = (
        model.forward(&p, &s, true).unwrap(),
        model.forward(&p, &s, true).unwrap(),
    );
    assert_eq!(x, y);
    let focal = s.focal_index();
    let e_nodes: Vec<usize> = x
        .attention
        .iter()
        .filter(|r| r.stage == Stage::M2aE && r.agent == focal)
        .map(|r| r.node)
        .collect();
    assert!(!e_nodes.is_empty());
    for k in 0..cfg.k {
        let m_nodes: Vec<usize> = x
            .attention
            .iter()
            .filter(|r| r.stage == Stage::M2aM && r.agent == focal && r.mode == Some(k))
            .map(|r| r.node)
            .collect();
        assert_eq!(m_nodes, e_nodes);
    }
    let sum: f64 = x
        .attention
        .iter()
        .filter(|r| r.stage == Stage::M2aE && r.agent == focal)
        .map(|r| r.weight)
        .sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn history_length_is_checked() {
    let cfg = small_config();
    let (model, p) = Model::init(cfg.clone(), 1).unwrap();
    let wrong = scene(
        ScenarioKind::Straight,
        1,
        &ModelConfig {
            history_steps: 5,
            ..cfg
        },
    );
    assert!(matches!(
        model.forward(&p, &wrong, false),
        Err(NetError::HistoryLength { .. })
    ));
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = small_config();
    let (model, p) = Model::init(cfg.clone(), 12).unwrap();
    let s = scene(ScenarioKind::YieldCrossing, 2, &cfg);
    let (_, grads) = value_and_grad(&p, |t| {
        let out = model.forward_tape(t, &p, &s, false).map_err(|e| match e {
            NetError::Autodiff(e) => e,
            other => panic!("{other}"),
        })?;
        let sq = t.square(out.trajectories)?;
        let a = t.sum(sq)?;
        let n = out.n_agents;
        let w = t.constant(Tensor::matrix(
            n,
            cfg.k,
            (0..n * cfg.k).map(|i| (i as f64 * 1.3).sin()).collect(),
        ));
        let ws = t.mul(out.scores, w)?;
        let b = t.sum(ws)?;
        let a = t.scale(a, 1e-3)?;
        t.add(a, b)
    })
    .unwrap();
    for id in p.ids() {
        let g = grads.get(id);
        assert!(g.norm_sq() > 0.0, "{} has zero gradient", p.name(id));
    }
}

#[test]
fn batched_scenes_do_not_interact() {
    let cfg = small_config();
    let (model, p) = Model::init(cfg.clone(), 13).unwrap();
    let scenes: Vec<Scene> = ScenarioKind::ALL
        .iter()
        .enumerate()
        .map(|(i, k)| scene(*k, i as u64, &cfg))
        .collect();
    let refs: Vec<&Scene> = scenes.iter().collect();
    let batched = model.predict_batch(&p, &refs).unwrap();
    for (s, preds) in scenes.iter().zip(&batched) {
        let single = model.forward(&p, s, false).unwrap().agents;
        assert_eq!(single.len(), preds.len());
        for (x, y) in single.iter().zip(preds) {
            for (u, v) in x.scores.iter().zip(&y.scores) {
                assert!((u - v).abs() < 1e-12);
            }
            for (tx, ty) in x.trajectories.iter().zip(&y.trajectories) {
                for (u, v) in tx.iter().zip(ty) {
                    assert!((u[0] - v[0]).abs() < 1e-9 && (u[1] - v[1]).abs() < 1e-9);
                }
            }
        }
    }
}
