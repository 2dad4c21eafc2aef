use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgt_core::testkit::{random_mirrored_truss, TrussShape};
use vgt_core::truss::*;

/// Union-find over edges that carry `channel` and share a vertex.
fn union_find_connected(graph: &TrussGraph, labels: &[i32], channel: i32) -> Option<bool> {
    let members: Vec<usize> = (0..graph.n_edges()).filter(|&e| labels[e] == channel).collect();
    if members.is_empty() {
        return None;
    }
    let mut parent: Vec<usize> = (0..graph.n_edges()).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    let edges = graph.edges();
    for (i, &a) in members.iter().enumerate() {
        for &b in &members[i + 1..] {
            let [a0, a1] = edges[a];
            let [b0, b1] = edges[b];
            if a0 == b0 || a0 == b1 || a1 == b0 || a1 == b1 {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    let root = find(&mut parent, members[0]);
    Some(members.iter().all(|&m| find(&mut parent, m) == root))
}

#[test]
fn connectivity_agrees_with_union_find() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let g = random_mirrored_truss(&mut rng, TrussShape::default());
        let labels: Vec<i32> = (0..g.n_edges())
            .map(|_| rng.random_range(-1..g.n_channels() as i32))
            .collect();
        for c in 0..g.n_channels() {
            let got = channel_subgraph_connected(&g, &labels, c);
            match union_find_connected(&g, &labels, c as i32) {
                None => assert!(matches!(got, Err(TrussError::EmptyChannel(x)) if x == c)),
                Some(expect) => assert_eq!(got.unwrap(), expect),
            }
        }
    }
}

#[test]
fn incident_channels_match_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..300 {
        let g = random_mirrored_truss(&mut rng, TrussShape::default());
        let labels: Vec<i32> = (0..g.n_edges())
            .map(|_| rng.random_range(-1..g.n_channels() as i32))
            .collect();
        for e in 0..g.n_edges() {
            let [a, b] = g.edges()[e];
            let mut expect: Vec<usize> = Vec::new();
            for (f, &[c, d]) in g.edges().iter().enumerate() {
                let touches = f != e && (c == a || c == b || d == a || d == b);
                if touches && labels[f] >= 0 && !expect.contains(&(labels[f] as usize)) {
                    expect.push(labels[f] as usize);
                }
            }
            expect.sort();
            assert_eq!(channels_incident_edge(&g, &labels, e), expect);
        }
    }
}

#[test]
fn mirror_maps_are_geometric_involutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let g = random_mirrored_truss(&mut rng, TrussShape::default());
        let plane = g.mirror().unwrap().plane;
        for v in 0..g.n_vertices() {
            let m = g.vertex_mirror(v);
            assert_eq!(g.vertex_mirror(m), v);
            let d = plane.reflect_point(&g.vertices()[v]) - g.vertices()[m];
            assert!(d.norm() < 1e-9);
        }
        for e in 0..g.n_edges() {
            let m = g.edge_mirror(e);
            assert_eq!(g.edge_mirror(m), e);
            let [a, b] = g.edges()[e];
            let (ma, mb) = (g.vertex_mirror(a), g.vertex_mirror(b));
            assert_eq!(g.edges()[m], [ma.min(mb), ma.max(mb)]);
            assert_eq!(g.is_self_mirrored_edge(e), m == e);
        }
        for c in 0..g.n_channels() {
            assert_eq!(g.channel_mirror(g.channel_mirror(c)), c);
        }
        // Half graph: one representative per orbit.
        let half = g.half_edges();
        for e in 0..g.n_edges() {
            let m = g.edge_mirror(e);
            let count = half.iter().filter(|&&h| h == e || h == m).count();
            assert_eq!(count, 1, "edge {e} orbit represented {count} times");
        }
    }
}

#[test]
fn invariant_suite_flags_split_and_asymmetric_assignments() {
    let f = TrussFile {
        vertices: vec![
            [0.0, 0.5, 0.0],
            [0.0, -0.5, 0.0],
            [1.0, 0.5, 0.0],
            [1.0, -0.5, 0.0],
            [2.0, 0.5, 0.0],
            [2.0, -0.5, 0.0],
        ],
        edges: vec![[0, 2], [1, 3], [2, 4], [3, 5], [0, 1]],
        n_channels: 3,
        mirror_plane: Some(PlaneSpec {
            point: [0.0; 3],
            normal: [0.0, 1.0, 0.0],
        }),
        fixed_groups: vec![],
        center_edge: 0,
        channel_mirror: None,
    };
    let g = f.build().unwrap();
    // The rung is self-mirrored and carries channel 2; rails carry the pair 0/1.
    let valid = vec![0, 1, 0, 1, 2];
    assert!(is_valid_assignment(&g, &valid));

    let split = vec![0, 1, 1, 0, 2];
    let report = check_assignment(&g, &split);
    let failed: Vec<&str> = report.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failed.contains(&"connectivity"), "{report:?}");

    // Relabel one rail edge without touching its mirror image.
    let asym = vec![0, 1, 0, 0, 2];
    let report = check_assignment(&g, &asym);
    let failed: Vec<&str> = report.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failed.contains(&"symmetry"), "{report:?}");

    let report = check_assignment(&g, &[0, 1, 0, 1, 0]);
    assert!(report.iter().any(|r| r.name == "coverage" && !r.passed));
}

#[test]
fn truss_file_round_trips_through_json() {
    let f = TrussFile {
        vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1.0, 0.25]],
        edges: vec![[0, 1], [1, 2], [2, 0]],
        n_channels: 2,
        mirror_plane: None,
        fixed_groups: vec![vec![0, 1]],
        center_edge: 0,
        channel_mirror: None,
    };
    let text = serde_json::to_string(&f).unwrap();
    let back: TrussFile = serde_json::from_str(&text).unwrap();
    assert_eq!(back, f);
    let g = back.build().unwrap();
    assert_eq!(g.edges()[2], [0, 2]);
}

#[test]
fn bundled_table_truss_is_consistent() {
    let g = TrussFile::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/examples/table.json"))
        .unwrap()
        .build()
        .unwrap();
    assert_eq!(g.n_channels(), 3);
    assert_eq!(g.fixed_groups()[0].len(), 4);
    assert!(g.is_self_mirrored_edge(g.center_edge()));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = vgt_core::evo::initialize_assignment(&g, &mut rng).unwrap();
    assert!(is_valid_assignment(&g, a.channels()));
}

#[test]
fn rigidity_check_separates_braced_from_floppy() {
    use vgt_core::testkit::is_infinitesimally_rigid;
    let tet = TrussGraph::new(
        vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
        vec![[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]],
        1,
        vec![],
        0,
    )
    .unwrap();
    assert!(is_infinitesimally_rigid(&tet));
    // Drop one brace: the apex can swing.
    let hinge = TrussGraph::new(
        tet.vertices().to_vec(),
        vec![[0, 1], [0, 2], [0, 3], [1, 2], [1, 3]],
        1,
        vec![],
        0,
    )
    .unwrap();
    assert!(!is_infinitesimally_rigid(&hinge));
    let square = TrussGraph::new(
        vec![Vec3::zeros(), Vec3::x(), Vec3::new(1.0, 1.0, 0.0), Vec3::y()],
        vec![[0, 1], [1, 2], [2, 3], [0, 3], [0, 2]],
        1,
        vec![],
        0,
    )
    .unwrap();
    // Planar and braced, but flat: out-of-plane motion is free.
    assert!(!is_infinitesimally_rigid(&square));
}
