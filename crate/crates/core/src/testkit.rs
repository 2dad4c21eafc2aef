//! Random instance generators and brute-force oracles shared by the test
//! suites.

use rand::seq::SliceRandom;
use rand::Rng;
use nalgebra::DMatrix;
use rand_distr::StandardNormal;

use crate::evo::{initialize_assignment, ControlSequence};
use crate::rl::{log_softmax, Batch, Mlp, Policy};
use crate::sim::SimState;
use crate::truss::{MirrorPlane, TrussGraph, Vec3, MIRROR_TOLERANCE};

/// Shape limits for [`random_mirrored_truss`].
#[derive(Debug, Clone, Copy)]
pub struct TrussShape {
    pub min_edges: usize,
    pub max_edges: usize,
    pub min_channels: usize,
    pub max_channels: usize,
}

impl Default for TrussShape {
    fn default() -> Self {
        Self {
            min_edges: 8,
            max_edges: 40,
            min_channels: 2,
            max_channels: 4,
        }
    }
}

/// A connected truss mirrored about the plane y = 0, with a channel mirror map
/// chosen so that a valid symmetric assignment exists. Vertices on the plane
/// come first, followed by mirror pairs `(2k, 2k+1)` after them.
pub fn random_mirrored_truss<R: Rng + ?Sized>(rng: &mut R, shape: TrussShape) -> TrussGraph {
    loop {
        if let Some(g) = try_truss(rng, shape) {
            return g;
        }
    }
}

fn try_truss<R: Rng + ?Sized>(rng: &mut R, shape: TrussShape) -> Option<TrussGraph> {
    let n_plane = rng.random_range(1..=3);
    let n_pairs = rng.random_range(2..=6);
    let mut vertices = Vec::new();
    for _ in 0..n_plane {
        vertices.push(Vec3::new(
            rng.random_range(-1.0..1.0),
            0.0,
            rng.random_range(0.0..1.0),
        ));
    }
    for _ in 0..n_pairs {
        let p = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(0.1..1.0),
            rng.random_range(0.0..1.0),
        );
        vertices.push(p);
        vertices.push(Vec3::new(p.x, -p.y, p.z));
    }
    let n_v = vertices.len();
    let mirror = |v: usize| {
        if v < n_plane {
            v
        } else {
            n_plane + ((v - n_plane) ^ 1)
        }
    };

    let mut orbits: Vec<Vec<[usize; 2]>> = Vec::new();
    for a in 0..n_v {
        for b in a + 1..n_v {
            let (ma, mb) = (mirror(a), mirror(b));
            let image = [ma.min(mb), ma.max(mb)];
            if image < [a, b] {
                continue;
            }
            let mut orbit = vec![[a, b]];
            if image != [a, b] {
                orbit.push(image);
            }
            orbits.push(orbit);
        }
    }
    orbits.shuffle(rng);
    let target = rng.random_range(shape.min_edges..=shape.max_edges);
    let mut edges = Vec::new();
    for orbit in orbits {
        if edges.len() + orbit.len() <= target {
            edges.extend(orbit);
        }
    }
    if edges.len() < shape.min_edges {
        return None;
    }

    let graph = TrussGraph::new(vertices, edges, 1, vec![], 0).ok()?;
    let self_edges = graph
        .edges()
        .iter()
        .filter(|&&[a, b]| mirror(a) == a && mirror(b) == b || mirror(a) == b)
        .count();
    let n_channels = rng.random_range(shape.min_channels..=shape.max_channels);
    // Self-mirrored channels: needed iff there are self-mirrored edges, and
    // of the same parity as the channel count.
    let n_self = if self_edges == 0 {
        if n_channels % 2 == 1 {
            return None;
        }
        0
    } else {
        let mut s = rng.random_range(1..=n_channels.min(self_edges));
        if (n_channels - s) % 2 == 1 {
            s = if s > 1 { s - 1 } else { s + 1 };
        }
        if s > n_channels || s > self_edges {
            return None;
        }
        s
    };
    let mut channel_mirror: Vec<usize> = (0..n_self).collect();
    let mut c = n_self;
    while c + 1 < n_channels {
        channel_mirror.push(c + 1);
        channel_mirror.push(c);
        c += 2;
    }

    let graph = TrussGraph::new(
        graph.vertices().to_vec(),
        graph.edges().to_vec(),
        n_channels,
        vec![],
        0,
    )
    .ok()?
    .with_mirror(
        MirrorPlane::new(Vec3::zeros(), Vec3::y()).ok()?,
        MIRROR_TOLERANCE,
        Some(channel_mirror),
    )
    .ok()?;
    initialize_assignment(&graph, rng).ok()?;
    Some(graph)
}

/// Random rating vectors on a coarse integer grid, so ties and duplicates
/// are common.
pub fn random_ratings<R: Rng + ?Sized>(
    rng: &mut R,
    max_len: usize,
    min_objectives: usize,
    max_objectives: usize,
) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=max_len);
    let m = rng.random_range(min_objectives..=max_objectives);
    (0..n)
        .map(|_| (0..m).map(|_| f64::from(rng.random_range(0..6u8))).collect())
        .collect()
}

/// Mixed population for NSGA checks: half grid-valued, half continuous.
pub fn random_population<R: Rng + ?Sized>(rng: &mut R, max_len: usize) -> Vec<Vec<f64>> {
    if rng.random_bool(0.5) {
        random_ratings(rng, max_len, 2, 4)
    } else {
        let n = rng.random_range(1..=max_len);
        let m = rng.random_range(2..=4);
        (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }
}

fn brute_dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y) && a.iter().zip(b).any(|(x, y)| x > y)
}

/// Quadratic front peeling: repeatedly removes the members nobody remaining
/// dominates.
pub fn brute_fronts(r: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut remaining: Vec<usize> = (0..r.len()).collect();
    let mut fronts = Vec::new();
    while !remaining.is_empty() {
        let front: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| !remaining.iter().any(|&j| brute_dominates(&r[j], &r[i])))
            .collect();
        remaining.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

/// Crowding distance from neighbour scans under the (value, index) order.
pub fn brute_crowding(front: &[Vec<f64>]) -> Vec<f64> {
    let n = front.len();
    if n == 1 {
        return vec![f64::INFINITY];
    }
    let mut d = vec![0.0; n];
    for m in 0..front[0].len() {
        let lt = |a: usize, b: usize| {
            front[a][m] < front[b][m] || (front[a][m] == front[b][m] && a < b)
        };
        let lo = (0..n).map(|i| front[i][m]).fold(f64::INFINITY, f64::min);
        let hi = (0..n).map(|i| front[i][m]).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 0.0 {
            continue;
        }
        for i in 0..n {
            let below = (0..n).filter(|&j| lt(j, i)).reduce(|a, b| if lt(a, b) { b } else { a });
            let above = (0..n).filter(|&j| lt(i, j)).reduce(|a, b| if lt(a, b) { a } else { b });
            match (below, above) {
                (Some(b), Some(a)) => d[i] += (front[a][m] - front[b][m]) / (hi - lo),
                _ => d[i] = f64::INFINITY,
            }
        }
    }
    d
}

/// Whole fronts while they fit, then the most crowded-apart members of the
/// overflowing front (ties to the lower index). Returns sorted indices.
pub fn brute_select(r: &[Vec<f64>], keep: usize) -> Vec<usize> {
    let keep = keep.min(r.len());
    let mut chosen = Vec::new();
    for front in brute_fronts(r) {
        if chosen.len() + front.len() <= keep {
            chosen.extend(front);
            continue;
        }
        let members: Vec<Vec<f64>> = front.iter().map(|&i| r[i].clone()).collect();
        let cd = brute_crowding(&members);
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| cd[b].partial_cmp(&cd[a]).unwrap().then(front[a].cmp(&front[b])));
        let room = keep - chosen.len();
        chosen.extend(order[..room].iter().map(|&k| front[k]));
        break;
    }
    chosen.sort();
    chosen
}

/// Reflects a state through the graph's mirror, permuting vertices, edges and
/// channels to their partners.
pub fn mirror_state(graph: &TrussGraph, s: &SimState) -> SimState {
    let plane = graph.mirror().expect("mirrored graph").plane;
    SimState {
        positions: (0..graph.n_vertices())
            .map(|v| plane.reflect_point(&s.positions[graph.vertex_mirror(v)]))
            .collect(),
        velocities: (0..graph.n_vertices())
            .map(|v| plane.reflect_vector(&s.velocities[graph.vertex_mirror(v)]))
            .collect(),
        rest_lengths: (0..graph.n_edges())
            .map(|e| s.rest_lengths[graph.edge_mirror(e)])
            .collect(),
        channel_states: (0..graph.n_channels())
            .map(|c| s.channel_states[graph.channel_mirror(c)])
            .collect(),
        time: s.time,
    }
}

/// Schedule with each channel column replaced by its mirror partner's.
pub fn mirror_control(graph: &TrussGraph, xi: &ControlSequence) -> ControlSequence {
    ControlSequence::new(
        xi.bits()
            .iter()
            .map(|row| (0..graph.n_channels()).map(|c| row[graph.channel_mirror(c)]).collect())
            .collect(),
    )
}

/// Central differences of `f` with respect to every parameter of `net`.
pub fn central_difference(net: &Mlp, h: f64, f: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let base = net.params();
    let mut probe = net.clone();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_params(&p);
            let up = f(&probe);
            p[i] = base[i] - h;
            probe.set_params(&p);
            let down = f(&probe);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest |a − n| / max(|a|, |n|), skipping entries where both are below 1e-8.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-8 {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Overwrites every actor and critic parameter with a standard normal draw.
pub fn randomize_policy<R: Rng + ?Sized>(policy: &mut Policy, rng: &mut R) {
    for net in [&mut policy.actor, &mut policy.critic] {
        let p: Vec<f64> = (0..net.n_params()).map(|_| rng.sample(StandardNormal)).collect();
        net.set_params(&p);
    }
}

/// Random batch whose old log-probs sit at the current ones shifted by the
/// cycled `ratio_offsets`, so ratios are exp(−offset).
pub fn random_batch<R: Rng + ?Sized>(
    policy: &Policy,
    n: usize,
    rng: &mut R,
    ratio_offsets: &[f64],
) -> Batch {
    let mut b = Batch::default();
    for i in 0..n {
        let obs: Vec<f64> = (0..policy.observation_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let a = rng.random_range(0..policy.n_actions());
        let logp = log_softmax(&policy.logits(&obs))[a];
        b.old_log_probs.push(logp + ratio_offsets[i % ratio_offsets.len()]);
        b.observations.push(obs);
        b.actions.push(a);
        b.advantages.push(rng.random_range(-2.0..2.0));
        b.returns.push(rng.random_range(-2.0..2.0));
    }
    b
}

/// Infinitesimal rigidity: the rigidity matrix has rank 3V − 6. Trusses that
/// fail this have mechanisms that axial damping cannot reach.
pub fn is_infinitesimally_rigid(graph: &TrussGraph) -> bool {
    let n = graph.n_vertices();
    if n < 3 {
        return graph.n_edges() + 1 >= n;
    }
    let mut r = DMatrix::<f64>::zeros(graph.n_edges().max(1), 3 * n);
    for (e, &[a, b]) in graph.edges().iter().enumerate() {
        let d = graph.vertices()[a] - graph.vertices()[b];
        for k in 0..3 {
            r[(e, 3 * a + k)] = d[k];
            r[(e, 3 * b + k)] = -d[k];
        }
    }
    let sv = r.svd(false, false).singular_values;
    let top = sv.max();
    let rank = sv.iter().filter(|&&s| s > 1e-9 * top).count();
    rank == 3 * n - 6
}
