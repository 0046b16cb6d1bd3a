//! Affinity-graph segmentation: thresholded connected components and
//! marker-based watershed grow-out.

use std::collections::{BinaryHeap, VecDeque};

use crate::volume::{AffinityGraph, Axis, SegmentationVolume, VoxelCoord};

/// Join voxels connected by edges with affinity strictly above `threshold`;
/// voxels with no supra-threshold incident edge become background. Components
/// are labeled 1..n in first-voxel scan order.
pub fn segment_components(aff: &AffinityGraph, threshold: f32) -> SegmentationVolume {
    let dims = aff.dims();
    let mut out = SegmentationVolume::zeros(dims);
    let mut visited = vec![false; dims.voxels()];
    let mut queue = VecDeque::new();
    let mut next_id = 1u32;

    // All supra-threshold neighbors of `v`, both edge orientations.
    let neighbors = |v: VoxelCoord, buf: &mut Vec<VoxelCoord>| {
        buf.clear();
        for axis in Axis::ALL {
            if let Some(u) = v.step(axis, dims) {
                if aff.edge(v, axis) > threshold {
                    buf.push(u);
                }
            }
            let (x, y, z) = (v.x as isize, v.y as isize, v.z as isize);
            let back = match axis {
                Axis::X => (x - 1, y, z),
                Axis::Y => (x, y - 1, z),
                Axis::Z => (x, y, z - 1),
            };
            if back.0 >= 0 && back.1 >= 0 && back.2 >= 0 {
                let u = VoxelCoord::new(back.0 as usize, back.1 as usize, back.2 as usize);
                if aff.edge(u, axis) > threshold {
                    buf.push(u);
                }
            }
        }
    };

    let mut adjacent = Vec::with_capacity(6);
    for start in dims.iter() {
        let si = dims.linear(start);
        if visited[si] {
            continue;
        }
        neighbors(start, &mut adjacent);
        if adjacent.is_empty() {
            visited[si] = true;
            continue; // isolated voxel stays background
        }
        let id = next_id;
        next_id += 1;
        visited[si] = true;
        out.set_id(start, id);
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            neighbors(v, &mut adjacent);
            for &u in &adjacent {
                let ui = dims.linear(u);
                if !visited[ui] {
                    visited[ui] = true;
                    out.set_id(u, id);
                    queue.push_back(u);
                }
            }
        }
    }
    out
}

#[derive(PartialEq)]
struct FloodEdge {
    affinity: f32,
    seed_id: u32,
    target: usize,
}

impl Eq for FloodEdge {}

impl Ord for FloodEdge {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap: highest affinity first, then lowest seed id, then lowest
        // voxel linear index.
        self.affinity
            .total_cmp(&other.affinity)
            .then_with(|| other.seed_id.cmp(&self.seed_id))
            .then_with(|| other.target.cmp(&self.target))
    }
}

impl PartialOrd for FloodEdge {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Priority-flood the unassigned voxels onto the seed segmentation: the
/// globally maximum-affinity edge from an assigned voxel claims its target,
/// until every voxel carries an id. Seed voxels are never relabeled. With no
/// seeds the input is returned unchanged.
pub fn watershed_grow(seeds: &SegmentationVolume, aff: &AffinityGraph) -> SegmentationVolume {
    let dims = seeds.dims();
    debug_assert_eq!(dims, aff.dims());
    let mut out = seeds.clone();
    if out.ids().iter().all(|&id| id == 0) {
        return out;
    }
    let mut heap = BinaryHeap::new();

    let push_frontier =
        |heap: &mut BinaryHeap<FloodEdge>, out: &SegmentationVolume, v: VoxelCoord, id: u32| {
            for axis in Axis::ALL {
                if let Some(u) = v.step(axis, dims) {
                    if out.id(u) == 0 {
                        heap.push(FloodEdge {
                            affinity: aff.edge(v, axis),
                            seed_id: id,
                            target: dims.linear(u),
                        });
                    }
                }
                let (x, y, z) = (v.x as isize, v.y as isize, v.z as isize);
                let back = match axis {
                    Axis::X => (x - 1, y, z),
                    Axis::Y => (x, y - 1, z),
                    Axis::Z => (x, y, z - 1),
                };
                if back.0 >= 0 && back.1 >= 0 && back.2 >= 0 {
                    let u = VoxelCoord::new(back.0 as usize, back.1 as usize, back.2 as usize);
                    if out.id(u) == 0 {
                        heap.push(FloodEdge {
                            affinity: aff.edge(u, axis),
                            seed_id: id,
                            target: dims.linear(u),
                        });
                    }
                }
            }
        };

    for v in dims.iter() {
        let id = out.id(v);
        if id != 0 {
            push_frontier(&mut heap, &out, v, id);
        }
    }
    while let Some(edge) = heap.pop() {
        let v = dims.coord_of(edge.target);
        if out.id(v) != 0 {
            continue;
        }
        out.set_id(v, edge.seed_id);
        push_frontier(&mut heap, &out, v, edge.seed_id);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{affinities_from_segmentation, Dims, Volume};
    use rand::{Rng, SeedableRng};

    fn random_binary_affinities(dims: Dims, seed: u64) -> AffinityGraph {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut aff = AffinityGraph::zeros(dims);
        for v in dims.iter() {
            for axis in Axis::ALL {
                if v.step(axis, dims).is_some() && rng.gen_bool(0.5) {
                    aff.set_edge(v, axis, 1.0);
                }
            }
        }
        aff
    }

    /// Test-side union-find oracle.
    struct UnionFind {
        parent: Vec<usize>,
    }

    impl UnionFind {
        fn new(n: usize) -> UnionFind {
            UnionFind { parent: (0..n).collect() }
        }
        fn find(&mut self, x: usize) -> usize {
            let mut root = x;
            while self.parent[root] != root {
                root = self.parent[root];
            }
            let mut cur = x;
            while self.parent[cur] != root {
                let next = self.parent[cur];
                self.parent[cur] = root;
                cur = next;
            }
            root
        }
        fn union(&mut self, a: usize, b: usize) {
            let (ra, rb) = (self.find(a), self.find(b));
            if ra != rb {
                self.parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }

    fn oracle_partition(aff: &AffinityGraph, threshold: f32) -> Vec<Option<usize>> {
        let dims = aff.dims();
        let mut uf = UnionFind::new(dims.voxels());
        let mut has_edge = vec![false; dims.voxels()];
        for v in dims.iter() {
            for axis in Axis::ALL {
                if let Some(u) = v.step(axis, dims) {
                    if aff.edge(v, axis) > threshold {
                        uf.union(dims.linear(v), dims.linear(u));
                        has_edge[dims.linear(v)] = true;
                        has_edge[dims.linear(u)] = true;
                    }
                }
            }
        }
        (0..dims.voxels())
            .map(|i| if has_edge[i] { Some(uf.find(i)) } else { None })
            .collect()
    }

    fn same_partition(got: &SegmentationVolume, oracle: &[Option<usize>]) -> bool {
        use std::collections::HashMap;
        let mut fwd: HashMap<u32, usize> = HashMap::new();
        let mut bwd: HashMap<usize, u32> = HashMap::new();
        for (i, &id) in got.ids().iter().enumerate() {
            match (id, oracle[i]) {
                (0, None) => {}
                (0, Some(_)) | (_, None) => return false,
                (id, Some(root)) => {
                    if *fwd.entry(id).or_insert(root) != root {
                        return false;
                    }
                    if *bwd.entry(root).or_insert(id) != id {
                        return false;
                    }
                }
            }
        }
        true
    }

    #[test]
    fn all_one_affinities_form_a_single_object() {
        let dims = Dims::new(4, 4, 4);
        let mut aff = AffinityGraph::zeros(dims);
        for v in dims.iter() {
            for axis in Axis::ALL {
                if v.step(axis, dims).is_some() {
                    aff.set_edge(v, axis, 1.0);
                }
            }
        }
        let seg = segment_components(&aff, 0.5);
        assert!(seg.ids().iter().all(|&id| id == 1));
    }

    #[test]
    fn all_zero_affinities_are_background() {
        let seg = segment_components(&AffinityGraph::zeros(Dims::new(3, 3, 3)), 0.5);
        assert!(seg.ids().iter().all(|&id| id == 0));
    }

    #[test]
    fn components_match_union_find_oracle() {
        for seed in 0..20 {
            let aff = random_binary_affinities(Dims::new(6, 6, 6), seed);
            let seg = segment_components(&aff, 0.5);
            let oracle = oracle_partition(&aff, 0.5);
            assert!(same_partition(&seg, &oracle), "seed {seed}");
        }
    }

    #[test]
    fn component_ids_are_scan_ordered() {
        let aff = random_binary_affinities(Dims::new(5, 5, 5), 42);
        let seg = segment_components(&aff, 0.5);
        let mut seen_max = 0u32;
        for &id in seg.ids() {
            if id != 0 && id > seen_max {
                assert_eq!(id, seen_max + 1, "first appearances must count up");
                seen_max = id;
            }
        }
    }

    #[test]
    fn single_seed_floods_everything() {
        let dims = Dims::new(4, 4, 4);
        let mut seeds = SegmentationVolume::zeros(dims);
        seeds.set_id(VoxelCoord::new(2, 2, 2), 7);
        let aff = random_binary_affinities(dims, 3);
        let grown = watershed_grow(&seeds, &aff);
        assert!(grown.ids().iter().all(|&id| id == 7));
    }

    #[test]
    fn middle_voxel_joins_the_stronger_path() {
        let dims = Dims::new(1, 1, 5);
        let mut seeds = SegmentationVolume::zeros(dims);
        seeds.set_id(VoxelCoord::new(0, 0, 0), 1);
        seeds.set_id(VoxelCoord::new(0, 0, 4), 2);
        let mut vol = Volume::zeros(dims, 3);
        for (z, a) in [0.9f32, 0.2, 0.8, 0.9].iter().enumerate() {
            vol.set(0, 0, z, Axis::Z.channel(), *a);
        }
        let aff = AffinityGraph::new(vol).unwrap();
        let grown = watershed_grow(&seeds, &aff);
        let ids: Vec<u32> = grown.ids().to_vec();
        assert_eq!(ids, vec![1, 1, 2, 2, 2]);
    }

    #[test]
    fn grow_covers_volume_and_preserves_seed_count() {
        let dims = Dims::new(8, 8, 8);
        let aff = random_binary_affinities(dims, 9);
        let seeds = segment_components(&aff, 0.5);
        if seeds.object_count() == 0 {
            return;
        }
        let grown = watershed_grow(&seeds, &aff);
        assert!(grown.ids().iter().all(|&id| id != 0), "no background after grow-out");
        assert_eq!(grown.object_count(), seeds.object_count());
        //

        for v in dims.iter() {
            if seeds.id(v) != 0 {
                assert_eq!(grown.id(v), seeds.id(v), "seeds never relabel");
            }
        }
    }

    #[test]
    fn grow_without_seeds_returns_input() {
        let dims = Dims::new(3, 3, 3);
        let seeds = SegmentationVolume::zeros(dims);
        let aff = random_binary_affinities(dims, 1);
        assert_eq!(watershed_grow(&seeds, &aff), seeds);
    }

    #[test]
    fn grow_is_idempotent_on_total_segmentations() {
        let dims = Dims::new(6, 6, 6);
        let aff = random_binary_affinities(dims, 5);
        let seeds = segment_components(&aff, 0.5);
        if seeds.object_count() == 0 {
            return;
        }
        let once = watershed_grow(&seeds, &aff);
        let twice = watershed_grow(&once, &aff);
        assert_eq!(once, twice);
    }

    #[test]
    fn supra_threshold_edges_shrink_and_partition_refines_with_threshold() {
        // Raising the threshold removes edges monotonically. The induced
        // partition (components plus background singletons) can only refine,
        // so component count + background voxel count never decreases. The
        // bare component count is NOT monotone: a two-voxel component that
        // loses its last edge drops to background.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let dims = Dims::new(6, 6, 6);
            let mut aff = AffinityGraph::zeros(dims);
            for v in dims.iter() {
                for axis in Axis::ALL {
                    if v.step(axis, dims).is_some() {
                        aff.set_edge(v, axis, rng.gen_range(0.0..1.0));
                    }
                }
            }
            let mut last_edges = usize::MAX;
            let mut last_blocks = 0usize;
            for t in [0.0f32, 0.2, 0.4, 0.6, 0.8, 0.95, 1.0] {
                let mut edges = 0usize;
                for v in dims.iter() {
                    for axis in Axis::ALL {
                        if v.step(axis, dims).is_some() && aff.edge(v, axis) > t {
                            edges += 1;
                        }
                    }
                }
                assert!(edges <= last_edges, "trial {trial}: edge count grew at t={t}");
                last_edges = edges;
                let seg = segment_components(&aff, t);
                let background = seg.ids().iter().filter(|&&id| id == 0).count();
                let blocks = seg.object_count() + background;
                assert!(
                    blocks >= last_blocks,
                    "trial {trial}: partition coarsened at t={t} ({blocks} < {last_blocks})"
                );
                last_blocks = blocks;
            }
        }
    }

    #[test]
    fn round_trip_recovers_face_connected_foreground() {
        // affinities_from_segmentation then components at 0.5 must reproduce
        // the foreground partition (up to relabeling) when objects are
        // face-connected.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let dims = Dims::new(6, 6, 6);
            let mut seg = SegmentationVolume::zeros(dims);
            for v in dims.iter() {
                seg.set_id(v, rng.gen_range(0..3));
            }
            // Make objects face-connected by relabeling with the oracle over
            // ground-truth affinities.
            let (aff, _) = affinities_from_segmentation(&seg);
            let connected = segment_components(&aff, 0.5);
            let (aff2, _) = affinities_from_segmentation(&connected);
            let back = segment_components(&aff2, 0.5);
            assert_eq!(back, connected);
        }
    }
}
