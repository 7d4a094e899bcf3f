//! Synthetic ground-truth taxonomies and encounters.
//!
//! The generator builds a perfectly balanced tree of prototypes: the root
//! sits at the origin and every child is its parent's prototype plus an
//! isotropic Gaussian offset whose spread shrinks with depth. An encounter of
//! a leaf shows one view per node on the root-exclusive path to that leaf,
//! each view being the node's prototype plus view noise. Two leaves sharing
//! an ancestor therefore share (noisy copies of) that ancestor's view, which
//! is what makes a common genus detectable from embeddings alone.
//!
//! Nodes are labelled by their path from the root, e.g. `root/2/0/1`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingVector, Encounter, EncounterId, IdAllocator, VisualObject};

pub const ROOT_LABEL: &str = "root";

/// When deserialized, omitted fields take their defaults; omitted offset
/// scales follow the (possibly overridden) depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialConfig")]
pub struct GeneratorConfig {
    /// Levels below the root.
    pub depth: usize,
    pub branching: usize,
    pub encounters_per_leaf: usize,
    pub dimension: usize,
    /// Per-coordinate standard deviation of a child's offset from its parent,
    /// one entry per level (level 1 first).
    pub level_offset_scales: Vec<f64>,
    pub view_noise_sigma: f64,
    pub seed: u64,
}

#[derive(Deserialize)]
struct PartialConfig {
    depth: Option<usize>,
    branching: Option<usize>,
    encounters_per_leaf: Option<usize>,
    dimension: Option<usize>,
    level_offset_scales: Option<Vec<f64>>,
    view_noise_sigma: Option<f64>,
    seed: Option<u64>,
}

impl From<PartialConfig> for GeneratorConfig {
    fn from(p: PartialConfig) -> Self {
        let d = GeneratorConfig::default();
        let mut cfg = GeneratorConfig::balanced(
            p.depth.unwrap_or(d.depth),
            p.branching.unwrap_or(d.branching),
            p.encounters_per_leaf.unwrap_or(d.encounters_per_leaf),
        );
        cfg.dimension = p.dimension.unwrap_or(cfg.dimension);
        if let Some(scales) = p.level_offset_scales {
            cfg.level_offset_scales = scales;
        }
        cfg.view_noise_sigma = p.view_noise_sigma.unwrap_or(cfg.view_noise_sigma);
        cfg.seed = p.seed.unwrap_or(cfg.seed);
        cfg
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::balanced(4, 3, 5)
    }
}

impl GeneratorConfig {
    /// Default parameters for a balanced tree of the given shape: dimension
    /// 32, offsets halving per level down to 1.0 at the leaves, view noise
    /// 0.25.
    pub fn balanced(depth: usize, branching: usize, encounters_per_leaf: usize) -> Self {
        Self {
            depth,
            branching,
            encounters_per_leaf,
            dimension: 32,
            level_offset_scales: default_level_scales(depth),
            view_noise_sigma: 0.25,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if self.branching == 0 {
            return Err(Error::invalid("branching must be at least 1"));
        }
        if self.encounters_per_leaf == 0 {
            return Err(Error::invalid("encounters_per_leaf must be at least 1"));
        }
        if self.dimension == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if self.level_offset_scales.len() != self.depth {
            return Err(Error::invalid(format!(
                "expected {} level offset scales, got {}",
                self.depth,
                self.level_offset_scales.len()
            )));
        }
        if self.level_offset_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("level offset scales must be positive and finite"));
        }
        if self.level_offset_scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("level offset scales must be strictly decreasing"));
        }
        if !(self.view_noise_sigma.is_finite() && self.view_noise_sigma > 0.0) {
            return Err(Error::invalid("view noise sigma must be positive and finite"));
        }
        // Leaf count must fit comfortably in memory.
        let leaves = (self.branching as u128).checked_pow(self.depth as u32);
        if leaves.is_none_or(|n| n * self.encounters_per_leaf as u128 > 10_000_000) {
            return Err(Error::invalid("tree too large"));
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }

    pub fn encounter_count(&self) -> usize {
        self.leaf_count() * self.encounters_per_leaf
    }
}

/// `2^(depth-1), ..., 2, 1`.
pub fn default_level_scales(depth: usize) -> Vec<f64> {
    (0..depth).map(|l| 2f64.powi((depth - 1 - l) as i32)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthNode {
    pub label: String,
    pub prototype: EmbeddingVector,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTree {
    pub nodes: Vec<GroundTruthNode>,
}

impl GroundTruthTree {
    pub fn root(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].children.is_empty())
    }

    pub fn find(&self, label: &str) -> Option<usize> {
        // Labels encode the child index at each level.
        let mut comps = label.split('/');
        if comps.next() != Some(ROOT_LABEL) {
            return None;
        }
        let mut node = 0;
        for c in comps {
            let idx: usize = c.parse().ok()?;
            node = *self.nodes[node].children.get(idx)?;
        }
        Some(node)
    }

    /// Nodes on the path from the root (exclusive) down to `node` (inclusive).
    pub fn path_from_root(&self, node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(cur);
            cur = p;
        }
        path.reverse();
        path
    }
}

/// Builds the balanced prototype tree. Nodes are stored breadth-first, so the
/// root is index 0 and leaves come last.
pub fn generate_tree(config: &GeneratorConfig) -> Result<GroundTruthTree> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nodes = vec![GroundTruthNode {
        label: ROOT_LABEL.to_owned(),
        prototype: EmbeddingVector::zeros(config.dimension),
        parent: None,
        children: Vec::new(),
        level: 0,
    }];
    let mut frontier = vec![0usize];
    for level in 1..=config.depth {
        let offset = Normal::new(0.0, config.level_offset_scales[level - 1])
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut next = Vec::with_capacity(frontier.len() * config.branching);
        for &parent in &frontier {
            for k in 0..config.branching {
                let prototype: Vec<f64> = nodes[parent]
                    .prototype
                    .as_slice()
                    .iter()
                    .map(|x| x + offset.sample(&mut rng))
                    .collect();
                let id = nodes.len();
                nodes.push(GroundTruthNode {
                    label: format!("{}/{k}", nodes[parent].label),
                    prototype: EmbeddingVector::from_raw(prototype),
                    parent: Some(parent),
                    children: Vec::new(),
                    level,
                });
                nodes[parent].children.push(id);
                next.push(id);
            }
        }
        frontier = next;
    }
    Ok(GroundTruthTree { nodes })
}

/// Samples one encounter of `leaf`: one noisy view per node on the
/// root-exclusive path, in shuffled order.
pub fn generate_encounter<R: Rng + ?Sized>(
    tree: &GroundTruthTree,
    leaf: usize,
    id: EncounterId,
    view_noise_sigma: f64,
    rng: &mut R,
    ids: &mut IdAllocator,
) -> Result<Encounter> {
    let node = tree
        .nodes
        .get(leaf)
        .ok_or_else(|| Error::invalid(format!("node {leaf} is not in the tree")))?;
    if !node.children.is_empty() {
        return Err(Error::invalid(format!("node {} is not a leaf", node.label)));
    }
    let noise = Normal::new(0.0, view_noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut views: Vec<EmbeddingVector> = tree
        .path_from_root(leaf)
        .into_iter()
        .map(|n| {
            let v = tree.nodes[n]
                .prototype
                .as_slice()
                .iter()
                .map(|x| x + noise.sample(rng))
                .collect();
            EmbeddingVector::from_raw(v)
        })
        .collect();
    views.shuffle(rng);
    let visual_objects = views
        .into_iter()
        .enumerate()
        .map(|(k, embedding)| VisualObject {
            id: ids.next_id(),
            embedding,
            frame_span: (k, k),
            encounter_id: id.clone(),
        })
        .collect();
    Encounter::new(id, visual_objects, Some(node.label.clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tree: GroundTruthTree,
    /// Leaf-major order: all encounters of the first leaf, then the next.
    pub encounters: Vec<Encounter>,
}

/// Generates the tree and `encounters_per_leaf` encounters for every leaf.
/// Each encounter draws from its own ChaCha stream (keyed by its index), so
/// the result does not depend on generation order.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    let tree = generate_tree(config)?;
    let mut ids = IdAllocator::default();
    let mut encounters = Vec::with_capacity(config.encounter_count());
    let leaves: Vec<usize> = tree.leaves().collect();
    for (li, &leaf) in leaves.iter().enumerate() {
        for j in 0..config.encounters_per_leaf {
            let index = (li * config.encounters_per_leaf + j) as u64;
            let mut rng = encounter_rng(config.seed, index);
            let id = EncounterId(format!("{}#{j}", tree.nodes[leaf].label));
            encounters.push(generate_encounter(
                &tree,
                leaf,
                id,
                config.view_noise_sigma,
                &mut rng,
                &mut ids,
            )?);
        }
    }
    Ok(Dataset { tree, encounters })
}

fn encounter_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 is used by the tree prototypes.
    rng.set_stream(index + 1);
    rng
}

/// Label-path helpers shared by the simulated oracle and the annotators.
pub mod labels {
    pub fn components(label: &str) -> impl Iterator<Item = &str> {
        label.split('/')
    }

    /// Number of edges from the root.
    pub fn depth(label: &str) -> usize {
        components(label).count() - 1
    }

    pub fn is_ancestor_or_self(ancestor: &str, node: &str) -> bool {
        node == ancestor
            || (node.starts_with(ancestor) && node.as_bytes().get(ancestor.len()) == Some(&b'/'))
    }

    /// Lowest common ancestor of two labels of the same tree.
    pub fn common_ancestor(a: &str, b: &str) -> String {
        components(a)
            .zip(components(b))
            .take_while(|(x, y)| x == y)
            .map(|(x, _)| x)
            .collect::<Vec<_>>()
            .join("/")
    }
}
