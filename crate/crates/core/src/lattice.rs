//! Discretisations of `[0, T]`: a uniform time grid for deterministic
//! coefficients and a recombining binomial tree for coefficients adapted to
//! the Brownian filtration.

/// Uniform grid `t_k = k T / steps`, `k = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Self {
        assert!(steps > 0, "grid needs at least one step");
        TimeGrid { horizon, steps }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the last sample at or before `t`.
    pub fn sample_at_or_before(&self, t: f64) -> usize {
        let k = (t / self.dt() * (1.0 + 1e-12)).floor();
        (k.max(0.0) as usize).min(self.steps)
    }
}

/// Node `(level, up)` of a recombining tree; `up ≤ level`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TreeNode {
    pub level: usize,
    pub up: usize,
}

/// Recombining binomial approximation of Brownian motion:
/// `W(level, up) = (2·up − level)·√dt`, with up/down moves of probability ½.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinomialTree {
    pub horizon: f64,
    pub depth: usize,
}

impl BinomialTree {
    pub fn new(horizon: f64, depth: usize) -> Self {
        assert!(depth > 0, "tree needs at least one level of steps");
        BinomialTree { horizon, depth }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.depth as f64
    }

    pub fn time(&self, level: usize) -> f64 {
        if level == self.depth {
            self.horizon
        } else {
            level as f64 * self.dt()
        }
    }

    pub fn w(&self, node: TreeNode) -> f64 {
        (2.0 * node.up as f64 - node.level as f64) * self.dt().sqrt()
    }

    /// Flat index; levels are stored consecutively.
    pub fn index(&self, node: TreeNode) -> usize {
        node.level * (node.level + 1) / 2 + node.up
    }

    pub fn node_count(&self) -> usize {
        (self.depth + 1) * (self.depth + 2) / 2
    }

    pub fn nodes(&self) -> impl Iterator<Item = TreeNode> + '_ {
        (0..=self.depth).flat_map(|level| (0..=level).map(move |up| TreeNode { level, up }))
    }

    pub fn node_at(&self, index: usize) -> TreeNode {
        let mut level = ((((8 * index + 1) as f64).sqrt() - 1.0) / 2.0).floor() as usize;
        while level * (level + 1) / 2 > index {
            level -= 1;
        }
        while (level + 1) * (level + 2) / 2 <= index {
            level += 1;
        }
        TreeNode {
            level,
            up: index - level * (level + 1) / 2,
        }
    }

    /// Node nearest to a Brownian value `w` at time `t`.
    pub fn locate(&self, t: f64, w: f64) -> TreeNode {
        let level = ((t / self.dt() * (1.0 + 1e-12)).floor().max(0.0) as usize).min(self.depth);
        let up = ((w / self.dt().sqrt() + level as f64) / 2.0).round();
        TreeNode {
            level,
            up: (up.max(0.0) as usize).min(level),
        }
    }
}

/// Where a solution lives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lattice {
    Grid(TimeGrid),
    Tree(BinomialTree),
}

impl Lattice {
    pub fn horizon(&self) -> f64 {
        match self {
            Lattice::Grid(g) => g.horizon,
            Lattice::Tree(t) => t.horizon,
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Lattice::Grid(g) => g.len(),
            Lattice::Tree(t) => t.node_count(),
        }
    }

    /// Time of every node in storage order.
    pub fn node_times(&self) -> Vec<f64> {
        match self {
            Lattice::Grid(g) => (0..g.len()).map(|k| g.time(k)).collect(),
            Lattice::Tree(t) => t.nodes().map(|n| t.time(n.level)).collect(),
        }
    }

    /// Tree coordinates of a stored node, `None` on a grid.
    pub fn tree_node(&self, index: usize) -> Option<TreeNode> {
        match self {
            Lattice::Grid(_) => None,
            Lattice::Tree(t) => Some(t.node_at(index)),
        }
    }

    /// Indices of the nodes at the terminal time.
    pub fn terminal_indices(&self) -> Vec<usize> {
        match self {
            Lattice::Grid(g) => vec![g.steps],
            Lattice::Tree(t) => (0..=t.depth)
                .map(|up| t.index(TreeNode { level: t.depth, up }))
                .collect(),
        }
    }

    /// Indices of the nodes at time zero.
    pub fn initial_index(&self) -> usize {
        0
    }
}
