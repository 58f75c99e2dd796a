use serde::{Deserialize, Serialize};

use super::{check_weights, BoostError, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
        /// Training weight that reached this leaf.
        weight: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaves<'a>(&'a self, out: &mut Vec<&'a Node>) {
        match self {
            Node::Leaf { .. } => out.push(self),
            Node::Split { left, right, .. } => {
                left.leaves(out);
                right.leaves(out);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    /// Minimum training weight per leaf. `None` means twice the mean positive weight.
    pub min_leaf_weight: Option<f64>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: 5, min_leaf_weight: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub root: Node,
    pub n_features: usize,
    pub max_depth: usize,
    pub min_leaf_weight: f64,
}

impl RegressionTree {
    /// Greedy weighted-variance-reduction tree. Rows with zero weight are ignored.
    pub fn fit(x: &FeatureMatrix, y: &[f64], w: &[f64], params: &TreeParams) -> Result<Self, BoostError> {
        if y.len() != x.n_rows() {
            return Err(BoostError::DimensionMismatch(format!("{} targets for {} rows", y.len(), x.n_rows())));
        }
        check_weights(w, x.n_rows())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(BoostError::NonFinite);
        }
        let (total, positive) = w
            .iter()
            .filter(|v| **v > 0.0)
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        let min_leaf_weight = match params.min_leaf_weight {
            Some(v) if v >= 0.0 && v.is_finite() => v,
            Some(v) => return Err(BoostError::InvalidParameter(format!("min_leaf_weight {v}"))),
            None => 2.0 * total / positive as f64,
        };
        let lists: Vec<Vec<u32>> = (0..x.n_cols())
            .map(|f| x.sorted(f).iter().copied().filter(|&i| w[i as usize] > 0.0).collect())
            .collect();
        let rows: Vec<u32> = (0..x.n_rows() as u32).filter(|&i| w[i as usize] > 0.0).collect();
        let mut b = Builder {
            x,
            y,
            w,
            max_depth: params.max_depth,
            min_leaf: min_leaf_weight,
            go_left: vec![false; x.n_rows()],
            resid: vec![0.0; x.n_rows()],
        };
        let root = b.build(rows, lists, 0);
        Ok(Self { root, n_features: x.n_cols(), max_depth: params.max_depth, min_leaf_weight })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { value, .. } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict_matrix(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.n_rows()).map(|i| self.predict(x.row(i))).collect()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn leaves(&self) -> Vec<&Node> {
        let mut out = Vec::new();
        self.root.leaves(&mut out);
        out
    }
}

struct Builder<'a> {
    x: &'a FeatureMatrix,
    y: &'a [f64],
    w: &'a [f64],
    max_depth: usize,
    min_leaf: f64,
    go_left: Vec<bool>,
    /// w·(y − node mean), refreshed per node.
    resid: Vec<f64>,
}

struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn build(&mut self, rows: Vec<u32>, lists: Vec<Vec<u32>>, depth: usize) -> Node {
        let (mut sw, mut swy) = (0.0, 0.0);
        for &i in &rows {
            let i = i as usize;
            sw += self.w[i];
            swy += self.w[i] * self.y[i];
        }
        let mean = swy / sw;
        let sse: f64 = rows
            .iter()
            .map(|&i| self.w[i as usize] * (self.y[i as usize] - mean).powi(2))
            .sum();
        let leaf = Node::Leaf { value: mean, weight: sw };
        // Relative tolerance so equal-weight pairs still satisfy the minimum.
        let min_leaf = self.min_leaf * (1.0 - 1e-12);
        if depth >= self.max_depth || sse <= 0.0 || sw < 2.0 * min_leaf || lists.is_empty() {
            return leaf;
        }
        let Some(best) = self.best_split(&lists, sw, mean, sse, min_leaf) else {
            return leaf;
        };
        let col = self.x.column(best.feature);
        for &i in &rows {
            self.go_left[i as usize] = col[i as usize] <= best.threshold;
        }
        let (lrows, rrows): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&i| self.go_left[i as usize]);
        let mut llists = Vec::with_capacity(lists.len());
        let mut rlists = Vec::with_capacity(lists.len());
        for list in lists {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&i| self.go_left[i as usize]);
            llists.push(l);
            rlists.push(r);
        }
        let left = self.build(lrows, llists, depth + 1);
        let right = self.build(rrows, rlists, depth + 1);
        Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Scans every feature's sorted rows; targets are centered on the node mean.
    fn best_split(&mut self, lists: &[Vec<u32>], sw: f64, mean: f64, sse: f64, min_leaf: f64) -> Option<Best> {
        let mut swy = 0.0;
        for &i in &lists[0] {
            let i = i as usize;
            let r = self.w[i] * (self.y[i] - mean);
            self.resid[i] = r;
            swy += r;
        }
        let base = swy * swy / sw;
        let mut best: Option<Best> = None;
        for (f, list) in lists.iter().enumerate() {
            let col = self.x.column(f);
            let (mut lw, mut ly) = (0.0, 0.0);
            let mut i = list[0] as usize;
            let mut a = col[i];
            for &next in &list[1..] {
                let next = next as usize;
                lw += self.w[i];
                ly += self.resid[i];
                let b = col[next];
                if a < b {
                    let rw = sw - lw;
                    if lw >= min_leaf && rw >= min_leaf {
                        let ry = swy - ly;
                        let gain = ly * ly / lw + ry * ry / rw - base;
                        if gain > sse * 1e-12 && best.as_ref().is_none_or(|bb| gain > bb.gain) {
                            let mid = 0.5 * (a + b);
                            let threshold = if mid < b { mid } else { a };
                            best = Some(Best { gain, feature: f, threshold });
                        }
                    }
                }
                i = next;
                a = b;
            }
        }
        best
    }
}
