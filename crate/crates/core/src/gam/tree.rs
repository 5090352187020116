//! Shallow regression trees over a rectangular grid of bins.
//!
//! A main effect is a `bins x 1` grid and a pairwise term is a
//! `bins_i x bins_j` grid, so one grower serves both. Leaves are axis-aligned
//! rectangles; splits are chosen greedily by second-order gain.

/// Gradient statistics per grid cell.
pub(crate) struct GridHistogram {
    pub rows: usize,
    pub cols: usize,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub count: Vec<u32>,
}

impl GridHistogram {
    pub fn new(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        GridHistogram {
            rows,
            cols,
            grad: vec![0.0; n],
            hess: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn clear(&mut self) {
        self.grad.iter_mut().for_each(|v| *v = 0.0);
        self.hess.iter_mut().for_each(|v| *v = 0.0);
        self.count.iter_mut().for_each(|v| *v = 0);
    }
}

#[derive(Clone, Copy, Default, Debug)]
struct Stats {
    g: f64,
    h: f64,
    n: u64,
}

impl Stats {
    fn add(&mut self, g: f64, h: f64, n: u32) {
        self.g += g;
        self.h += h;
        self.n += n as u64;
    }

    fn score(&self) -> f64 {
        if self.h > 0.0 {
            self.g * self.g / self.h
        } else {
            0.0
        }
    }

    fn value(&self) -> f64 {
        if self.h > 1e-12 {
            self.g / self.h
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

#[derive(Clone, Copy, Debug)]
struct Split {
    gain: f64,
    along_rows: bool,
    cut: usize,
}

struct Leaf {
    rect: Rect,
    stats: Stats,
    split: Option<Split>,
}

/// Splits whose gain per unit hessian falls below this are numerical noise.
const MIN_RELATIVE_GAIN: f64 = 1e-14;

fn best_split(hist: &GridHistogram, rect: Rect, total: Stats) -> Option<Split> {
    let parent = total.score();
    let min_gain = MIN_RELATIVE_GAIN * total.h.max(1.0);
    let mut best: Option<Split> = None;
    let mut consider = |marginal: &[Stats], along_rows: bool, offset: usize| {
        let mut left = Stats::default();
        for (i, m) in marginal[..marginal.len() - 1].iter().enumerate() {
            left.add(m.g, m.h, m.n as u32);
            let right = Stats {
                g: total.g - left.g,
                h: total.h - left.h,
                n: total.n - left.n,
            };
            if left.n == 0 || right.n == 0 || left.h <= 0.0 || right.h <= 0.0 {
                continue;
            }
            let gain = left.score() + right.score() - parent;
            // strict comparison: the lowest boundary wins ties
            if gain > min_gain && best.is_none_or(|b| gain > b.gain) {
                best = Some(Split {
                    gain,
                    along_rows,
                    cut: offset + i + 1,
                });
            }
        }
    };
    if rect.r1 - rect.r0 > 1 {
        let marginal: Vec<Stats> = (rect.r0..rect.r1)
            .map(|r| {
                let mut s = Stats::default();
                for c in rect.c0..rect.c1 {
                    let k = r * hist.cols + c;
                    s.add(hist.grad[k], hist.hess[k], hist.count[k]);
                }
                s
            })
            .collect();
        consider(&marginal, true, rect.r0);
    }
    if rect.c1 - rect.c0 > 1 {
        let marginal: Vec<Stats> = (rect.c0..rect.c1)
            .map(|c| {
                let mut s = Stats::default();
                for r in rect.r0..rect.r1 {
                    let k = r * hist.cols + c;
                    s.add(hist.grad[k], hist.hess[k], hist.count[k]);
                }
                s
            })
            .collect();
        consider(&marginal, false, rect.c0);
    }
    best
}

fn rect_stats(hist: &GridHistogram, rect: Rect) -> Stats {
    let mut s = Stats::default();
    for r in rect.r0..rect.r1 {
        for c in rect.c0..rect.c1 {
            let k = r * hist.cols + c;
            s.add(hist.grad[k], hist.hess[k], hist.count[k]);
        }
    }
    s
}

/// Grows a tree with at most `max_leaves` leaves and writes each leaf's
/// Newton value `G / H` into every cell it covers.
pub(crate) fn grow(hist: &GridHistogram, max_leaves: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), hist.rows * hist.cols);
    let root = Rect {
        r0: 0,
        r1: hist.rows,
        c0: 0,
        c1: hist.cols,
    };
    let stats = rect_stats(hist, root);
    let mut leaves = vec![Leaf {
        rect: root,
        stats,
        split: best_split(hist, root, stats),
    }];
    while leaves.len() < max_leaves {
        let mut pick: Option<(usize, f64)> = None;
        for (i, leaf) in leaves.iter().enumerate() {
            if let Some(s) = leaf.split {
                if pick.is_none_or(|(_, g)| s.gain > g) {
                    pick = Some((i, s.gain));
                }
            }
        }
        let Some((i, _)) = pick else { break };
        let leaf = leaves.remove(i);
        let split = leaf.split.expect("picked leaf has a split");
        let (a, b) = if split.along_rows {
            (
                Rect { r1: split.cut, ..leaf.rect },
                Rect { r0: split.cut, ..leaf.rect },
            )
        } else {
            (
                Rect { c1: split.cut, ..leaf.rect },
                Rect { c0: split.cut, ..leaf.rect },
            )
        };
        for (offset, rect) in [a, b].into_iter().enumerate() {
            let stats = rect_stats(hist, rect);
            leaves.insert(
                i + offset,
                Leaf {
                    rect,
                    stats,
                    split: best_split(hist, rect, stats),
                },
            );
        }
    }
    for leaf in &leaves {
        let v = leaf.stats.value();
        for r in leaf.rect.r0..leaf.rect.r1 {
            for c in leaf.rect.c0..leaf.rect.c1 {
                out[r * hist.cols + c] = v;
            }
        }
    }
}
