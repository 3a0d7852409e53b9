//! Topology-preserving 3D thinning.
//!
//! A foreground voxel is simple when removing it changes neither the
//! 26-connected foreground topology nor the 6-connected background
//! topology of its neighbourhood: exactly one 26-component of foreground
//! in N26*, and exactly one 6-component of background in N18* that is
//! 6-adjacent to the centre. Border voxels are peeled one direction at a
//! time, re-checking each candidate just before deletion; voxels with a
//! single foreground neighbour are curve ends and are kept.

use std::sync::OnceLock;

/// Offset of cube cell `i` (0..27) as `(dz, dy, dx)` in `-1..=1`.
fn offset(i: usize) -> [i64; 3] {
    [
        (i / 9) as i64 - 1,
        ((i / 3) % 3) as i64 - 1,
        (i % 3) as i64 - 1,
    ]
}

const CENTER: usize = 13;

struct Tables {
    /// 26-adjacency between cells of the cube, excluding the centre.
    adj26: Vec<Vec<usize>>,
    /// 6-adjacency restricted to N18 cells, excluding the centre.
    adj6_n18: Vec<Vec<usize>>,
    in_n18: [bool; 27],
    face: [bool; 27],
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let l1 = |a: [i64; 3]| a.iter().map(|v| v.abs()).sum::<i64>();
        let mut in_n18 = [false; 27];
        let mut face = [false; 27];
        for i in 0..27 {
            let n = l1(offset(i));
            in_n18[i] = i != CENTER && n <= 2;
            face[i] = n == 1;
        }
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_n18 = vec![Vec::new(); 27];
        for i in 0..27 {
            for j in 0..27 {
                if i == j || i == CENTER || j == CENTER {
                    continue;
                }
                let (a, b) = (offset(i), offset(j));
                let d: [i64; 3] = std::array::from_fn(|k| (a[k] - b[k]).abs());
                if d.iter().all(|&v| v <= 1) {
                    adj26[i].push(j);
                }
                if in_n18[i] && in_n18[j] && d.iter().sum::<i64>() == 1 {
                    adj6_n18[i].push(j);
                }
            }
        }
        Tables {
            adj26,
            adj6_n18,
            in_n18,
            face,
        }
    })
}

/// Number of components of `cells` under `adj`, counting only those that
/// contain a cell satisfying `seed`.
fn components(cells: &[bool; 27], adj: &[Vec<usize>], seed: impl Fn(usize) -> bool) -> usize {
    let mut seen = [false; 27];
    let mut count = 0;
    let mut stack = Vec::with_capacity(27);
    for s in 0..27 {
        if !cells[s] || seen[s] || !seed(s) {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(c) = stack.pop() {
            for &n in &adj[c] {
                if cells[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    count
}

pub fn is_simple(cube: &[bool; 27]) -> bool {
    let t = tables();
    let mut fg = *cube;
    fg[CENTER] = false;
    if components(&fg, &t.adj26, |_| true) != 1 {
        return false;
    }
    let mut bg = [false; 27];
    for i in 0..27 {
        bg[i] = t.in_n18[i] && !cube[i];
    }
    components(&bg, &t.adj6_n18, |i| t.face[i]) == 1
}

/// Padded working grid; the one-voxel frame is permanent background.
struct Grid {
    dims: [usize; 3],
    cells: Vec<bool>,
}

impl Grid {
    fn new(mask: &[bool], dims: [usize; 3]) -> Self {
        let pd = dims.map(|d| d + 2);
        let mut cells = vec![false; pd.iter().product()];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    cells[((z + 1) * pd[1] + y + 1) * pd[2] + x + 1] =
                        mask[(z * dims[1] + y) * dims[2] + x];
                }
            }
        }
        Grid { dims: pd, cells }
    }

    fn stride(&self) -> [isize; 3] {
        [
            (self.dims[1] * self.dims[2]) as isize,
            self.dims[2] as isize,
            1,
        ]
    }

    fn cube(&self, at: usize) -> [bool; 27] {
        let s = self.stride();
        std::array::from_fn(|i| {
            let o = offset(i);
            self.cells[(at as isize
                + o[0] as isize * s[0]
                + o[1] as isize * s[1]
                + o[2] as isize * s[2]) as usize]
        })
    }
}

fn neighbours(cube: &[bool; 27]) -> usize {
    cube.iter()
        .enumerate()
        .filter(|&(i, &c)| c && i != CENTER)
        .count()
}

/// Thins `mask` (z-major, dims `D x H x W`) to a curve skeleton and
/// returns the skeleton voxels in raster order.
pub fn thin(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut g = Grid::new(mask, dims);
    let s = g.stride();
    let dirs: [isize; 6] = [-s[0], s[0], -s[1], s[1], -s[2], s[2]];
    let interior: Vec<usize> = (0..g.cells.len())
        .filter(|&i| {
            let (z, y, x) = (
                i / (g.dims[1] * g.dims[2]),
                (i / g.dims[2]) % g.dims[1],
                i % g.dims[2],
            );
            (1..=dims[0]).contains(&z) && (1..=dims[1]).contains(&y) && (1..=dims[2]).contains(&x)
        })
        .collect();
    loop {
        let mut removed = 0;
        for &d in &dirs {
            let candidates: Vec<usize> = interior
                .iter()
                .copied()
                .filter(|&i| g.cells[i] && !g.cells[(i as isize + d) as usize])
                .filter(|&i| {
                    let c = g.cube(i);
                    neighbours(&c) > 1 && is_simple(&c)
                })
                .collect();
            for i in candidates {
                let c = g.cube(i);
                if neighbours(&c) > 1 && is_simple(&c) {
                    g.cells[i] = false;
                    removed += 1;
                }
            }
        }
        if removed == 0 {
            break;
        }
    }
    interior
        .into_iter()
        .filter(|&i| g.cells[i])
        .map(|i| {
            let (z, y, x) = (
                i / (g.dims[1] * g.dims[2]),
                (i / g.dims[2]) % g.dims[1],
                i % g.dims[2],
            );
            [z - 1, y - 1, x - 1]
        })
        .collect()
}

/// 26-connected component count of a mask.
pub fn count_components(mask: &[bool], dims: [usize; 3]) -> usize {
    let g = Grid::new(mask, dims);
    let s = g.stride();
    let mut seen = vec![false; g.cells.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..g.cells.len() {
        if !g.cells[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(c) = stack.pop() {
            for i in (0..27).filter(|&i| i != CENTER) {
                let o = offset(i);
                let n = (c as isize
                    + o[0] as isize * s[0]
                    + o[1] as isize * s[1]
                    + o[2] as isize * s[2]) as usize;
                if g.cells[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    count
}
