//! Connected-component labeling of binary grids.

use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Face6,
    Full26,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let n = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Face6 => n == 1,
                        Connectivity::Full26 => n >= 1,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Labels the non-zero voxels of `g`; components are numbered 1.. in
/// scan order. Returns the label grid and the component count.
pub fn label_components(g: &Grid<u8>, conn: Connectivity) -> (Grid<u32>, usize) {
    let offsets = conn.offsets();
    let mut labels = Grid::filled(g.shape(), 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..g.len() {
        if g.as_slice()[start] == 0 || labels.as_slice()[start] != 0 {
            continue;
        }
        next += 1;
        labels.as_mut_slice()[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let p = g.coords(i);
            for o in &offsets {
                let q = [p[0] as isize + o[0], p[1] as isize + o[1], p[2] as isize + o[2]];
                if g.get_signed(q).is_some_and(|v| v != 0) {
                    let j = g.index([q[0] as usize, q[1] as usize, q[2] as usize]);
                    if labels.as_slice()[j] == 0 {
                        labels.as_mut_slice()[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Splits a binary grid into one binary grid per connected component.
pub fn split_components(g: &Grid<u8>, conn: Connectivity) -> Vec<Grid<u8>> {
    let (labels, n) = label_components(g, conn);
    (1..=n as u32)
        .map(|k| labels.map(|l| u8::from(l == k)))
        .collect()
}

/// Keeps only the largest component (ties resolved by scan order).
pub fn largest_component(g: &Grid<u8>, conn: Connectivity) -> Grid<u8> {
    let (labels, n) = label_components(g, conn);
    if n <= 1 {
        return g.nonzero_mask();
    }
    let mut sizes = vec![0usize; n + 1];
    for &l in labels.as_slice() {
        sizes[l as usize] += 1;
    }
    let best = (1..=n).max_by_key(|&k| (sizes[k], std::cmp::Reverse(k))).unwrap() as u32;
    labels.map(|l| u8::from(l == best))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_neighbours_depend_on_connectivity() {
        let g = Grid::from_fn([1, 3, 3], |[_, y, x]| u8::from(y == x));
        assert_eq!(label_components(&g, Connectivity::Face6).1, 3);
        assert_eq!(label_components(&g, Connectivity::Full26).1, 1);
    }

    #[test]
    fn largest_component_wins() {
        let g = Grid::from_fn([1, 1, 8], |[_, _, x]| u8::from(x != 2 && x != 3));
        let l = largest_component(&g, Connectivity::Face6);
        assert_eq!(l.count_nonzero(), 4);
        assert_eq!(l.get([0, 0, 0]), 0);
        assert_eq!(l.get([0, 0, 4]), 1);
    }
}
