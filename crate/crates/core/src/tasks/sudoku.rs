//! 4x4 sudoku: random solved grids, uniqueness-preserving cell removal and an exhaustive
//! solution counter.

use rand::seq::SliceRandom;
use rand::Rng;

pub const SIZE: usize = 4;
pub const CELLS: usize = SIZE * SIZE;

/// Cell values are 1..=4; 0 marks a blank.
pub type Grid = [u8; CELLS];

fn box_of(i: usize) -> usize {
    (i / SIZE / 2) * 2 + (i % SIZE) / 2
}

/// Whether `v` can be placed at `i` without clashing with row, column or box.
pub fn allowed(g: &Grid, i: usize, v: u8) -> bool {
    let (r, c, b) = (i / SIZE, i % SIZE, box_of(i));
    (0..CELLS).all(|j| {
        j == i || g[j] != v || (j / SIZE != r && j % SIZE != c && box_of(j) != b)
    })
}

/// Whether a fully filled grid satisfies every constraint.
pub fn is_solved(g: &Grid) -> bool {
    g.iter().all(|&v| (1..=4).contains(&v)) && (0..CELLS).all(|i| allowed(g, i, g[i]))
}

/// Counts solutions, stopping once `limit` is reached.
pub fn count_solutions(g: &Grid, limit: usize) -> usize {
    let mut work = *g;
    let mut count = 0;
    search(&mut work, limit, &mut count);
    count
}

fn search(g: &mut Grid, limit: usize, count: &mut usize) {
    if *count >= limit {
        return;
    }
    let Some(i) = g.iter().position(|&v| v == 0) else {
        *count += 1;
        return;
    };
    for v in 1..=4 {
        if allowed(g, i, v) {
            g[i] = v;
            search(g, limit, count);
            g[i] = 0;
        }
    }
}

pub fn solve(g: &Grid) -> Option<Grid> {
    fn go(g: &mut Grid) -> bool {
        let Some(i) = g.iter().position(|&v| v == 0) else {
            return true;
        };
        for v in 1..=4 {
            if allowed(g, i, v) {
                g[i] = v;
                if go(g) {
                    return true;
                }
                g[i] = 0;
            }
        }
        false
    }
    let mut work = *g;
    go(&mut work).then_some(work)
}

/// A uniformly shuffled solved grid (digit relabelling plus row/column/band permutations).
pub fn random_solution<R: Rng + ?Sized>(rng: &mut R) -> Grid {
    let base: Grid = [1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1];
    let mut digits = [1u8, 2, 3, 4];
    digits.shuffle(rng);
    let mut bands = [0usize, 1];
    bands.shuffle(rng);
    let mut stacks = [0usize, 1];
    stacks.shuffle(rng);
    let rows: Vec<usize> = bands
        .iter()
        .flat_map(|&b| {
            let mut r = [2 * b, 2 * b + 1];
            r.shuffle(rng);
            r
        })
        .collect();
    let cols: Vec<usize> = stacks
        .iter()
        .flat_map(|&s| {
            let mut c = [2 * s, 2 * s + 1];
            c.shuffle(rng);
            c
        })
        .collect();
    let transpose = rng.random_bool(0.5);
    let mut out = [0u8; CELLS];
    for r in 0..SIZE {
        for c in 0..SIZE {
            let (sr, sc) = if transpose { (cols[c], rows[r]) } else { (rows[r], cols[c]) };
            out[r * SIZE + c] = digits[(base[sr * SIZE + sc] - 1) as usize];
        }
    }
    out
}

/// Removes `blanks` cells from `solution` keeping the solution unique. Returns `None` if
/// the random removal order gets stuck before reaching the target.
pub fn make_puzzle<R: Rng + ?Sized>(solution: &Grid, blanks: usize, rng: &mut R) -> Option<Grid> {
    let mut order: Vec<usize> = (0..CELLS).collect();
    order.shuffle(rng);
    let mut puzzle = *solution;
    let mut removed = 0;
    for i in order {
        if removed == blanks {
            break;
        }
        let keep = puzzle[i];
        puzzle[i] = 0;
        if count_solutions(&puzzle, 2) == 1 {
            removed += 1;
        } else {
            puzzle[i] = keep;
        }
    }
    (removed == blanks).then_some(puzzle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    #[test]
    fn random_solutions_are_valid() {
        let mut rng = from_seed(2);
        for _ in 0..200 {
            assert!(is_solved(&random_solution(&mut rng)));
        }
    }

    #[test]
    fn there_are_288_solved_grids() {
        assert_eq!(count_solutions(&[0; CELLS], 10_000), 288);
    }

    #[test]
    fn puzzles_have_unique_solutions() {
        let mut rng = from_seed(3);
        for blanks in [4, 8, 10] {
            let sol = random_solution(&mut rng);
            let p = make_puzzle(&sol, blanks, &mut rng).unwrap();
            assert_eq!(p.iter().filter(|&&v| v == 0).count(), blanks);
            assert_eq!(count_solutions(&p, 2), 1);
            assert_eq!(solve(&p), Some(sol));
        }
    }
}
