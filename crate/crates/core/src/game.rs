//! Two-player matrix games with cost (not payoff) matrices, used to check
//! best-response dynamics against pure Nash equilibria.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Player 1 picks a row, player 2 a column; both minimise their own matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixGame {
    j1: Vec<Vec<f64>>,
    j2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Both players respond to the previous profile at once.
    Simultaneous,
    /// Player 1 responds, then player 2 responds to player 1's new choice.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum BrVerdict {
    Converged { strategies: (usize, usize) },
    /// The profile at trace index `start` recurred after `period` updates.
    Cycle { start: usize, period: usize },
    /// Neither a fixed point nor a repeat within the iteration budget.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrTrace {
    pub profiles: Vec<(usize, usize)>,
    pub verdict: BrVerdict,
}

impl MatrixGame {
    pub fn new(j1: Vec<Vec<f64>>, j2: Vec<Vec<f64>>) -> Result<Self> {
        let rows = j1.len();
        let cols = j1.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension("game matrices must be at least 1 x 1".into()));
        }
        for (name, m) in [("j1", &j1), ("j2", &j2)] {
            if m.len() != rows || m.iter().any(|r| r.len() != cols) {
                return Err(Error::Dimension(format!("{name} is not {rows} x {cols}")));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{name} entry")));
            }
        }
        Ok(Self { j1, j2 })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            j1: Vec<Vec<f64>>,
            j2: Vec<Vec<f64>>,
        }
        let f: File =
            serde_json::from_str(text).map_err(|e| Error::parse(Path::new("<game>"), e))?;
        Self::new(f.j1, f.j2)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn rows(&self) -> usize {
        self.j1.len()
    }

    pub fn cols(&self) -> usize {
        self.j1[0].len()
    }

    pub fn j1(&self) -> &[Vec<f64>] {
        &self.j1
    }

    pub fn j2(&self) -> &[Vec<f64>] {
        &self.j2
    }

    /// Symmetric game: player 2's cost matrix is the transpose of player 1's.
    pub fn symmetric(j1: Vec<Vec<f64>>) -> Result<Self> {
        let n = j1.len();
        let j2 = (0..n)
            .map(|r| (0..n).map(|c| j1.get(c).and_then(|row| row.get(r)).copied().unwrap_or(f64::NAN)).collect())
            .collect();
        Self::new(j1, j2)
    }

    /// Rock-paper-scissors with cost 1 for a loss, -1 for a win, 0 for a draw.
    pub fn rock_paper_scissors() -> Self {
        let j1 = vec![
            vec![0.0, 1.0, -1.0],
            vec![-1.0, 0.0, 1.0],
            vec![1.0, -1.0, 0.0],
        ];
        Self::symmetric(j1).expect("valid game")
    }

    /// Prisoner's dilemma as years in prison; strategy 0 cooperates, 1 defects.
    pub fn prisoners_dilemma() -> Self {
        Self::symmetric(vec![vec![1.0, 3.0], vec![0.0, 2.0]]).expect("valid game")
    }
}

fn argmin_set(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let values: Vec<f64> = values.collect();
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    (0..values.len()).filter(|&i| values[i] == best).collect()
}

/// Player 1's best responses (rows) to column `opponent`, ascending, ties included.
pub fn best_response_set(game: &MatrixGame, opponent: usize) -> Result<Vec<usize>> {
    if opponent >= game.cols() {
        return Err(Error::invalid(
            "opponent",
            format!("column {opponent} out of range for {} columns", game.cols()),
        ));
    }
    Ok(argmin_set(game.j1.iter().map(|r| r[opponent])))
}

/// Player 2's best responses (columns) to row `opponent`.
pub fn best_response_set_p2(game: &MatrixGame, opponent: usize) -> Result<Vec<usize>> {
    if opponent >= game.rows() {
        return Err(Error::invalid(
            "opponent",
            format!("row {opponent} out of range for {} rows", game.rows()),
        ));
    }
    Ok(argmin_set(game.j2[opponent].iter().copied()))
}

/// Each player's strategy is a best response to the other's.
pub fn is_nash(game: &MatrixGame, profile: (usize, usize)) -> Result<bool> {
    let (r, c) = profile;
    Ok(best_response_set(game, c)?.contains(&r) && best_response_set_p2(game, r)?.contains(&c))
}

#[inline]
fn respond(best: &[usize], current: usize) -> usize {
    if best.contains(&current) {
        current
    } else {
        best[0]
    }
}

/// One update of the best-response map. A player already playing a best
/// response keeps it; otherwise ties go to the lowest index.
pub fn br_step(game: &MatrixGame, profile: (usize, usize), mode: UpdateMode) -> Result<(usize, usize)> {
    let (r0, c0) = profile;
    let r = respond(&best_response_set(game, c0)?, r0);
    let c = match mode {
        UpdateMode::Simultaneous => respond(&best_response_set_p2(game, r0)?, c0),
        UpdateMode::Alternating => respond(&best_response_set_p2(game, r)?, c0),
    };
    Ok((r, c))
}

/// Iterates [`br_step`] from `init`.
///
/// Stops at the first fixed point, at the first revisited profile (cycle), or
/// after `max_iters` updates.
pub fn br_dynamics(
    game: &MatrixGame,
    init: (usize, usize),
    max_iters: usize,
    mode: UpdateMode,
) -> Result<BrTrace> {
    if init.0 >= game.rows() || init.1 >= game.cols() {
        return Err(Error::invalid("init", "strategy index out of range"));
    }
    let mut profiles = vec![init];
    let mut seen = HashMap::from([(init, 0usize)]);
    let mut cur = init;
    for _ in 0..max_iters {
        let next = br_step(game, cur, mode)?;
        if next == cur {
            return Ok(BrTrace {
                profiles,
                verdict: BrVerdict::Converged { strategies: cur },
            });
        }
        let idx = profiles.len();
        profiles.push(next);
        if let Some(&start) = seen.get(&next) {
            return Ok(BrTrace {
                profiles,
                verdict: BrVerdict::Cycle {
                    start,
                    period: idx - start,
                },
            });
        }
        seen.insert(next, idx);
        cur = next;
    }
    Ok(BrTrace {
        profiles,
        verdict: BrVerdict::Exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_game(col: &[f64]) -> MatrixGame {
        let j1: Vec<Vec<f64>> = col.iter().map(|&v| vec![v]).collect();
        let j2 = vec![vec![0.0]; col.len()];
        MatrixGame::new(j1, j2).unwrap()
    }

    #[test]
    fn best_response_examples() {
        assert_eq!(best_response_set(&column_game(&[1.0, 0.0, 2.0]), 0).unwrap(), vec![1]);
        assert_eq!(best_response_set(&column_game(&[0.0, 0.0, 5.0]), 0).unwrap(), vec![0, 1]);
        assert!(best_response_set(&column_game(&[0.0]), 1).is_err());
    }

    #[test]
    fn coordination_start_is_fixed() {
        let j = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let g = MatrixGame::new(j.clone(), j).unwrap();
        for mode in [UpdateMode::Simultaneous, UpdateMode::Alternating] {
            let t = br_dynamics(&g, (1, 1), 10, mode).unwrap();
            assert_eq!(t.verdict, BrVerdict::Converged { strategies: (1, 1) });
            assert_eq!(t.profiles, vec![(1, 1)]);
        }
    }

    #[test]
    fn rock_paper_scissors_cycles_with_period_three() {
        let g = MatrixGame::rock_paper_scissors();
        for r in 0..3 {
            for c in 0..3 {
                assert!(!is_nash(&g, (r, c)).unwrap());
            }
        }
        let t = br_dynamics(&g, (0, 0), 50, UpdateMode::Alternating).unwrap();
        match t.verdict {
            BrVerdict::Cycle { period, .. } => assert_eq!(period, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prisoners_dilemma_equilibrium_is_mutual_defection() {
        let g = MatrixGame::prisoners_dilemma();
        assert!(is_nash(&g, (1, 1)).unwrap());
        assert!(!is_nash(&g, (0, 0)).unwrap());
        assert!(!is_nash(&g, (0, 1)).unwrap());
        let t = br_dynamics(&g, (0, 0), 10, UpdateMode::Simultaneous).unwrap();
        assert_eq!(t.verdict, BrVerdict::Converged { strategies: (1, 1) });
    }

    #[test]
    fn trivial_game_is_nash() {
        let g = MatrixGame::new(vec![vec![3.0]], vec![vec![-1.0]]).unwrap();
        assert!(is_nash(&g, (0, 0)).unwrap());
    }

    #[test]
    fn json_loading_validates_shapes() {
        let g = MatrixGame::from_json(r#"{"j1": [[1, 2]], "j2": [[0, 0]]}"#).unwrap();
        assert_eq!((g.rows(), g.cols()), (1, 2));
        assert!(MatrixGame::from_json(r#"{"j1": [[1, 2]], "j2": [[0]]}"#).is_err());
    }
}
