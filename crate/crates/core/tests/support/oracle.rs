//! Straight-line Monte Carlo model of a sim-world run. It shares no code
//! with the engine; the stopping rules are written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy)]
pub struct OracleWorld {
    pub m: usize,
    pub p_resample: f64,
    pub p_rewrite: f64,
    pub p_edit_target: f64,
    pub p_edit_side: f64,
    pub recall: f64,
    pub flip: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleSchedule {
    pub k_min: u32,
    pub k_max: u32,
}

impl Default for OracleSchedule {
    fn default() -> Self {
        Self { k_min: 2, k_max: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEstimate {
    pub satisfied_rate: f64,
    pub mean_rounds: f64,
    pub mean_samples: f64,
}

fn major(k: usize) -> bool {
    // 1-based requirement index; every k ≡ 2 (mod 3) is minor
    k % 3 != 2
}

fn fresh(rng: &mut ChaCha20Rng, m: usize, p: f64) -> Vec<bool> {
    (0..m).map(|_| rng.random::<f64>() < p).collect()
}

fn edit(rng: &mut ChaCha20Rng, parent: &[bool], targets: &[usize], w: &OracleWorld) -> Vec<bool> {
    (0..parent.len())
        .map(|i| {
            if targets.contains(&(i + 1)) {
                let hit = rng.random::<f64>() < w.p_edit_target;
                parent[i] || hit
            } else {
                let broken = rng.random::<f64>() < w.p_edit_side;
                parent[i] && !broken
            }
        })
        .collect()
}

fn popcount(b: &[bool]) -> usize {
    b.iter().filter(|x| **x).count()
}

/// (satisfied, completed rounds, samples) for one run.
fn one_run(rng: &mut ChaCha20Rng, w: &OracleWorld, s: &OracleSchedule) -> (bool, u32, u32) {
    let surfaced = ((w.recall * w.m as f64).ceil() as usize).clamp(1, w.m);
    let mut best: Option<Vec<bool>> = None;
    let mut best_fit = f64::NEG_INFINITY;
    let mut samples = 0;
    let mut rounds = 0;
    for round in 1..=s.k_max {
        // analyzer, looking at the global best
        if let Some(b) = &best {
            let majors_met = (1..=surfaced).filter(|&k| major(k)).all(|k| b[k - 1]);
            if majors_met && round > s.k_min {
                break;
            }
        }
        let mut unsat: Vec<usize> = match &best {
            Some(b) => (1..=surfaced).filter(|&k| !b[k - 1]).collect(),
            None => (1..=surfaced).collect(),
        };
        if unsat.is_empty() {
            unsat = (1..=surfaced).collect();
        }
        let mut pop: Vec<Vec<bool>> = Vec::new();
        if round <= s.k_min {
            for _ in 0..4 {
                pop.push(fresh(rng, w.m, w.p_resample));
            }
            for _ in 0..4 {
                pop.push(fresh(rng, w.m, w.p_rewrite));
            }
        } else {
            for _ in 0..5 {
                pop.push(fresh(rng, w.m, w.p_rewrite));
            }
            let parent = best.clone().expect("a best exists after round one");
            let top = unsat[0];
            let random = if unsat.len() > 1 { unsat[1 + rng.random_range(0..unsat.len() - 1)] } else { top };
            pop.push(edit(rng, &parent, &[top], w));
            pop.push(edit(rng, &parent, &[random], w));
            pop.push(edit(rng, &parent, &unsat, w));
        }
        samples += pop.len() as u32;
        rounds = round;
        // first maximum in slot order
        let mut rb = 0;
        for j in 1..pop.len() {
            if popcount(&pop[j]) > popcount(&pop[rb]) {
                rb = j;
            }
        }
        let rb_fit = popcount(&pop[rb]) as f64 / w.m as f64;
        if rb_fit > best_fit {
            best_fit = rb_fit;
            best = Some(pop[rb].clone());
        }
        // verifier on the round best, over surfaced requirements
        let all_yes = (1..=surfaced).all(|k| {
            let truth = pop[rb][k - 1];
            let flipped = rng.random::<f64>() < w.flip;
            truth != flipped
        });
        if all_yes && round >= s.k_min {
            break;
        }
    }
    let satisfied = best.is_some_and(|b| b.iter().all(|x| *x));
    (satisfied, rounds, samples)
}

pub fn estimate(w: &OracleWorld, s: &OracleSchedule, trials: u32, seed: u64) -> OracleEstimate {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut sat, mut rounds, mut samples) = (0u32, 0u64, 0u64);
    for _ in 0..trials {
        let (ok, r, n) = one_run(&mut rng, w, s);
        sat += u32::from(ok);
        rounds += u64::from(r);
        samples += u64::from(n);
    }
    let t = f64::from(trials);
    OracleEstimate { satisfied_rate: f64::from(sat) / t, mean_rounds: rounds as f64 / t, mean_samples: samples as f64 / t }
}
