#![allow(dead_code)]

use htpo::analysis::TokenGradient;
use htpo::grouping::GroupLabel;
use rand::Rng;

/// Token set whose advantage-weighted scores `Â·score` all lie within angle
/// `acos(1 − eta)` of a fixed unit direction. Tokens come in antithetic pairs
/// sharing a label, so the perpendicular parts cancel and the sum points
/// exactly along that direction. At least one pair sits on the boundary angle.
pub fn planted_set<R: Rng>(rng: &mut R, eta: f64, pairs: usize, dim: usize, weights: (f64, f64)) -> Vec<TokenGradient> {
    assert!(dim >= 2 && pairs >= 1);
    let u = random_unit(rng, dim);
    let theta_max = (1.0 - eta).acos();
    let mut out = Vec::with_capacity(2 * pairs);
    for i in 0..pairs {
        let w = perpendicular_unit(rng, &u);
        let theta = if i == 0 { theta_max } else { rng.gen_range(0.0..=theta_max) };
        let magnitude = rng.gen_range(0.2..2.0);
        let advantage = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.1..2.5);
        let label = GroupLabel::ALL[rng.gen_range(0..8)];
        for sign in [1.0, -1.0] {
            // v = Â·score
            let v: Vec<f64> = u
                .iter()
                .zip(&w)
                .map(|(a, b)| magnitude * (theta.cos() * a + sign * theta.sin() * b))
                .collect();
            let weight = rng.gen_range(weights.0..=weights.1);
            out.push(TokenGradient {
                label,
                advantage,
                weight,
                row: 0,
                score: v.iter().map(|x| x / advantage).collect(),
            });
        }
    }
    out
}

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn perpendicular_unit<R: Rng>(rng: &mut R, u: &[f64]) -> Vec<f64> {
    loop {
        let v = random_unit(rng, u.len());
        let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        let p: Vec<f64> = v.iter().zip(u).map(|(a, b)| a - d * b).collect();
        let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 {
            return p.into_iter().map(|x| x / n).collect();
        }
    }
}
