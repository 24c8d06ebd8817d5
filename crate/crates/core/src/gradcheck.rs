//! Central finite-difference checks of the analytic gradients.

use rand::Rng;

use crate::error::Result;
use crate::grouping::GroupLabel;
use crate::objectives::{
    htpo_objective_parts, unified_weight, ClipConfig, ImportanceRatio, SpecialGroups,
    SurrogateTerm,
};
use crate::policy::{ContextKey, KeySpace, PolicyTable};

/// `‖fd − analytic‖∞ / ‖analytic‖∞`, or `‖fd‖∞` when the analytic gradient is zero.
pub fn relative_error(fd: &[f64], analytic: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = fd
        .iter()
        .zip(analytic)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        fd.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    } else {
        diff / scale
    }
}

/// Central differences of `f` w.r.t. each logit of `key`'s row.
pub fn row_gradient<F>(policy: &PolicyTable, key: ContextKey, h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&PolicyTable) -> Result<f64>,
{
    let mut p = policy.clone();
    let mut out = Vec::with_capacity(policy.vocab());
    for v in 0..policy.vocab() {
        let x = policy.row(key)?[v];
        p.row_mut(key)?[v] = x + h;
        let up = f(&p)?;
        p.row_mut(key)?[v] = x - h;
        let down = f(&p)?;
        p.row_mut(key)?[v] = x;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Random policy with `rows` keys over `vocab` tokens, logits in `[-scale, scale]`.
pub fn random_policy<R: Rng + ?Sized>(vocab: usize, rows: usize, scale: f64, rng: &mut R) -> Result<PolicyTable> {
    let keys = KeySpace::new(vec![rows])?;
    let logits = (0..vocab * rows).map(|_| rng.gen_range(-scale..scale)).collect();
    PolicyTable::from_logits(vocab, keys, logits)
}

/// Largest relative error of `score` against finite differences of
/// `log_prob` over `trials` random (policy, key, token) triples.
pub fn check_score<R: Rng + ?Sized>(trials: usize, h: f64, rng: &mut R) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let vocab = rng.gen_range(2..=16);
        let policy = random_policy(vocab, 4, 3.0, rng)?;
        let key = ContextKey::from_row(rng.gen_range(0..4));
        let token = rng.gen_range(0..vocab);
        let fd = row_gradient(&policy, key, h, |p| p.log_prob(key, token))?;
        worst = worst.max(relative_error(&fd, &policy.score(key, token)?));
    }
    Ok(worst)
}

/// Largest relative error of `unified_weight · Â · score` against finite
/// differences of the stop-gradient forward objective, over every group label,
/// detach flag (where allowed), both advantage signs and `r` on a 0.01 grid in
/// `[0.1, 3.0]`. Returns the error and the number of cells checked.
pub fn check_objective(cfg: &ClipConfig, h: f64) -> Result<(f64, usize)> {
    let policy = PolicyTable::from_logits(
        4,
        KeySpace::new(vec![1])?,
        vec![0.3, -0.2, 0.1, -0.4],
    )?;
    let key = ContextKey::from_row(0);
    let token = 2;
    let sg = policy.log_prob(key, token)?;
    let score = policy.score(key, token)?;
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for label in GroupLabel::ALL {
        let flags: &[bool] = if matches!(label, GroupLabel::G1 | GroupLabel::G6) {
            &[false, true]
        } else {
            &[false]
        };
        for &detached in flags {
            for advantage in [1.3, -0.7] {
                for i in 10..=300 {
                    let r = i as f64 / 100.0;
                    let old = sg - r.ln();
                    let obj = match htpo_objective_parts(
                        label,
                        detached,
                        ImportanceRatio::new(r)?,
                        advantage,
                        cfg,
                        SpecialGroups::ALL,
                    ) {
                        Ok(o) => o,
                        // G2 with A < 0 and G4/G8 with A > 0 cannot occur
                        Err(_) => continue,
                    };
                    let term = SurrogateTerm::new(&obj, advantage, old, sg);
                    let fd = row_gradient(&policy, key, h, |p| Ok(term.value_at(p.log_prob(key, token)?)))?;
                    let w = unified_weight(label, detached, r, advantage.signum(), cfg);
                    let analytic: Vec<f64> = score.iter().map(|s| w * advantage * s).collect();
                    worst = worst.max(relative_error(&fd, &analytic));
                    cells += 1;
                }
            }
        }
    }
    Ok((worst, cells))
}
