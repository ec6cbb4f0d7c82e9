use crate::error::{Error, Result};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Sum over points of the distance to the nearest medoid.
pub fn medoid_cost(points: &[Vec<f64>], medoids: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            medoids
                .iter()
                .map(|&m| dist(p, &points[m]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Instances with at most this many candidate medoid sets are solved by
/// enumeration instead of PAM.
pub const EXACT_LIMIT: u64 = 5_000;

fn binomial(n: usize, k: usize) -> u64 {
    let mut c: u64 = 1;
    for i in 0..k as u64 {
        c = c.saturating_mul(n as u64 - i) / (i + 1);
    }
    c
}

/// Globally optimal medoids by enumeration in lexicographic order; the first
/// minimum wins.
fn exhaustive(n: usize, k: usize, cost: &dyn Fn(&[usize]) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = idx.clone();
    let mut best_cost = cost(&idx);
    loop {
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return best;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
        let c = cost(&idx);
        if c < best_cost {
            best_cost = c;
            best.clone_from(&idx);
        }
    }
}

/// K-medoids minimizing the summed distance to the nearest medoid. Small
/// instances (see [`EXACT_LIMIT`]) are solved exactly; larger ones use PAM,
/// a greedy BUILD followed by best-improvement SWAP until no swap lowers
/// the cost, which can stop at a local optimum. Ties go to the lowest
/// index. Returns sorted medoid indices.
pub fn kmedoids(points: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k < 1 {
        return Err(Error::InvalidArgument("k-medoids needs k >= 1".into()));
    }
    if let Some(p) = points.first() {
        if let Some(bad) = points.iter().position(|q| q.len() != p.len()) {
            return Err(Error::LengthMismatch {
                expected: p.len(),
                actual: points[bad].len(),
            });
        }
    }
    if k >= n {
        return Ok((0..n).collect());
    }
    let d: Vec<Vec<f64>> = points
        .iter()
        .map(|p| points.iter().map(|q| dist(p, q)).collect())
        .collect();
    let cost = |meds: &[usize]| -> f64 {
        (0..n)
            .map(|i| meds.iter().map(|&m| d[i][m]).fold(f64::INFINITY, f64::min))
            .sum()
    };

    if binomial(n, k) <= EXACT_LIMIT {
        return Ok(exhaustive(n, k, &cost));
    }
    Ok(pam(n, k, &cost))
}

fn pam(n: usize, k: usize, cost: &dyn Fn(&[usize]) -> f64) -> Vec<usize> {
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    while medoids.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for c in 0..n {
            if medoids.contains(&c) {
                continue;
            }
            medoids.push(c);
            let v = cost(&medoids);
            medoids.pop();
            if best.is_none_or(|(b, _)| v < b) {
                best = Some((v, c));
            }
        }
        medoids.push(best.expect("k < n leaves a candidate").1);
    }

    let mut current = cost(&medoids);
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for slot in 0..k {
            for o in (0..n).filter(|o| !medoids.contains(o)) {
                let mut trial = medoids.clone();
                trial[slot] = o;
                let v = cost(&trial);
                if v < current && best.is_none_or(|(b, _, _)| v < b) {
                    best = Some((v, slot, o));
                }
            }
        }
        match best {
            Some((v, slot, o)) => {
                medoids[slot] = o;
                current = v;
            }
            None => break,
        }
    }
    medoids.sort_unstable();
    medoids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn pam_is_close_to_the_optimum_on_mid_sized_instances() {
        let mut rng = seeded(4);
        for _ in 0..20 {
            let pts: Vec<Vec<f64>> = (0..12)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let d = |m: &[usize]| medoid_cost(&pts, m);
            let exact = exhaustive(12, 3, &d);
            let approx = pam(12, 3, &d);
            assert!(d(&approx) <= 1.1 * d(&exact));
        }
    }

    #[test]
    fn large_instances_take_the_pam_route() {
        assert!(binomial(40, 8) > EXACT_LIMIT);
        assert_eq!(binomial(8, 3), 56);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i % 8) as f64 * 10.0 + (i as f64) * 0.01])
            .collect();
        let m = kmedoids(&pts, 8).unwrap();
        assert_eq!(m.len(), 8);
        let mut groups: Vec<usize> = m.iter().map(|&i| i % 8).collect();
        groups.sort_unstable();
        assert_eq!(groups, (0..8).collect::<Vec<_>>());
    }
}
