//! Small statistics helpers shared by training logs and evaluation.

/// Spearman rank correlation with average ranks for ties.
/// Returns 0.0 when either side is constant (no ordering information).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    pearson(&ranks(xs), &ranks(ys))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // average rank over the tie run [i, j]
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_monotone_is_one() {
        let xs = [1.0, 2.0, 5.0, 9.0];
        let ys = [10.0, 20.0, 21.0, 400.0];
        assert!((spearman(&xs, &ys) - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = ys.iter().map(|y| -y).collect();
        assert!((spearman(&xs, &rev) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_use_average_ranks() {
        // hand value: ranks x = [1.5, 1.5, 3], y = [1, 2, 3]
        let xs = [4.0, 4.0, 7.0];
        let ys = [1.0, 2.0, 3.0];
        let got = spearman(&xs, &ys);
        // pearson([1.5,1.5,3],[1,2,3]) = (cov)/(sqrt(vx*vy))
        // mx=2, my=2 → cov = (−0.5)(−1) + (−0.5)(0) + (1)(1) = 1.5
        // vx = 0.25+0.25+1 = 1.5, vy = 2 → 1.5/sqrt(3) = 0.8660
        assert!((got - 1.5 / 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_side_gives_zero() {
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }
}
