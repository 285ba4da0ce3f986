//! Integer frequency vectors `k ∈ ℤⁿ`.

/// `|k| = Σ |k_i|`.
pub fn l1_norm(k: &[i32]) -> u32 {
    k.iter().map(|v| v.unsigned_abs()).sum()
}

/// All `k ∈ ℤⁿ` with `|k| ≤ radius`, in lexicographic order.
pub fn l1_ball(n: usize, radius: u32) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(n);
    fill(n, radius as i32, &mut cur, &mut out);
    out
}

fn fill(n: usize, budget: i32, cur: &mut Vec<i32>, out: &mut Vec<Vec<i32>>) {
    if cur.len() == n {
        out.push(cur.clone());
        return;
    }
    for v in -budget..=budget {
        cur.push(v);
        fill(n, budget - v.abs(), cur, out);
        cur.pop();
    }
}

/// `k · ω`.
pub fn dot(k: &[i32], omega: &[f64]) -> f64 {
    k.iter().zip(omega).map(|(&a, &b)| a as f64 * b).sum()
}

pub fn negate(k: &[i32]) -> Vec<i32> {
    k.iter().map(|v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_sizes() {
        assert_eq!(l1_ball(1, 3).len(), 7);
        // |k|_1 <= 2 in Z^2: 1 + 4 + 8
        assert_eq!(l1_ball(2, 2).len(), 13);
        assert!(l1_ball(3, 2).iter().all(|k| l1_norm(k) <= 2));
        assert_eq!(l1_ball(2, 0), vec![vec![0, 0]]);
    }
}
