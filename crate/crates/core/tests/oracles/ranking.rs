//! Brute-force ranking metrics.

/// O(N²) pairwise AUC: a win counts 1, a tie 1/2.
pub fn auc_oracle(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// AP straight from its definition: mean over positives of the precision of
/// the prefix ending at that positive. The ranking is descending score with
/// ties in index order.
pub fn ap_oracle(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| positive[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let prefix = (0..scores.len()).filter(|&j| ahead(j, i)).count() as f64;
            let hits = positives.iter().filter(|&&j| ahead(j, i)).count() as f64;
            hits / prefix
        })
        .sum();
    Some(total / positives.len() as f64)
}
