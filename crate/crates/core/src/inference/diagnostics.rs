use statrs::distribution::{ContinuousCDF, Normal};

/// Split every chain into two halves (dropping the middle draw of odd-length
/// chains).
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains.iter().flat_map(|c| c.first()).next().copied();
    match first {
        None => true,
        Some(v) => chains.iter().flatten().all(|&x| x == v),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / chains.len() as f64;
    let b_over_n = sample_var(&means);
    if w <= 0.0 {
        return if b_over_n > 0.0 { f64::INFINITY } else { 1.0 };
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Fractional ranks (ties averaged) of all draws, mapped to normal scores.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut flat: Vec<(f64, usize)> = chains
        .iter()
        .flatten()
        .copied()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    let s = flat.len();
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && flat[j + 1].0 == flat[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for item in &flat[i..=j] {
            ranks[item.1] = r;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let denom = s as f64 + 0.25;
    let mut out = Vec::with_capacity(chains.len());
    let mut k = 0;
    for c in chains {
        let mut z = Vec::with_capacity(c.len());
        for _ in c {
            z.push(normal.inverse_cdf((ranks[k] - 0.375) / denom));
            k += 1;
        }
        out.push(z);
    }
    out
}

/// Rank-normalized split R-hat (maximum of the bulk and folded versions).
/// `None` for constant parameters or fewer than four draws per chain.
pub fn rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 4) || is_constant(chains) {
        return None;
    }
    let min_len = chains.iter().map(|c| c.len()).min()?;
    let trimmed: Vec<Vec<f64>> = chains.iter().map(|c| c[..min_len].to_vec()).collect();
    let split = split_chains(&trimmed);
    let bulk = rhat_basic(&rank_normalize(&split));
    let median = {
        let mut all: Vec<f64> = split.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        all[all.len() / 2]
    };
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|v| (v - median).abs()).collect())
        .collect();
    let tail = if is_constant(&folded) {
        1.0
    } else {
        rhat_basic(&rank_normalize(&folded))
    };
    Some(bulk.max(tail))
}

fn autocovariance(c: &[f64], m: f64, lag: usize) -> f64 {
    let n = c.len();
    let mut s = 0.0;
    for i in 0..n - lag {
        s += (c[i] - m) * (c[i + lag] - m);
    }
    s / n as f64
}

/// Multi-chain effective sample size on split chains with Geyer's initial
/// monotone positive sequence truncation. `None` for constant parameters.
pub fn ess(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 4) || is_constant(chains) {
        return None;
    }
    let min_len = chains.iter().map(|c| c.len()).min()?;
    let trimmed: Vec<Vec<f64>> = chains.iter().map(|c| c[..min_len].to_vec()).collect();
    let split = split_chains(&trimmed);
    let m = split.len() as f64;
    let n = split[0].len();
    let nf = n as f64;
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let acov0: Vec<f64> = split
        .iter()
        .zip(&means)
        .map(|(c, &mu)| autocovariance(c, mu, 0))
        .collect();
    let w = acov0.iter().map(|a| a * nf / (nf - 1.0)).sum::<f64>() / m;
    let var_plus = w * (nf - 1.0) / nf + if m > 1.0 { sample_var(&means) } else { 0.0 };
    if var_plus <= 0.0 {
        return None;
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = split
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocovariance(c, mu, lag))
            .sum::<f64>()
            / m;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = if lag == 0 { 1.0 + rho(1) } else { rho(lag) + rho(lag + 1) };
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        lag += 2;
    }
    let total = m * nf;
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / total.log10());
    Some(total / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::chain_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn iid(chains: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..chains)
            .map(|c| {
                let mut rng = chain_rng(seed, c as u64);
                (0..n).map(|_| rng.sample(StandardNormal)).collect()
            })
            .collect()
    }

    #[test]
    fn rhat_near_one_for_iid() {
        let r = rhat(&iid(4, 1000, 1)).unwrap();
        assert!((0.99..=1.01).contains(&r), "rhat {r}");
    }

    #[test]
    fn rhat_large_for_separated_constants() {
        let chains = vec![vec![0.0; 100], vec![1.0; 100]];
        assert!(rhat(&chains).unwrap() > 1.1);
    }

    #[test]
    fn rhat_single_chain_defined() {
        let r = rhat(&iid(1, 500, 2)).unwrap();
        assert!(r.is_finite() && r < 1.05);
    }

    #[test]
    fn constant_parameter_is_not_applicable() {
        let chains = vec![vec![2.0; 50], vec![2.0; 50]];
        assert!(rhat(&chains).is_none());
        assert!(ess(&chains).is_none());
    }

    #[test]
    fn ess_iid_band() {
        let e = ess(&iid(4, 1000, 5)).unwrap();
        assert!((3000.0..=4400.0).contains(&e), "ess {e}");
    }

    #[test]
    fn ess_ar1_closed_form() {
        let rho: f64 = 0.9;
        let n = 10_000;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                let mut rng = chain_rng(17, c);
                let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - rho * rho).sqrt();
                (0..n)
                    .map(|_| {
                        x = rho * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let e = ess(&chains).unwrap();
        let expect = 4.0 * n as f64 * (1.0 - rho) / (1.0 + rho);
        assert!(e > expect / 1.5 && e < expect * 1.5, "ess {e} vs {expect}");
    }

    #[test]
    fn ess_small_sample_defined() {
        let e = ess(&iid(1, 10, 9)).unwrap();
        assert!(e > 0.0 && e.is_finite());
    }
}
