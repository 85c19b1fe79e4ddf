use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::DomainDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    /// Share of the target domain available with labels for adaptation.
    pub target_labelled_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            target_labelled_frac: 0.018,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("split fractions must lie in [0, 1]"));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("train/val/test fractions must sum to 1"));
        }
        if !(self.target_labelled_frac > 0.0 && self.target_labelled_frac <= 1.0) {
            return Err(Error::invalid("target_labelled_frac must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `floor(frac · n)`, robust to the representation error of `frac`.
pub fn count_of(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Integer table `alloc[c][s]` with row sums `row_totals`, column sums
/// `col_totals`, and every cell within one of its proportional share.
fn apportion(row_totals: &[usize], col_totals: &[usize]) -> Vec<Vec<usize>> {
    let n: usize = row_totals.iter().sum();
    let mut alloc: Vec<Vec<usize>> = row_totals
        .iter()
        .map(|&rc| {
            col_totals
                .iter()
                .map(|&cs| (rc as u128 * cs as u128 / n.max(1) as u128) as usize)
                .collect()
        })
        .collect();
    let mut row_need: Vec<usize> = row_totals
        .iter()
        .zip(&alloc)
        .map(|(t, r)| t - r.iter().sum::<usize>())
        .collect();
    let mut col_need: Vec<usize> = col_totals
        .iter()
        .enumerate()
        .map(|(s, t)| t - alloc.iter().map(|r| r[s]).sum::<usize>())
        .collect();
    // Greedy: biggest row deficit first, each into the columns with the biggest deficit.
    let mut rows: Vec<usize> = (0..row_totals.len()).collect();
    rows.sort_by_key(|&c| std::cmp::Reverse(row_need[c]));
    for c in rows {
        let mut cols: Vec<usize> = (0..col_totals.len()).collect();
        cols.sort_by_key(|&s| std::cmp::Reverse(col_need[s]));
        for &s in cols.iter().take(row_need[c]) {
            if col_need[s] == 0 {
                break;
            }
            alloc[c][s] += 1;
            col_need[s] -= 1;
        }
        row_need[c] = 0;
    }
    alloc
}

fn indices_by_class(data: &DomainDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); data.num_classes()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// Stratified, disjoint train/validation/test partition. Each split keeps
/// the original row order.
pub fn split(
    rng: &mut Rng,
    data: &DomainDataset,
    spec: &SplitSpec,
) -> Result<(DomainDataset, DomainDataset, DomainDataset)> {
    spec.validate()?;
    let n = data.len();
    let n_train = count_of(spec.train_frac, n);
    let n_val = count_of(spec.val_frac, n);
    let n_test = n.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::invalid(format!(
            "{n} rows give an empty split ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut by_class = indices_by_class(data);
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let alloc = apportion(&counts, &[n_train, n_val, n_test]);
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for (c, idx) in by_class.iter_mut().enumerate() {
        rng.shuffle(idx);
        let mut rest = &idx[..];
        for (s, part) in parts.iter_mut().enumerate() {
            let (take, tail) = rest.split_at(alloc[c][s]);
            part.extend_from_slice(take);
            rest = tail;
        }
    }
    let [mut tr, mut va, mut te] = parts;
    tr.sort_unstable();
    va.sort_unstable();
    te.sort_unstable();
    Ok((data.select(&tr), data.select(&va), data.select(&te)))
}

/// Labelled subset with `⌊frac·n⌋` rows; see [`subsample_labelled_count`].
pub fn subsample_labelled(rng: &mut Rng, data: &DomainDataset, frac: f64) -> Result<DomainDataset> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::invalid(format!("labelled fraction {frac} not in (0, 1]")));
    }
    if frac == 1.0 {
        return Ok(data.clone());
    }
    subsample_labelled_count(rng, data, count_of(frac, data.len()))
}

/// Stratified subset of exactly `m` rows. Every class present in `data`
/// keeps at least one row whenever `m` allows it.
pub fn subsample_labelled_count(rng: &mut Rng, data: &DomainDataset, m: usize) -> Result<DomainDataset> {
    if m == 0 {
        return Err(Error::invalid("labelled subset would be empty"));
    }
    if m > data.len() {
        return Err(Error::invalid(format!(
            "asked for {m} labelled rows from {}",
            data.len()
        )));
    }
    let n = data.len();
    let mut by_class = indices_by_class(data);
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let mut present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    let mut quota = vec![0usize; counts.len()];
    if m < present.len() {
        // too few rows for every class: keep the most frequent ones
        present.sort_by_key(|&c| (std::cmp::Reverse(counts[c]), c));
        for &c in present.iter().take(m) {
            quota[c] = 1;
        }
    } else {
        let ideal = |c: usize| m as f64 * counts[c] as f64 / n as f64;
        for &c in &present {
            quota[c] = (ideal(c).floor() as usize).max(1);
        }
        let mut total: usize = quota.iter().sum();
        while total > m {
            let c = *present
                .iter()
                .filter(|&&c| quota[c] > 1)
                .max_by(|&&a, &&b| {
                    (quota[a] as f64 - ideal(a)).total_cmp(&(quota[b] as f64 - ideal(b)))
                })
                .expect("m >= number of present classes");
            quota[c] -= 1;
            total -= 1;
        }
        while total < m {
            let c = *present
                .iter()
                .filter(|&&c| quota[c] < counts[c])
                .max_by(|&&a, &&b| {
                    (ideal(a) - quota[a] as f64).total_cmp(&(ideal(b) - quota[b] as f64))
                })
                .expect("m <= n");
            quota[c] += 1;
            total += 1;
        }
    }
    let mut chosen = Vec::with_capacity(m);
    for (c, idx) in by_class.iter_mut().enumerate() {
        rng.shuffle(idx);
        chosen.extend_from_slice(&idx[..quota[c]]);
    }
    chosen.sort_unstable();
    Ok(data.select(&chosen))
}
