//! Group-level k-fold splitting: all samples of a group land in the same fold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cross-validation fold (split-manifest schema).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Partition `(sample_id, group_id)` pairs into `k` folds.
///
/// Groups are taken largest first (ties in order of first appearance) and each
/// goes to the fold with the fewest samples so far (ties to the lower index).
/// Sample ids keep their input order inside every list.
pub fn group_kfold<S: AsRef<str>, G: AsRef<str>>(samples: &[(S, G)], k: usize) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let mut groups: Vec<(&str, usize)> = Vec::new();
    for (_, g) in samples {
        let g = g.as_ref();
        match groups.iter_mut().find(|(name, _)| *name == g) {
            Some((_, n)) => *n += 1,
            None => groups.push((g, 1)),
        }
    }
    if groups.len() < k {
        return Err(Error::invalid(format!(
            "{} distinct groups cannot fill {k} folds",
            groups.len()
        )));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(groups[i].1));

    let mut load = vec![0usize; k];
    let mut fold_of = vec![0usize; groups.len()];
    for i in order {
        let target = (0..k).min_by_key(|&f| (load[f], f)).expect("k > 0");
        load[target] += groups[i].1;
        fold_of[i] = target;
    }

    Ok((0..k)
        .map(|f| {
            let mut fold = Fold {
                fold: f,
                train: Vec::new(),
                val: Vec::new(),
            };
            for (id, g) in samples {
                let gi = groups.iter().position(|(name, _)| *name == g.as_ref()).expect("group indexed");
                let list = if fold_of[gi] == f { &mut fold.val } else { &mut fold.train };
                list.push(id.as_ref().to_string());
            }
            fold
        })
        .collect())
}
