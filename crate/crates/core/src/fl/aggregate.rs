use std::collections::BTreeMap;

use super::FlError;
use crate::payload::ParameterSet;
use crate::topic::Identifier;

/// Combines one round's client updates into the next global model.
pub trait Aggregator: Send {
    fn aggregate(&self, updates: &BTreeMap<Identifier, ParameterSet>) -> Result<ParameterSet, FlError>;
}

/// Sample-weighted mean (federated averaging). Sums run in ascending
/// client-id order, so the result does not depend on arrival order.
#[derive(Debug, Clone, Copy, Default)]
pub struct FedAvg;

impl Aggregator for FedAvg {
    fn aggregate(&self, updates: &BTreeMap<Identifier, ParameterSet>) -> Result<ParameterSet, FlError> {
        weighted_mean(updates.values())
    }
}

/// `value_j = sum_i n_i * v_ij / sum_i n_i`, summed in iteration order.
/// The output carries `num_samples = sum_i n_i`.
pub fn weighted_mean<'a>(updates: impl IntoIterator<Item = &'a ParameterSet>) -> Result<ParameterSet, FlError> {
    let mut iter = updates.into_iter();
    let first = iter.next().ok_or(FlError::EmptyUpdateSet)?;
    let mut acc: Vec<f64> = first.values().iter().map(|v| v * first.num_samples() as f64).collect();
    let mut total = first.num_samples();
    for update in iter {
        if !update.same_layout(first) {
            return Err(FlError::LayoutMismatch);
        }
        let w = update.num_samples() as f64;
        acc.iter_mut().zip(update.values()).for_each(|(a, v)| *a += w * v);
        total = total
            .checked_add(update.num_samples())
            .ok_or(FlError::ZeroTotalWeight)?;
    }
    if total == 0 {
        return Err(FlError::ZeroTotalWeight);
    }
    let n = total as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(first
        .with_values(acc)
        .map_err(FlError::Payload)?
        .with_num_samples(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payload::LayoutEntry;

    fn ps(values: Vec<f64>, n: u64) -> ParameterSet {
        let layout = vec![LayoutEntry {
            name: "w".into(),
            len: values.len(),
        }];
        ParameterSet::new(layout, values, n).unwrap()
    }

    #[test]
    fn single_update_unchanged() {
        let p = ps(vec![0.1, -7.0, 3.25], 9);
        assert_eq!(weighted_mean([&p]).unwrap(), p);
    }

    #[test]
    fn weighted_example() {
        let out = weighted_mean([&ps(vec![1.0, 3.0], 2), &ps(vec![4.0, 0.0], 1)]).unwrap();
        assert_eq!(out.values(), &[2.0, 2.0]);
        assert_eq!(out.num_samples(), 3);
    }

    #[test]
    fn errors() {
        assert_eq!(weighted_mean(std::iter::empty()), Err(FlError::EmptyUpdateSet));
        assert_eq!(
            weighted_mean([&ps(vec![1.0], 1), &ps(vec![1.0, 2.0], 1)]),
            Err(FlError::LayoutMismatch)
        );
        assert_eq!(
            weighted_mean([&ps(vec![1.0], 0), &ps(vec![2.0], 0)]),
            Err(FlError::ZeroTotalWeight)
        );
    }

    #[test]
    fn equal_weights_give_plain_mean() {
        let out = weighted_mean([&ps(vec![1.0, 2.0], 5), &ps(vec![3.0, 6.0], 5)]).unwrap();
        assert_eq!(out.values(), &[2.0, 4.0]);
    }

    #[test]
    fn fedavg_ignores_insertion_order() {
        let ids = ["c", "a", "b"];
        let sets = [ps(vec![0.1, 0.7], 3), ps(vec![0.2, -0.3], 11), ps(vec![1e-3, 5.0], 7)];
        let mut fwd = BTreeMap::new();
        let mut rev = BTreeMap::new();
        for (id, p) in ids.iter().zip(&sets) {
            fwd.insert(Identifier::new(*id).unwrap(), p.clone());
        }
        for (id, p) in ids.iter().zip(&sets).rev() {
            rev.insert(Identifier::new(*id).unwrap(), p.clone());
        }
        assert_eq!(FedAvg.aggregate(&fwd).unwrap(), FedAvg.aggregate(&rev).unwrap());
    }
}
