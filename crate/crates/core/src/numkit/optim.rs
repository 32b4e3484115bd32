//! Plain SGD with per-group learning rates.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numkit::tensor::Tensor;

/// A named set of parameters sharing one learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub members: BTreeSet<String>,
}

impl ParamGroup {
    /// A zero rate is accepted and leaves the group's parameters untouched.
    pub fn new<I, S>(name: impl Into<String>, lr: f64, members: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let name = name.into();
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!(
                "learning rate of group `{name}` must be finite and non-negative, got {lr}"
            )));
        }
        Ok(ParamGroup {
            name,
            lr,
            members: members.into_iter().map(Into::into).collect(),
        })
    }
}

/// `p ← p − η_group · g` for every gradient in `grads`.
///
/// Every gradient must belong to exactly one group and have a matching parameter.
pub fn sgd_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    groups: &[ParamGroup],
) -> Result<()> {
    for (key, grad) in grads {
        let mut owners = groups.iter().filter(|g| g.members.contains(key));
        let group = owners
            .next()
            .ok_or_else(|| Error::Config(format!("parameter `{key}` has no learning-rate group")))?;
        if let Some(other) = owners.next() {
            return Err(Error::Config(format!(
                "parameter `{key}` belongs to both `{}` and `{}`",
                group.name, other.name
            )));
        }
        let param = params
            .get_mut(key)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter `{key}`")))?;
        if group.lr != 0.0 {
            param.axpy(-group.lr, grad)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn single_step() {
        let mut params = BTreeMap::from([("p".to_string(), one(1.0))]);
        let grads = BTreeMap::from([("p".to_string(), one(2.0))]);
        let groups = [ParamGroup::new("all", 0.1, ["p"]).unwrap()];
        sgd_step(&mut params, &grads, &groups).unwrap();
        assert!((params["p"].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = BTreeMap::from([("p".to_string(), one(1.5))]);
        let grads = BTreeMap::from([("p".to_string(), one(0.0))]);
        let groups = [ParamGroup::new("all", 0.1, ["p"]).unwrap()];
        sgd_step(&mut params, &grads, &groups).unwrap();
        assert_eq!(params["p"].item(), 1.5);
    }

    #[test]
    fn groups_step_independently_and_swap_exactly() {
        let grads = BTreeMap::from([("a".to_string(), one(1.0)), ("b".to_string(), one(1.0))]);
        let run = |ga: &str, gb: &str| {
            let mut params = BTreeMap::from([("a".to_string(), one(0.0)), ("b".to_string(), one(0.0))]);
            let groups = [
                ParamGroup::new("representation", 0.001, [ga]).unwrap(),
                ParamGroup::new("classifier", 0.01, [gb]).unwrap(),
            ];
            sgd_step(&mut params, &grads, &groups).unwrap();
            (params["a"].item(), params["b"].item())
        };
        let (a, b) = run("a", "b");
        assert_eq!((a, b), (-0.001, -0.01));
        let (a2, b2) = run("b", "a");
        assert_eq!((a2, b2), (b, a));
    }

    #[test]
    fn missing_group_is_config_error() {
        let mut params = BTreeMap::from([("p".to_string(), one(1.0))]);
        let grads = BTreeMap::from([("p".to_string(), one(1.0))]);
        let groups = [ParamGroup::new("other", 0.1, ["q"]).unwrap()];
        assert!(matches!(sgd_step(&mut params, &grads, &groups), Err(Error::Config(_))));
        assert!(ParamGroup::new("neg", -0.1, ["p"]).is_err());
    }
}
