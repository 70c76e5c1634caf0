use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{Component, MultiTaskModel};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// `(source name, target name)` per copied tensor.
    pub copied: Vec<(String, String)>,
    pub scalars: usize,
}

/// Copies whole components from `source` into `target`. Every tensor of a
/// mapped component must exist on both sides with identical shape; any
/// mismatch aborts before anything is written.
pub fn transfer_parameters(
    target: &mut MultiTaskModel,
    source: &MultiTaskModel,
    mapping: &[(Component, Component)],
) -> Result<TransferReport, TrainError> {
    let mut plan = Vec::new();
    for &(from, to) in mapping {
        let src: Vec<_> = source.component_params(from);
        let dst = target.component_params(to);
        if src.len() != dst.len() {
            return Err(TrainError::Param {
                name: to.prefix().into(),
                message: format!("{} tensors in source {from}, {} in target", src.len(), dst.len()),
            });
        }
        for s in src {
            let se = source.params().get(s);
            let rest = &se.name[from.prefix().len()..];
            let tname = format!("{}{rest}", to.prefix());
            let Some(t) = target.params().id(&tname) else {
                return Err(TrainError::Param { name: tname, message: format!("no counterpart for {}", se.name) });
            };
            let te = target.params().get(t);
            if te.value.shape() != se.value.shape() {
                return Err(TrainError::Param {
                    name: tname,
                    message: format!("target shape {:?} differs from source shape {:?}", te.value.shape(), se.value.shape()),
                });
            }
            plan.push((s, t));
        }
    }
    let mut report = TransferReport::default();
    for (s, t) in plan {
        let se = source.params().get(s);
        report.scalars += se.value.numel();
        report.copied.push((se.name.clone(), target.params().get(t).name.clone()));
        target.params_mut().value_mut(t).data_mut().copy_from_slice(se.value.data());
    }
    Ok(report)
}
