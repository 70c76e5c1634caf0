use super::{ParamId, ParamStore, Tape, Tensor, Var};

/// A tape bound to a parameter store for one forward/backward pass.
///
/// Each parameter is placed on the tape at most once, so a parameter used by
/// several tasks in the same pass accumulates all of their gradients.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, track_grads: bool) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.len()], track_grads }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn track_grads(&self) -> bool {
        self.track_grads
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.params.get(id);
        let v = self.tape.leaf(entry.value.clone(), self.track_grads && entry.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f32])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.tape.grad(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}
