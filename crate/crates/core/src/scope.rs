use std::collections::HashSet;

use crate::numeric::{Graph, ParamId, ParamStore, Var};

/// Decides, per parameter, whether a recording makes it a trainable leaf or
/// a frozen constant.
#[derive(Debug, Clone, Copy)]
pub struct ParamScope<'a> {
    pub store: &'a ParamStore,
    trainable: Trainable<'a>,
}

#[derive(Debug, Clone, Copy)]
enum Trainable<'a> {
    All,
    None,
    Only(&'a HashSet<ParamId>),
}

impl<'a> ParamScope<'a> {
    pub fn training(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: Trainable::All,
        }
    }

    /// Forward-only recording; no parameter receives a gradient.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: Trainable::None,
        }
    }

    pub fn restricted(store: &'a ParamStore, trainable: &'a HashSet<ParamId>) -> Self {
        Self {
            store,
            trainable: Trainable::Only(trainable),
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        match self.trainable {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Only(set) => set.contains(&id),
        }
    }

    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.is_trainable(id) {
            g.param(self.store, id)
        } else {
            g.frozen(self.store, id)
        }
    }
}
