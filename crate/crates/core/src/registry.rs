// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Name-keyed registries for interchangeable algorithm variants.
//!
//! Hamiltonian models, semigroup evaluators, recovery strategies and Kraus
//! ensembles are all looked up by name at runtime, so experiment configs and
//! CLI flags can select them without code changes.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Anything that can be stored in a [`Registry`].
pub trait Named {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized + Named> {
    kind: &'static str,
    entries: Vec<Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Registers an entry; a later registration under the same name replaces the earlier one.
    pub fn register(&mut self, entry: Arc<T>) {
        let name = entry.name();
        self.entries.retain(|e| e.name() != name);
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<T>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Dummy(&'static str, u32);
    impl Named for Dummy {
        fn name(&self) -> &'static str {
            self.0
        }
    }

    #[test]
    fn lookup_and_replace() {
        let mut reg: Registry<Dummy> = Registry::new("dummy");
        reg.register(Arc::new(Dummy("a", 1)));
        reg.register(Arc::new(Dummy("b", 2)));
        reg.register(Arc::new(Dummy("a", 3)));
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.get("a").unwrap().1, 3);
        let err = reg.get("zzz").err().unwrap().to_string();
        assert!(err.contains("unknown dummy 'zzz'"), "{err}");
        assert!(err.contains("b, a"), "{err}");
    }
}
