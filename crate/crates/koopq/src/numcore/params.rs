//! Persistent parameter storage.
//!
//! Tapes are rebuilt for every batch, but parameters live across the whole
//! training run. The store owns the values; layers hold [`ParamId`]s and
//! splice their current values onto a tape at forward time. Registration
//! order is deterministic for a given model config, which is what makes
//! checkpoints and repeated runs line up exactly.

/// Handle to one named parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Flat, append-only collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; `values` must fill `shape` exactly.
    pub fn register(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let name = name.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "param '{}': shape {:?} holds {} elements but {} values were given",
            name,
            shape,
            numel,
            values.len()
        );
        self.entries.push(ParamEntry { name, shape, values });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn numel(&self, id: ParamId) -> usize {
        self.entries[id.0].values.len()
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Looks a parameter up by its registration name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Copies all values out (used for best-checkpoint tracking).
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.values.clone()).collect()
    }

    /// Restores a snapshot taken from this same store.
    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(
            snapshot.len(),
            self.entries.len(),
            "snapshot holds {} params but the store has {}",
            snapshot.len(),
            self.entries.len()
        );
        for (entry, values) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(entry.values.len(), values.len(), "snapshot shape drift for '{}'", entry.name);
            entry.values.copy_from_slice(values);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut store = ParamStore::new();
        let w = store.register("w", vec![2, 3], vec![1.0; 6]);
        let b = store.register("b", vec![3], vec![0.0; 3]);
        assert_eq!(store.len(), 2);
        assert_eq!(store.shape(w), &[2, 3]);
        assert_eq!(store.name(b), "b");
        assert_eq!(store.find("w"), Some(w));
        assert_eq!(store.find("missing"), None);
        assert_eq!(store.total_len(), 9);
    }

    #[test]
    fn snapshot_roundtrip_is_exact() {
        let mut store = ParamStore::new();
        let w = store.register("w", vec![3], vec![1.0e-300, -0.0, 3.5]);
        let snap = store.snapshot();
        store.values_mut(w).copy_from_slice(&[9.0, 9.0, 9.0]);
        store.restore(&snap);
        assert_eq!(store.values(w), &[1.0e-300, -0.0, 3.5]);
    }

    #[test]
    #[should_panic(expected = "shape [2, 2] holds 4 elements")]
    fn register_rejects_length_mismatch() {
        let mut store = ParamStore::new();
        store.register("w", vec![2, 2], vec![1.0; 3]);
    }
}
