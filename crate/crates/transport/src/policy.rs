use std::collections::BTreeSet;

use opendip_core::Uri;

/// What a peer makes available to the other side of a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExposurePolicy {
    /// `None` exports every registered model.
    pub models: Option<BTreeSet<Uri>>,
    /// Whether the registry itself may be requested and mirrored.
    pub export_registry: bool,
    /// Register the other side's exported models in the local registry once
    /// the session is up.
    pub accept_remote_registry: bool,
}

impl ExposurePolicy {
    /// Exports nothing: the peer only consumes.
    pub fn closed() -> Self {
        ExposurePolicy { models: Some(BTreeSet::new()), export_registry: false, accept_remote_registry: false }
    }

    /// Exports the registry and every model in it.
    pub fn open() -> Self {
        ExposurePolicy { models: None, export_registry: true, accept_remote_registry: false }
    }

    /// Exports the registry, restricted to `models`.
    pub fn only(models: impl IntoIterator<Item = Uri>) -> Self {
        ExposurePolicy {
            models: Some(models.into_iter().collect()),
            export_registry: true,
            accept_remote_registry: false,
        }
    }

    pub fn accepting_remote_registry(mut self) -> Self {
        self.accept_remote_registry = true;
        self
    }

    pub fn exports(&self, model: &str) -> bool {
        match &self.models {
            None => true,
            Some(set) => set.iter().any(|u| u.as_str() == model),
        }
    }
}

impl Default for ExposurePolicy {
    fn default() -> Self {
        ExposurePolicy::closed()
    }
}
