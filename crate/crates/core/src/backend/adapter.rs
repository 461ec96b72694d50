//! Plug-in loading for pretrained backends.
//!
//! The toolkit never links a pretrained model itself. A host program
//! registers factories under a name; the backend selector `adapter:<spec>`
//! hands `<spec>` to the factory registered for the text before its first
//! `:` (or the whole spec when there is none). Factories typically read
//! weights and credentials from the directory named by [`ADAPTER_ENV`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::DiffusionBackend;
use crate::error::{Error, Result};

/// Environment variable pointing adapters at weights and credentials.
pub const ADAPTER_ENV: &str = "LATENT_COMPOSE_ADAPTER_HOME";

/// Spatial compression factor of latent-diffusion autoencoders.
pub const ADAPTER_COMPRESSION_FACTOR: usize = 8;

type Factory = Box<dyn Fn(&str) -> Result<Arc<dyn DiffusionBackend>> + Send + Sync>;

#[derive(Default)]
pub struct AdapterRegistry {
    factories: BTreeMap<String, Factory>,
}

impl fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdapterRegistry")
            .field("adapters", &self.factories.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: impl Into<String>, factory: F)
    where
        F: Fn(&str) -> Result<Arc<dyn DiffusionBackend>> + Send + Sync + 'static,
    {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn load(&self, spec: &str) -> Result<Arc<dyn DiffusionBackend>> {
        let name = spec.split(':').next().unwrap_or_default();
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::Capability(format!(
                "no adapter plug-in registered for `{spec}` (registered: {:?})",
                self.factories.keys().collect::<Vec<_>>()
            ))
        })?;
        factory(spec)
    }
}

/// Latent grid for an image under a codec with the given compression factor.
pub fn latent_resolution(image: (usize, usize), factor: usize) -> Result<(usize, usize)> {
    let (h, w) = image;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "image {h}×{w} not divisible by compression factor {factor}"
        )));
    }
    Ok((h / factor, w / factor))
}
