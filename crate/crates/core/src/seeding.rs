use sha2::{Digest, Sha256};

/// Derives independent named sub-seeds from one master seed so that paired
/// runs share data order while model initializations stay independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedBank {
    pub master: u64,
}

impl SeedBank {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn derive(&self, name: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn data(&self) -> u64 {
        self.derive("data")
    }

    pub fn model(&self) -> u64 {
        self.derive("model")
    }

    pub fn augmentation(&self) -> u64 {
        self.derive("augmentation")
    }

    pub fn probe(&self) -> u64 {
        self.derive("probe")
    }
}
