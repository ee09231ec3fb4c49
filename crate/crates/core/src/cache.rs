//! Per-layer key/value store addressed by token id.

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::types::{Modality, TokenId};

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub id: TokenId,
    pub modality: Modality,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// Entries within a layer stay in sequence order; ids are unique per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layers: Vec<Vec<CacheEntry>>,
}

impl KVCache {
    pub fn new(num_layers: usize) -> Self {
        Self {
            layers: vec![Vec::new(); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> &[CacheEntry] {
        &self.layers[layer]
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Vec::is_empty)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Cache(format!(
                "layer {layer} out of range for a {}-layer cache",
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn push(&mut self, layer: usize, entry: CacheEntry) -> Result<()> {
        self.check_layer(layer)?;
        if self.layers[layer].iter().any(|e| e.id == entry.id) {
            return Err(Error::Cache(format!(
                "token {} already cached at layer {layer}",
                entry.id
            )));
        }
        self.layers[layer].push(entry);
        Ok(())
    }

    /// Removes a vision entry's key and value together. Text entries are
    /// never evicted; asking for one is an error.
    pub fn evict(&mut self, layer: usize, id: TokenId) -> Result<bool> {
        self.check_layer(layer)?;
        let entries = &mut self.layers[layer];
        match entries.iter().position(|e| e.id == id) {
            Some(i) if entries[i].modality == Modality::Text => Err(Error::Cache(format!(
                "refusing to evict text token {id} at layer {layer}"
            ))),
            Some(i) => {
                entries.remove(i);
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn ids(&self, layer: usize) -> Vec<TokenId> {
        self.layers[layer].iter().map(|e| e.id).collect()
    }

    pub fn vision_ids(&self, layer: usize) -> Vec<TokenId> {
        self.layers[layer]
            .iter()
            .filter(|e| e.modality == Modality::Vision)
            .map(|e| e.id)
            .collect()
    }

    pub fn vision_count(&self, layer: usize) -> usize {
        self.layers[layer]
            .iter()
            .filter(|e| e.modality == Modality::Vision)
            .count()
    }

    pub fn keys(&self, layer: usize, width: usize) -> Matrix {
        let data = self.layers[layer]
            .iter()
            .flat_map(|e| e.key.iter().copied());
        Matrix::from_vec(self.layers[layer].len(), width, data.collect())
            .expect("cached keys have the model width")
    }

    pub fn values(&self, layer: usize, width: usize) -> Matrix {
        let data = self.layers[layer]
            .iter()
            .flat_map(|e| e.value.iter().copied());
        Matrix::from_vec(self.layers[layer].len(), width, data.collect())
            .expect("cached values have the model width")
    }

    /// Total entries over all layers.
    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u32, modality: Modality) -> CacheEntry {
        CacheEntry {
            id: TokenId(id),
            modality,
            key: vec![id as f64; 2],
            value: vec![-(id as f64); 2],
        }
    }

    #[test]
    fn push_and_evict() {
        let mut c = KVCache::new(2);
        c.push(0, entry(1, Modality::Vision)).unwrap();
        c.push(0, entry(2, Modality::Text)).unwrap();
        assert!(c.push(0, entry(1, Modality::Vision)).is_err());
        assert!(c.push(2, entry(3, Modality::Vision)).is_err());
        assert!(c.evict(0, TokenId(1)).unwrap());
        assert!(!c.evict(0, TokenId(1)).unwrap());
        assert!(c.evict(0, TokenId(2)).is_err());
        assert_eq!(c.ids(0), vec![TokenId(2)]);
        assert_eq!(c.keys(0, 2).data(), &[2.0, 2.0]);
        assert_eq!(c.values(0, 2).data(), &[-2.0, -2.0]);
    }
}
