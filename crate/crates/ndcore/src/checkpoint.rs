//! JSON container of named tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(seed: u64, config_hash: String, names: &[String], params: &[Tensor]) -> Self {
        let tensors = names
            .iter()
            .zip(params)
            .map(|(n, t)| NamedTensor { name: n.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        Checkpoint { seed, config_hash, tensors }
    }

    /// Tensors in the order of `names`; every name must be present with a
    /// valid shape.
    pub fn params_for(&self, names: &[String]) -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| {
                let nt = self
                    .tensors
                    .iter()
                    .find(|t| &t.name == n)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{n}`")))?;
                Tensor::new(&nt.shape, nt.data.clone())
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_exact() {
        let names = vec!["w".to_string(), "b".to_string()];
        let params = vec![
            Tensor::new(&[2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 7.25]).unwrap(),
            Tensor::new(&[2], vec![std::f64::consts::PI, -0.0]).unwrap(),
        ];
        let ck = Checkpoint::from_params(7, "abc".into(), &names, &params);
        let dir = std::env::temp_dir().join(format!("ndcore-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params_for(&names).unwrap(), params);
        assert!(back.params_for(&["missing".to_string()]).is_err());
        std::fs::remove_dir_all(dir).ok();
    }
}
