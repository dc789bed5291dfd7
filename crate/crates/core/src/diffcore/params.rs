use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::DiffTensor;
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
///
/// Paths iterate in lexicographic order, which is also the checkpoint
/// payload order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, DiffTensor>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: DiffTensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::DuplicateParam { path });
        }
        self.params.insert(path, tensor.tracked());
        Ok(())
    }

    /// Gaussian initialisation with standard deviation `std`.
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x * std
            })
            .collect();
        self.insert(path, DiffTensor::new(shape.to_vec(), values)?)
    }

    pub fn insert_zeros(&mut self, path: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(path, DiffTensor::zeros(shape.to_vec())?)
    }

    pub fn get(&self, path: &str) -> Result<&DiffTensor> {
        self.params.get(path).ok_or_else(|| Error::UnknownParam {
            path: path.to_string(),
        })
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut DiffTensor> {
        self.params.get_mut(path).ok_or_else(|| Error::UnknownParam {
            path: path.to_string(),
        })
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffTensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(DiffTensor::len).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.clear_grad();
        }
    }

    /// Euclidean norm over every populated gradient.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(DiffTensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every stored gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.params.values_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Moves every parameter whose path starts with `prefix` into a new set.
    pub fn split_prefix(&mut self, prefix: &str) -> ParamSet {
        let keys: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = ParamSet::new();
        for k in keys {
            let t = self.params.remove(&k).expect("key listed above");
            out.params.insert(k, t);
        }
        out
    }

    /// Bitwise fingerprint of all parameter values (FNV-1a over the raw bits).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (path, t) in &self.params {
            for b in path.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            for v in t.values() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// `p <- p - lr * (grad + weight_decay * p)`, then clears gradients and
    /// bumps the step counter. Every parameter must carry a gradient.
    pub fn sgd_step(&mut self, learning_rate: f64, weight_decay: f64) -> Result<()> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid("sgd_step", format!("learning rate {learning_rate}")));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::invalid("sgd_step", format!("weight decay {weight_decay}")));
        }
        if let Some((path, _)) = self.params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGradient { path: path.clone() });
        }
        for t in self.params.values_mut() {
            let grad = t.grad().expect("checked above").to_vec();
            for (p, g) in t.values_mut().iter_mut().zip(&grad) {
                *p -= learning_rate * (g + weight_decay * *p);
            }
            t.clear_grad();
        }
        self.step += 1;
        Ok(())
    }

    fn manifest_text(&self) -> String {
        let mut out = format!("# step {}\n", self.step);
        for (path, t) in &self.params {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!("{path} = {}\n", dims.join(",")));
        }
        out
    }

    /// Writes `<stem>.manifest` and `<stem>.f64`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (manifest, payload) = checkpoint_paths(stem);
        fs::write(&manifest, self.manifest_text()).map_err(|e| Error::io(&manifest, e))?;
        let mut bytes = Vec::with_capacity(self.num_values() * 8);
        for t in self.params.values() {
            for v in t.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(&payload).map_err(|e| Error::io(&payload, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&payload, e))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamSet::save`]. Nothing is returned
    /// unless the manifest and payload agree completely.
    pub fn load(stem: &Path) -> Result<ParamSet> {
        let (manifest_path, payload_path) = checkpoint_paths(stem);
        let manifest =
            fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        let bad = |detail: String| Error::Checkpoint {
            path: manifest_path.clone(),
            detail,
        };

        let mut step = 0;
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        for line in manifest.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(n) = rest.trim().strip_prefix("step") {
                    step = n
                        .trim()
                        .parse()
                        .map_err(|_| bad(format!("bad step line `{line}`")))?;
                }
                continue;
            }
            let (path, dims) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed manifest line `{line}`")))?;
            let shape = dims
                .trim()
                .split(',')
                .map(|d| d.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape for `{}`", path.trim())))?;
            entries.push((path.trim().to_string(), shape));
        }

        if payload.len() % 8 != 0 {
            return Err(Error::Checkpoint {
                path: payload_path,
                detail: format!("payload length {} is not a multiple of 8", payload.len()),
            });
        }
        let mut params = BTreeMap::new();
        let mut offset = 0usize;
        for (path, shape) in entries {
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint {
                    path: payload_path,
                    detail: format!("payload ends inside parameter `{path}`"),
                });
            }
            let values = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset = end;
            let t = DiffTensor::new(shape, values)?.tracked();
            if params.insert(path.clone(), t).is_some() {
                return Err(Error::DuplicateParam { path });
            }
        }
        if offset != payload.len() {
            return Err(Error::Checkpoint {
                path: payload_path,
                detail: format!("{} trailing payload bytes", payload.len() - offset),
            });
        }
        Ok(ParamSet { params, step })
    }

    /// Loads a checkpoint and checks it matches this set's layout, reporting
    /// the first divergent path. `self` is untouched on failure.
    pub fn load_matching(&mut self, stem: &Path) -> Result<()> {
        let loaded = ParamSet::load(stem)?;
        let (manifest, _) = checkpoint_paths(stem);
        let mut mine = self.params.iter();
        let mut theirs = loaded.params.iter();
        loop {
            match (mine.next(), theirs.next()) {
                (None, None) => break,
                (Some((p, _)), None) | (None, Some((p, _))) => {
                    return Err(Error::Checkpoint {
                        path: manifest,
                        detail: format!("first divergent path `{p}`"),
                    })
                }
                (Some((p, a)), Some((q, b))) => {
                    if p != q || a.shape() != b.shape() {
                        return Err(Error::Checkpoint {
                            path: manifest,
                            detail: format!("first divergent path `{}`", p.min(q)),
                        });
                    }
                }
            }
        }
        *self = loaded;
        Ok(())
    }
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("manifest"), stem.with_extension("f64"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f64, g: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", DiffTensor::scalar(p)).unwrap();
        ps.get_mut("w").unwrap().accumulate_grad(&[g]).unwrap();
        ps
    }

    #[test]
    fn sgd_explicit_euler() {
        let mut ps = one(1.0, 1.0);
        ps.sgd_step(0.1, 0.0).unwrap();
        assert!((ps.get("w").unwrap().values()[0] - 0.9).abs() < 1e-15);
        assert_eq!(ps.step(), 1);
        assert!(ps.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut ps = one(0.37, 0.0);
        ps.sgd_step(0.1, 0.0).unwrap();
        assert_eq!(ps.get("w").unwrap().values()[0], 0.37);
    }

    #[test]
    fn sgd_weight_decay() {
        let mut ps = one(1.0, 0.0);
        ps.sgd_step(0.1, 1e-4).unwrap();
        assert!((ps.get("w").unwrap().values()[0] - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn sgd_missing_gradient_names_path() {
        let mut ps = one(1.0, 1.0);
        ps.insert("v.bias", DiffTensor::scalar(0.0)).unwrap();
        match ps.sgd_step(0.1, 0.0) {
            Err(Error::MissingGradient { path }) => assert_eq!(path, "v.bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ps.step(), 0);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a", DiffTensor::scalar(1.0)).unwrap();
        assert!(matches!(
            ps.insert("a", DiffTensor::scalar(2.0)),
            Err(Error::DuplicateParam { .. })
        ));
    }

    #[test]
    fn inserted_params_are_tracked() {
        let mut ps = ParamSet::new();
        ps.insert("a", DiffTensor::scalar(1.0)).unwrap();
        assert!(ps.get("a").unwrap().requires_grad());
    }

    #[test]
    fn save_load_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("b.bias", DiffTensor::vector(vec![0.1, -0.0, 1e-300]).unwrap())
            .unwrap();
        ps.insert(
            "a.weight",
            DiffTensor::new(vec![2, 2], vec![std::f64::consts::PI, -2.5, 7.0, 1.0 / 3.0]).unwrap(),
        )
        .unwrap();
        ps.step = 17;
        let stem = dir.path().join("model");
        ps.save(&stem).unwrap();
        let back = ParamSet::load(&stem).unwrap();
        assert_eq!(back.step(), 17);
        for ((p, a), (q, b)) in ps.iter().zip(back.iter()) {
            assert_eq!(p, q);
            assert_eq!(a.shape(), b.shape());
            let abits: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
        let text = std::fs::read_to_string(stem.with_extension("manifest")).unwrap();
        assert!(text.contains("a.weight = 2,2"));
    }

    #[test]
    fn truncated_payload_rejected_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("a", DiffTensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        ps.insert("b", DiffTensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        let stem = dir.path().join("m");
        ps.save(&stem).unwrap();
        let payload = stem.with_extension("f64");
        let bytes = std::fs::read(&payload).unwrap();
        std::fs::write(&payload, &bytes[..24]).unwrap();
        let err = ParamSet::load(&stem).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");

        let before = ps.clone();
        assert!(ps.load_matching(&stem).is_err());
        assert_eq!(ps, before);
    }

    #[test]
    fn layout_mismatch_names_first_divergent_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut saved = ParamSet::new();
        saved.insert("a", DiffTensor::vector(vec![1.0]).unwrap()).unwrap();
        saved.insert("c", DiffTensor::vector(vec![1.0]).unwrap()).unwrap();
        let stem = dir.path().join("m");
        saved.save(&stem).unwrap();

        let mut target = ParamSet::new();
        target.insert("a", DiffTensor::vector(vec![0.0]).unwrap()).unwrap();
        target.insert("b", DiffTensor::vector(vec![0.0]).unwrap()).unwrap();
        let err = target.load_matching(&stem).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }
}
