//! Built-in embedders. "Text" is modeled as named anchor vectors: hand-set
//! for the channel-stats embedder, seed-derived or explicitly registered for
//! the linear probe, and class means for the trained classifier. Anchors can
//! also be loaded from a plain text file (`name v1 v2 ...` per line).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::guidance::Embedder;
use crate::rng::Rng;

/// Names accepted by [`builtin_embedder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuiltinEmbedder {
    LinearProbe,
    ChannelStats,
    TrainedClassifier,
}

impl BuiltinEmbedder {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear-probe" => Ok(BuiltinEmbedder::LinearProbe),
            "channel-stats" => Ok(BuiltinEmbedder::ChannelStats),
            "trained-classifier" => Ok(BuiltinEmbedder::TrainedClassifier),
            other => Err(Error::UnknownName(other.into())),
        }
    }
}

/// Construct a built-in embedder by name for the given data shape.
/// The trained classifier needs labeled data and is built through
/// [`ClassifierEmbedder::train`]; asking for it here with no data errors.
pub fn builtin_embedder(
    name: &str,
    data_shape: &[usize],
    seed: u64,
) -> Result<Box<dyn Embedder + Send + Sync>> {
    match BuiltinEmbedder::parse(name)? {
        BuiltinEmbedder::LinearProbe => Ok(Box::new(LinearProbeEmbedder::new(
            data_shape, 32, seed,
        ))),
        BuiltinEmbedder::ChannelStats => {
            Ok(Box::new(ChannelStatsEmbedder::new(data_shape.to_vec())))
        }
        BuiltinEmbedder::TrainedClassifier => Err(Error::InvalidConfig(
            "trained-classifier needs labeled data; build it with ClassifierEmbedder::train".into(),
        )),
    }
}

/// Parse `name v1 v2 ...` lines into anchor vectors.
pub fn load_anchor_file(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let file = std::fs::File::open(path)?;
    let mut out = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line has a first token");
        let values: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        match values {
            Ok(v) if !v.is_empty() => {
                out.insert(name.to_string(), v);
            }
            _ => {
                return Err(Error::MalformedHeader(format!(
                    "anchor file line {}: expected 'name v1 v2 ...'",
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

fn anchor_from_registry(
    registry: &BTreeMap<String, Vec<f64>>,
    name: &str,
    dim: usize,
) -> Result<Option<Tensor>> {
    match registry.get(name) {
        None => Ok(None),
        Some(v) if v.len() == dim => Ok(Some(Tensor::from_vec(v.clone()))),
        Some(v) => Err(Error::ShapeMismatch {
            op: "embed_anchor",
            detail: format!("anchor '{}' has {} values, embedder dim is {}", name, v.len(), dim),
        }),
    }
}

/// A fixed random linear map of the flattened data. Unknown anchors get a
/// deterministic unit-scale vector derived from (seed, name), so any prompt
/// name is usable; meaningful anchors can be registered explicitly.
pub struct LinearProbeEmbedder {
    data_shape: Vec<usize>,
    dim: usize,
    seed: u64,
    map: Tensor,
    anchors: BTreeMap<String, Vec<f64>>,
}

impl LinearProbeEmbedder {
    pub fn new(data_shape: &[usize], dim: usize, seed: u64) -> Self {
        let flat: usize = data_shape.iter().product();
        let mut rng = Rng::seed_from(seed);
        let scale = 1.0 / (flat as f64).sqrt();
        let data: Vec<f64> = (0..dim * flat).map(|_| rng.normal() * scale).collect();
        LinearProbeEmbedder {
            data_shape: data_shape.to_vec(),
            dim,
            seed,
            map: Tensor::new(vec![dim, flat], data).expect("map shape consistent"),
            anchors: BTreeMap::new(),
        }
    }

    pub fn register_anchor(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "register_anchor",
                detail: format!("{} values vs dim {}", values.len(), self.dim),
            });
        }
        self.anchors.insert(name.to_string(), values);
        Ok(())
    }

    pub fn register_anchors(&mut self, anchors: BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, v) in anchors {
            self.register_anchor(&name, v)?;
        }
        Ok(())
    }

    /// Register an anchor at the mean embedding of a set of examples;
    /// the practical way to plant a data-driven direction.
    pub fn register_anchor_from_examples(&mut self, name: &str, examples: &[Tensor]) -> Result<()> {
        let mut acc = vec![0.0; self.dim];
        for x in examples {
            let e = self.embed_image(x)?;
            for (a, v) in acc.iter_mut().zip(e.data()) {
                *a += v / examples.len() as f64;
            }
        }
        self.register_anchor(name, acc)
    }
}

impl Embedder for LinearProbeEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, x: &Tensor) -> Result<Tensor> {
        let flat: usize = self.data_shape.iter().product();
        if x.numel() != flat {
            return Err(Error::ShapeMismatch {
                op: "embed_image",
                detail: format!("input {:?} vs data shape {:?}", x.shape(), self.data_shape),
            });
        }
        let col = x.reshape(&[flat, 1])?;
        self.map.matmul(&col)?.reshape(&[self.dim])
    }

    fn embed_anchor(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = anchor_from_registry(&self.anchors, name, self.dim)? {
            return Ok(t);
        }
        // deterministic direction from (seed, name)
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let derived_seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = Rng::seed_from(derived_seed);
        Ok(rng.normal_tensor(&[self.dim]))
    }
}

/// Per-channel mean and variance features with hand-set anchors. For data of
/// shape [C, ...] the embedding is [mean_1..mean_C, var_1..var_C]; rank-1
/// data treats each coordinate as a channel (variances identically zero).
///
/// Hand-set anchors: "bright" (+mean), "dark" (-mean), "vivid" (+variance),
/// "flat" (-variance), "neutral" (origin; reference use only).
pub struct ChannelStatsEmbedder {
    data_shape: Vec<usize>,
    channels: usize,
    anchors: BTreeMap<String, Vec<f64>>,
}

impl ChannelStatsEmbedder {
    pub fn new(data_shape: Vec<usize>) -> Self {
        let channels = data_shape[0];
        ChannelStatsEmbedder {
            data_shape,
            channels,
            anchors: BTreeMap::new(),
        }
    }

    pub fn register_anchor(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "register_anchor",
                detail: format!("{} values vs dim {}", values.len(), self.dim()),
            });
        }
        self.anchors.insert(name.to_string(), values);
        Ok(())
    }
}

impl Embedder for ChannelStatsEmbedder {
    fn dim(&self) -> usize {
        2 * self.channels
    }

    fn embed_image(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.data_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "embed_image",
                detail: format!("input {:?} vs data shape {:?}", x.shape(), self.data_shape),
            });
        }
        let c = self.channels;
        let per: usize = self.data_shape[1..].iter().product::<usize>().max(1);
        let rows = x.reshape(&[c, per])?;
        let mean = rows.mean_last()?;
        let centered = rows.sub(&mean)?;
        let var = centered.mul(&centered)?.mean_last()?;
        Tensor::concat(0, &[&mean.reshape(&[c])?, &var.reshape(&[c])?])
    }

    fn embed_anchor(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = anchor_from_registry(&self.anchors, name, self.dim())? {
            return Ok(t);
        }
        let c = self.channels;
        let mut v = vec![0.0; 2 * c];
        match name {
            "bright" => v[..c].fill(1.0),
            "dark" => v[..c].fill(-1.0),
            "vivid" => v[c..].fill(1.0),
            "flat" => v[c..].fill(-1.0),
            "neutral" => {}
            other => return Err(Error::UnknownName(other.into())),
        }
        Ok(Tensor::from_vec(v))
    }
}

/// Penultimate features of a small supervised classifier trained on labeled
/// toy data; anchors are the post-training class-mean embeddings under the
/// class names.
pub struct ClassifierEmbedder {
    data_shape: Vec<usize>,
    hidden: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    anchors: BTreeMap<String, Vec<f64>>,
}

impl ClassifierEmbedder {
    /// Train with Adam on softmax cross-entropy, then freeze.
    pub fn train(
        images: &[Tensor],
        labels: &[usize],
        class_names: &[&str],
        hidden: usize,
        steps: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::InvalidConfig(
                "classifier needs equally many images and labels".into(),
            ));
        }
        let k = class_names.len();
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::InvalidConfig("label out of class range".into()));
        }
        let data_shape = images[0].shape().to_vec();
        let flat: usize = data_shape.iter().product();
        let mut rng = Rng::seed_from(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * bound).collect()
        };
        let mut params = BTreeMap::from([
            ("w1".to_string(), Tensor::new(vec![flat, hidden], draw(flat * hidden, flat))?),
            ("b1".to_string(), Tensor::zeros(&[hidden])),
            ("w2".to_string(), Tensor::new(vec![hidden, k], draw(hidden * k, hidden))?),
            ("b2".to_string(), Tensor::zeros(&[k])),
        ]);
        let mut adam = crate::autodiff::AdamState::new();
        let mut order_rng = Rng::seed_from(seed ^ 0x9e3779b97f4a7c15);
        for step in 0..steps {
            let i = order_rng.int_in(0, images.len() - 1);
            let g = Graph::new();
            let w1 = g.leaf(&params["w1"]);
            let b1 = g.leaf(&params["b1"]);
            let w2 = g.leaf(&params["w2"]);
            let b2 = g.leaf(&params["b2"]);
            let x = images[i].reshape(&[1, flat])?;
            let feat = x.matmul(&w1)?.add(&b1.reshape(&[1, hidden])?)?.swish()?;
            let logits = feat.matmul(&w2)?.add(&b2.reshape(&[1, k])?)?;
            // cross-entropy via shifted log-sum-exp; the shift is a constant
            let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let shifted = logits.add_scalar(-max)?;
            let lse = shifted.exp()?.sum()?.log()?;
            let mut onehot = vec![0.0; k];
            onehot[labels[i]] = 1.0;
            let z_y = shifted
                .reshape(&[k])?
                .mul(&Tensor::from_vec(onehot))?
                .sum()?;
            let loss = lse.sub(&z_y)?;
            let grads = g.backward(&loss)?;
            let grad_map = BTreeMap::from([
                ("w1".to_string(), grads.get(&w1)),
                ("b1".to_string(), grads.get(&b1)),
                ("w2".to_string(), grads.get(&w2)),
                ("b2".to_string(), grads.get(&b2)),
            ]);
            crate::autodiff::adam_step(&mut params, &mut adam, &grad_map, lr)?;
            if params.values().any(|t| !t.is_finite()) {
                return Err(Error::Divergence { step });
            }
        }

        let mut embedder = ClassifierEmbedder {
            data_shape,
            hidden,
            w1: params["w1"].clone(),
            b1: params["b1"].clone(),
            w2: params["w2"].clone(),
            b2: params["b2"].clone(),
            anchors: BTreeMap::new(),
        };
        // class-mean anchors
        let mut sums = vec![vec![0.0; hidden]; k];
        let mut counts = vec![0usize; k];
        for (x, &y) in images.iter().zip(labels) {
            let e = embedder.embed_image(x)?;
            for (a, v) in sums[y].iter_mut().zip(e.data()) {
                *a += v;
            }
            counts[y] += 1;
        }
        for (ci, name) in class_names.iter().enumerate() {
            if counts[ci] == 0 {
                return Err(Error::InvalidConfig(format!("class '{}' has no examples", name)));
            }
            let mean: Vec<f64> = sums[ci].iter().map(|s| s / counts[ci] as f64).collect();
            embedder.anchors.insert(name.to_string(), mean);
        }
        Ok(embedder)
    }
}

impl Embedder for ClassifierEmbedder {
    fn dim(&self) -> usize {
        self.hidden
    }

    fn embed_image(&self, x: &Tensor) -> Result<Tensor> {
        let flat: usize = self.data_shape.iter().product();
        if x.numel() != flat {
            return Err(Error::ShapeMismatch {
                op: "embed_image",
                detail: format!("input {:?} vs data shape {:?}", x.shape(), self.data_shape),
            });
        }
        let row = x.reshape(&[1, flat])?;
        row.matmul(&self.w1)?
            .add(&self.b1.reshape(&[1, self.hidden])?)?
            .swish()?
            .reshape(&[self.hidden])
    }

    fn embed_anchor(&self, name: &str) -> Result<Tensor> {
        anchor_from_registry(&self.anchors, name, self.hidden)?
            .ok_or_else(|| Error::UnknownName(name.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::directional_loss;

    #[test]
    fn linear_probe_same_seed_same_map() {
        let a = LinearProbeEmbedder::new(&[4], 8, 7);
        let b = LinearProbeEmbedder::new(&[4], 8, 7);
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        assert!(a.embed_image(&x).unwrap().bitwise_eq(&b.embed_image(&x).unwrap()));
        assert!(a
            .embed_anchor("anything")
            .unwrap()
            .bitwise_eq(&b.embed_anchor("anything").unwrap()));
    }

    #[test]
    fn channel_stats_zero_image_zero_mean_block() {
        let e = ChannelStatsEmbedder::new(vec![2, 3, 3]);
        let x = Tensor::zeros(&[2, 3, 3]);
        let emb = e.embed_image(&x).unwrap();
        assert_eq!(emb.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_stats_features() {
        let e = ChannelStatsEmbedder::new(vec![1, 2, 2]);
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let emb = e.embed_image(&x).unwrap();
        assert!((emb.data()[0] - 0.5).abs() < 1e-15);
        assert!((emb.data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn brightening_decreases_directional_loss_toward_bright() {
        let e = ChannelStatsEmbedder::new(vec![1, 4, 4]);
        let mut rng = Rng::seed_from(3);
        let x_ref = rng.normal_tensor(&[1, 4, 4]).mul_scalar(0.1).unwrap().add_scalar(0.5).unwrap();
        let slight = x_ref.add_scalar(0.05).unwrap();
        let strong = x_ref.add_scalar(0.3).unwrap();
        let l_slight = directional_loss(&e, &slight, "bright", &x_ref, "neutral")
            .unwrap()
            .item();
        let l_strong = directional_loss(&e, &strong, "bright", &x_ref, "neutral")
            .unwrap()
            .item();
        // pure mean increase aligns exactly with the "bright" direction
        assert!(l_slight < 1e-9);
        assert!(l_strong < 1e-9);
        // moving the mean down instead scores strictly worse
        let darker = x_ref.add_scalar(-0.3).unwrap();
        let l_dark = directional_loss(&e, &darker, "bright", &x_ref, "neutral")
            .unwrap()
            .item();
        assert!(l_dark > l_strong + 1.0);
    }

    #[test]
    fn unknown_builtin_rejected() {
        assert!(matches!(
            builtin_embedder("mystery", &[2], 0),
            Err(Error::UnknownName(_))
        ));
    }

    #[test]
    fn classifier_separates_toy_classes() {
        let mut rng = Rng::seed_from(5);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let center = if i % 2 == 0 { 1.0 } else { -1.0 };
            images.push(rng.normal_tensor(&[2]).mul_scalar(0.2).unwrap().add_scalar(center).unwrap());
            labels.push(i % 2);
        }
        let e = ClassifierEmbedder::train(&images, &labels, &["plus", "minus"], 8, 300, 0.05, 1)
            .unwrap();
        // the class anchors should classify the training points by proximity
        let plus = e.embed_anchor("plus").unwrap();
        let minus = e.embed_anchor("minus").unwrap();
        let mut correct = 0;
        for (x, &y) in images.iter().zip(&labels) {
            let emb = e.embed_image(x).unwrap();
            let d = |a: &Tensor| -> f64 {
                a.data()
                    .iter()
                    .zip(emb.data())
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum()
            };
            let pred = if d(&plus) < d(&minus) { 0 } else { 1 };
            if pred == y {
                correct += 1;
            }
        }
        assert!(correct >= 36, "classifier separated {}/40", correct);
    }

    #[test]
    fn anchor_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("recast-anchors-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("anchors.txt");
        std::fs::write(&path, "# comment\nwarm 1.0 0.5 -0.25\ncool -1 0 2\n").unwrap();
        let anchors = load_anchor_file(&path).unwrap();
        assert_eq!(anchors["warm"], vec![1.0, 0.5, -0.25]);
        assert_eq!(anchors["cool"], vec![-1.0, 0.0, 2.0]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
