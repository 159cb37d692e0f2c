//! Small classifiers split into a featurizer and a linear head.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{softmax_rows, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const CHECKPOINT_FORMAT: &str = "pmdg-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SmallCnn,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    None,
}

/// How the K domain batches of one update feed batch-norm running
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Every batch updates the shared statistics, in set order.
    SetOrder,
    /// Only the first batch of each update (the source slot) updates them.
    FirstDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Output width of the last conv block (small_cnn only).
    pub feature_dim: usize,
    /// small_cnn: channels of the blocks before the last; mlp: hidden widths.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub norm: NormKind,
    pub bn_policy: BnPolicy,
    /// Input side length; the mlp needs it to size its first layer.
    pub image_size: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::SmallCnn,
            feature_dim: 128,
            widths: vec![16, 32],
            num_classes: 2,
            norm: NormKind::Batch,
            bn_policy: BnPolicy::SetOrder,
            image_size: 32,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::invalid("model.feature_dim", "must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model.num_classes", "must be at least 2"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("model.widths", "widths must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::invalid("model.image_size", "must be positive"));
        }
        Ok(())
    }

    /// Length of the feature vector.
    pub fn features_len(&self) -> usize {
        match self.kind {
            ModelKind::SmallCnn => self.feature_dim,
            ModelKind::Mlp => match self.widths.last() {
                Some(&w) => w,
                None => 3 * self.image_size * self.image_size,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of one forward pass; `bn_stats` holds one entry per batch-norm
/// layer in train mode and is empty in eval mode.
#[derive(Debug)]
pub struct ForwardPass {
    pub features: Var,
    pub logits: Var,
    pub bn_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<NamedTensor>,
    running: Vec<RunningStats>,
}

/// Featurizer block geometry.
struct Layout {
    /// `(in, out)` per block.
    blocks: Vec<(usize, usize)>,
}

impl Layout {
    fn of(spec: &ModelSpec) -> Layout {
        let mut dims = Vec::new();
        match spec.kind {
            ModelKind::SmallCnn => {
                let mut prev = 3;
                for &w in spec.widths.iter().chain(std::iter::once(&spec.feature_dim)) {
                    dims.push((prev, w));
                    prev = w;
                }
            }
            ModelKind::Mlp => {
                let mut prev = 3 * spec.image_size * spec.image_size;
                for &w in &spec.widths {
                    dims.push((prev, w));
                    prev = w;
                }
            }
        }
        Layout { blocks: dims }
    }
}

fn uniform(shape: &[usize], bound: f64, r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("parameter shape")
}

/// Deterministic fan-in scaled uniform initialization.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut r = rng::stream(seed, streams::MODEL_INIT);
    let mut params = Vec::new();
    let mut running = Vec::new();
    let batch_norm = spec.norm == NormKind::Batch;
    for (i, &(cin, cout)) in Layout::of(spec).blocks.iter().enumerate() {
        let (wshape, fan_in) = match spec.kind {
            ModelKind::SmallCnn => (vec![cout, cin, 3, 3], cin * 9),
            ModelKind::Mlp => (vec![cout, cin], cin),
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        params.push(NamedTensor {
            name: format!("block{i}.weight"),
            value: uniform(&wshape, bound, &mut r),
        });
        params.push(NamedTensor {
            name: format!("block{i}.bias"),
            value: uniform(&[cout], bound, &mut r),
        });
        if batch_norm {
            params.push(NamedTensor {
                name: format!("block{i}.bn.gamma"),
                value: Tensor::full(&[cout], 1.0),
            });
            params.push(NamedTensor {
                name: format!("block{i}.bn.beta"),
                value: Tensor::zeros(&[cout]),
            });
            running.push(RunningStats::new(cout));
        }
    }
    let d = spec.features_len();
    let bound = 1.0 / (d as f64).sqrt();
    params.push(NamedTensor {
        name: "head.weight".into(),
        value: uniform(&[spec.num_classes, d], bound, &mut r),
    });
    params.push(NamedTensor {
        name: "head.bias".into(),
        value: uniform(&[spec.num_classes], bound, &mut r),
    });
    Ok(Model {
        spec: spec.clone(),
        params,
        running,
    })
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    spec: ModelSpec,
    params: Vec<NamedTensor>,
    running: Vec<RunningStats>,
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameters concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "set_flat_params",
                format!("{} values for {} parameters", flat.len(), self.num_params()),
            ));
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Zeroes the classifier head.
    pub fn zero_head(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with("head.")) {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.parameter(p.value.clone())).collect()
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Forward pass with parameters previously returned by [`Model::bind`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        images: Var,
        mode: Mode,
    ) -> Result<ForwardPass> {
        let s = tape.value(images).shape().to_vec();
        let side = self.spec.image_size;
        if s.len() != 4 || s[1] != 3 || (self.spec.kind == ModelKind::Mlp && (s[2] != side || s[3] != side)) {
            return Err(Error::shape("featurize", format!("images {s:?}")));
        }
        let batch_norm = self.spec.norm == NormKind::Batch;
        let per_block = if batch_norm { 4 } else { 2 };
        let blocks = Layout::of(&self.spec).blocks.len();
        let mut x = images;
        if self.spec.kind == ModelKind::Mlp {
            x = tape.reshape(x, &[s[0], 3 * s[2] * s[3]])?;
        }
        let mut stats = Vec::new();
        for b in 0..blocks {
            let p = &params[b * per_block..(b + 1) * per_block];
            x = match self.spec.kind {
                ModelKind::SmallCnn => tape.conv2d(x, p[0], p[1])?,
                ModelKind::Mlp => tape.linear(x, p[0], p[1])?,
            };
            if batch_norm {
                x = match mode {
                    Mode::Train => {
                        let (y, st) = tape.batch_norm_train(x, p[2], p[3], BN_EPS)?;
                        stats.push(st);
                        y
                    }
                    Mode::Eval => {
                        let r = &self.running[b];
                        tape.batch_norm_eval(x, p[2], p[3], &r.mean, &r.var, BN_EPS)?
                    }
                };
            }
            x = tape.relu(x);
            if self.spec.kind == ModelKind::SmallCnn {
                let hs = tape.value(x).shape();
                if hs[2] >= 2 && hs[3] >= 2 {
                    x = tape.max_pool2(x)?;
                }
            }
        }
        let features = match self.spec.kind {
            ModelKind::SmallCnn => tape.global_avg_pool(x)?,
            ModelKind::Mlp => x,
        };
        let head = &params[blocks * per_block..];
        let logits = tape.linear(features, head[0], head[1])?;
        Ok(ForwardPass {
            features,
            logits,
            bn_stats: stats,
        })
    }

    /// Folds the statistics of one update's forward passes into the running
    /// statistics according to the spec's batch-norm policy.
    pub fn commit_bn_stats(&mut self, per_pass: &[Vec<BatchStats>]) {
        let passes = match self.spec.bn_policy {
            BnPolicy::SetOrder => per_pass,
            BnPolicy::FirstDomain => &per_pass[..per_pass.len().min(1)],
        };
        for stats in passes {
            for (r, st) in self.running.iter_mut().zip(stats) {
                r.update(st);
            }
        }
    }

    /// Eval-mode features, `[b, features_len]`.
    pub fn featurize(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &params, x, Mode::Eval)?;
        Ok(tape.value(out.features).clone())
    }

    /// Eval-mode logits, `[b, C]`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &params, x, Mode::Eval)?;
        let logits = tape.value(out.logits).clone();
        if !logits.is_finite() {
            return Err(Error::Numerical {
                op: "predict".into(),
                detail: "non-finite logits".into(),
            });
        }
        Ok(logits)
    }

    pub fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.predict(images)?))
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            params: self.params.clone(),
            running: self.running.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let reference = build_model(&ck.spec, 0)?;
        let shapes_match = reference.params.len() == ck.params.len()
            && reference
                .params
                .iter()
                .zip(&ck.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
            && reference.running.len() == ck.running.len();
        if !shapes_match {
            return Err(Error::Data("checkpoint parameters do not match its spec".into()));
        }
        Ok(Model {
            spec: ck.spec,
            params: ck.params,
            running: ck.running,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
        Model::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, side: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 0);
        let data = (0..b * 3 * side * side).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, 3, side, side], data).unwrap()
    }

    fn tiny_cnn(norm: NormKind) -> ModelSpec {
        ModelSpec {
            feature_dim: 4,
            widths: vec![3],
            num_classes: 3,
            norm,
            image_size: 6,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::default();
        assert_eq!(build_model(&spec, 3).unwrap(), build_model(&spec, 3).unwrap());
        assert_ne!(build_model(&spec, 3).unwrap(), build_model(&spec, 4).unwrap());
    }

    #[test]
    fn mlp_without_widths_is_linear() {
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            widths: vec![],
            norm: NormKind::None,
            image_size: 4,
            ..ModelSpec::default()
        };
        let m = build_model(&spec, 0).unwrap();
        assert_eq!(m.params().len(), 2);
        let x = images(2, 4, 1);
        let f = m.featurize(&x).unwrap();
        assert_eq!(f.shape(), &[2, 48]);
        assert_eq!(f.data(), x.data());
        // predict = head(featurize)
        let manual = f.matmul(&m.params()[0].value.transpose()).unwrap();
        let logits = m.predict(&x).unwrap();
        for i in 0..2 {
            for c in 0..2 {
                let v = manual.row(i)[c] + m.params()[1].value.data()[c];
                assert!((logits.row(i)[c] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_cnn_feature_length() {
        let m = build_model(&ModelSpec::default(), 0).unwrap();
        let f = m.featurize(&images(1, 32, 2)).unwrap();
        assert_eq!(f.shape(), &[1, 128]);
        assert!(f.is_finite());
    }

    #[test]
    fn duplicated_rows_give_duplicated_features() {
        let m = build_model(&tiny_cnn(NormKind::None), 1).unwrap();
        let one = images(1, 6, 3);
        let two = Tensor::stack(&[
            Tensor::new(vec![3, 6, 6], one.data().to_vec()).unwrap(),
            Tensor::new(vec![3, 6, 6], one.data().to_vec()).unwrap(),
        ])
        .unwrap();
        let f = m.featurize(&two).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = build_model(&tiny_cnn(NormKind::Batch), 1).unwrap();
        m.zero_head();
        let p = m.predict_proba(&images(3, 6, 4)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax_rows(&Tensor::from_rows(&[vec![1.0, -1.0], vec![0.3, 0.3]]).unwrap());
        assert!((p.row(0)[0] - 0.880797).abs() < 1e-4 && (p.row(0)[1] - 0.119203).abs() < 1e-4);
        assert_eq!(p.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let mut m = build_model(&tiny_cnn(NormKind::None), 7).unwrap();
        let x = images(2, 6, 5);
        let mean_feature = |m: &Model| m.featurize(&x).unwrap().mean();
        let mut tape = Tape::new();
        let params = m.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = m.forward(&mut tape, &params, xv, Mode::Train).unwrap();
        let root = tape.mean(out.features);
        let grads = tape.backward(root);
        let analytic: Vec<f64> = params
            .iter()
            .zip(m.params())
            .flat_map(|(&v, p)| grads.get_or_zeros(v, &p.value).into_data())
            .collect();
        let base = m.flat_params();
        let h = 1e-5;
        for i in (0..base.len()).step_by(3) {
            let mut plus = base.clone();
            plus[i] += h;
            m.set_flat_params(&plus).unwrap();
            let fp = mean_feature(&m);
            let mut minus = base.clone();
            minus[i] -= h;
            m.set_flat_params(&minus).unwrap();
            let fm = mean_feature(&m);
            let numeric = (fp - fm) / (2.0 * h);
            let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!((numeric - analytic[i]).abs() / scale < 1e-3 || (numeric - analytic[i]).abs() < 1e-8,
                "param {i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn bn_policy_controls_running_stats() {
        let st = |v: f64| vec![BatchStats { mean: vec![v; 3], var: vec![v; 3] }, BatchStats { mean: vec![v; 4], var: vec![v; 4] }];
        let mut set_order = build_model(&tiny_cnn(NormKind::Batch), 0).unwrap();
        let mut first = build_model(
            &ModelSpec {
                bn_policy: BnPolicy::FirstDomain,
                ..tiny_cnn(NormKind::Batch)
            },
            0,
        )
        .unwrap();
        set_order.commit_bn_stats(&[st(1.0), st(2.0)]);
        first.commit_bn_stats(&[st(1.0), st(2.0)]);
        // set order: 0 -> 0.1 -> 0.9*0.1 + 0.2
        assert!((set_order.running_stats()[0].mean[0] - 0.29).abs() < 1e-12);
        assert!((first.running_stats()[0].mean[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = build_model(&tiny_cnn(NormKind::Batch), 9).unwrap();
        m.commit_bn_stats(&[vec![
            BatchStats { mean: vec![0.123456789; 3], var: vec![1.0 / 3.0; 3] },
            BatchStats { mean: vec![std::f64::consts::PI; 4], var: vec![2.5; 4] },
        ]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        let bits = |m: &Model| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn invalid_spec_rejected() {
        let bad = ModelSpec {
            num_classes: 1,
            ..ModelSpec::default()
        };
        assert_eq!(build_model(&bad, 0).unwrap_err().key(), Some("model.num_classes"));
    }
}
