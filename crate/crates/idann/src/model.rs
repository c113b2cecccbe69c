//! The three-block domain-adversarial network: shared feature extractor,
//! label head (softmax), and domain head reached through the gradient
//! reversal layer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec, ParamSet};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchitectureId {
    Model1,
    Model2,
    Model3,
    Model1Small,
    MlpToy,
}

impl ArchitectureId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "model1" => Ok(ArchitectureId::Model1),
            "model2" => Ok(ArchitectureId::Model2),
            "model3" => Ok(ArchitectureId::Model3),
            "model1-small" => Ok(ArchitectureId::Model1Small),
            "mlp-toy" => Ok(ArchitectureId::MlpToy),
            other => Err(Error::Config(format!("unknown architecture id: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArchitectureId::Model1 => "model1",
            ArchitectureId::Model2 => "model2",
            ArchitectureId::Model3 => "model3",
            ArchitectureId::Model1Small => "model1-small",
            ArchitectureId::MlpToy => "mlp-toy",
        }
    }

    /// Canonical input shape. Callers with different channel counts (e.g.
    /// grayscale source replicated to 3 channels) pass an explicit shape
    /// to `build_model_with_input`.
    pub fn default_input_shape(&self) -> Vec<usize> {
        match self {
            ArchitectureId::Model1 | ArchitectureId::Model1Small => vec![28, 28, 1],
            // Model 2 needs at least 61x61 inputs under valid padding with
            // stride-equals-pool max pooling; 64x64 is the smallest round size.
            ArchitectureId::Model2 => vec![64, 64, 3],
            ArchitectureId::Model3 => vec![40, 40, 3],
            ArchitectureId::MlpToy => vec![2],
        }
    }
}

fn conv(filters: usize, k: usize) -> LayerSpec {
    LayerSpec::Conv { filters, kh: k, kw: k }
}
fn pool(p: usize) -> LayerSpec {
    LayerSpec::MaxPool { ph: p, pw: p }
}
fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units }
}

/// Layer stacks for one architecture: (feature extractor, label head,
/// domain head). ReLU follows every convolution and hidden dense layer;
/// output layers use softmax / sigmoid. The domain head starts with the
/// gradient reversal layer.
fn stacks(arch: ArchitectureId, num_labels: usize) -> (Vec<LayerSpec>, Vec<LayerSpec>, Vec<LayerSpec>) {
    use LayerSpec::{Grl, Relu, SigmoidOutput, SoftmaxOutput};
    let label_tail = |hidden: &[usize]| -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for &h in hidden {
            v.push(dense(h));
            v.push(Relu);
        }
        v.push(dense(num_labels));
        v.push(SoftmaxOutput);
        v
    };
    let domain_tail = |hidden: &[usize]| -> Vec<LayerSpec> {
        let mut v = vec![Grl];
        for &h in hidden {
            v.push(dense(h));
            v.push(Relu);
        }
        v.push(dense(1));
        v.push(SigmoidOutput);
        v
    };
    match arch {
        ArchitectureId::Model1 => (
            vec![conv(32, 5), Relu, pool(2), conv(48, 5), Relu, pool(2)],
            label_tail(&[100, 100]),
            domain_tail(&[100]),
        ),
        ArchitectureId::Model2 => (
            vec![conv(64, 5), Relu, pool(3), conv(64, 5), Relu, pool(3), conv(128, 5), Relu],
            label_tail(&[3072, 2048]),
            domain_tail(&[1024, 1024]),
        ),
        ArchitectureId::Model3 => (
            vec![
                conv(96, 5), Relu, pool(2),
                conv(144, 3), Relu, pool(2),
                conv(256, 5), Relu, pool(2),
            ],
            label_tail(&[512]),
            domain_tail(&[1024, 1024]),
        ),
        ArchitectureId::Model1Small => (
            vec![conv(8, 5), Relu, pool(2), conv(12, 5), Relu, pool(2)],
            label_tail(&[32, 32]),
            domain_tail(&[32]),
        ),
        ArchitectureId::MlpToy => (
            vec![dense(16), Relu],
            label_tail(&[16]),
            domain_tail(&[16]),
        ),
    }
}

#[derive(Debug, Clone)]
pub struct DannModel {
    pub arch: ArchitectureId,
    pub input_shape: Vec<usize>,
    pub num_labels: usize,
    pub feature_layers: Vec<LayerSpec>,
    pub feature_params: ParamSet,
    pub label_layers: Vec<LayerSpec>,
    pub label_params: ParamSet,
    pub domain_layers: Vec<LayerSpec>,
    pub domain_params: ParamSet,
    /// Current GRL coefficient; mutated by the lambda schedule between epochs.
    pub grl_lambda: f64,
}

/// Build a model with the architecture's canonical input shape.
pub fn build_model(arch: ArchitectureId, num_labels: usize, seed: u64) -> Result<DannModel> {
    build_model_with_input(arch, &arch.default_input_shape(), num_labels, seed)
}

pub fn build_model_with_input(
    arch: ArchitectureId,
    input_shape: &[usize],
    num_labels: usize,
    seed: u64,
) -> Result<DannModel> {
    if num_labels < 2 {
        return Err(Error::Config(format!(
            "need at least 2 labels, got {num_labels}"
        )));
    }
    let (feature_layers, label_layers, domain_layers) = stacks(arch, num_labels);
    let feature_shape = nn::output_shape(&feature_layers, input_shape)?;
    let mut rng = substream(seed, "init");
    let feature_params = nn::init_params(&feature_layers, input_shape, &mut rng)?;
    let label_params = nn::init_params(&label_layers, &feature_shape, &mut rng)?;
    let domain_params = nn::init_params(&domain_layers, &feature_shape, &mut rng)?;
    Ok(DannModel {
        arch,
        input_shape: input_shape.to_vec(),
        num_labels,
        feature_layers,
        feature_params,
        label_layers,
        label_params,
        domain_layers,
        domain_params,
        grl_lambda: 0.0,
    })
}

impl DannModel {
    /// Flattened feature-extractor output width.
    pub fn feature_dim(&self) -> usize {
        nn::output_shape(&self.feature_layers, &self.input_shape)
            .expect("validated at build time")
            .iter()
            .product()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::Config(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Flattened `G_f(x)` for one sample.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (f, _) = nn::forward(&self.feature_layers, &self.feature_params, x)?;
        let n = f.len();
        f.reshaped(vec![n])
    }

    /// One row of flattened features per sample.
    pub fn extract_features(&self, batch: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        batch
            .iter()
            .map(|x| self.features(x).map(Tensor::into_data))
            .collect()
    }

    /// Label-posterior row for one sample: `G_y^p(G_f(x))`.
    pub fn label_probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        let f = self.features(x)?;
        let (p, _) = nn::forward(&self.label_layers, &self.label_params, &f)?;
        Ok(p.into_data())
    }

    /// Posterior matrix (batch x L); each row sums to 1.
    pub fn predict_label_probs(&self, batch: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        batch.iter().map(|x| self.label_probs(x)).collect()
    }

    /// P(domain = target) per sample.
    pub fn predict_domain_prob(&self, batch: &[Tensor]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|x| {
                let f = self.features(x)?;
                let (p, _) = nn::forward(&self.domain_layers, &self.domain_params, &f)?;
                Ok(p.data()[0])
            })
            .collect()
    }

    /// Predicted label: argmax of the posterior, ties to the lowest index.
    pub fn predict_label(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.label_probs(x)?))
    }
}

/// Lowest-index argmax.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Checkpoint format: "IDNN" magic, version, arch id, L, input shape, lambda,
// then shape-prefixed little-endian f64 arrays for every weight and bias in
// layer order feature_extractor -> label_head -> domain_head.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"IDNN";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &DannModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    let name = model.arch.name().as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(name).map_err(io)?;
    w.write_all(&(model.num_labels as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(model.input_shape.len() as u32).to_le_bytes()).map_err(io)?;
    for d in &model.input_shape {
        w.write_all(&(*d as u32).to_le_bytes()).map_err(io)?;
    }
    w.write_all(&model.grl_lambda.to_le_bytes()).map_err(io)?;
    for params in [&model.feature_params, &model.label_params, &model.domain_params] {
        for entry in params.entries.iter().flatten() {
            for t in [&entry.weight, &entry.bias] {
                w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
                for d in t.shape() {
                    w.write_all(&(*d as u32).to_le_bytes()).map_err(io)?;
                }
                for v in t.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<DannModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = CountingReader::new(BufReader::new(file));
    let fmt = |offset: u64, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(path, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt(0, format!("bad magic {magic:?}, expected \"IDNN\"")));
    }
    let version = r.read_u32(path)?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(4, format!("unsupported checkpoint version {version}")));
    }
    let name_len = r.read_u32(path)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact_at(path, &mut name)?;
    let arch = ArchitectureId::parse(
        std::str::from_utf8(&name)
            .map_err(|_| fmt(r.count, "arch id is not valid utf-8".into()))?,
    )?;
    let num_labels = r.read_u32(path)? as usize;
    let ndims = r.read_u32(path)? as usize;
    let mut input_shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        input_shape.push(r.read_u32(path)? as usize);
    }
    let mut lb = [0u8; 8];
    r.read_exact_at(path, &mut lb)?;
    let grl_lambda = f64::from_le_bytes(lb);

    // Rebuild the architecture, then overwrite the freshly initialized
    // parameters with the stored tensors, validating shapes as we go.
    let mut model = build_model_with_input(arch, &input_shape, num_labels, 0)?;
    model.grl_lambda = grl_lambda;
    for params in [
        &mut model.feature_params,
        &mut model.label_params,
        &mut model.domain_params,
    ] {
        for entry in params.entries.iter_mut().flatten() {
            for t in [&mut entry.weight, &mut entry.bias] {
                let start = r.count;
                let nd = r.read_u32(path)? as usize;
                let mut shape = Vec::with_capacity(nd);
                for _ in 0..nd {
                    shape.push(r.read_u32(path)? as usize);
                }
                if shape != t.shape() {
                    return Err(fmt(
                        start,
                        format!("stored shape {shape:?} does not match model shape {:?}", t.shape()),
                    ));
                }
                for v in t.data_mut().iter_mut() {
                    let mut b = [0u8; 8];
                    r.read_exact_at(path, &mut b)?;
                    *v = f64::from_le_bytes(b);
                }
            }
            // Velocities restart at zero after a load.
            entry.vel_weight = Tensor::zeros_like(&entry.weight);
            entry.vel_bias = Tensor::zeros_like(&entry.bias);
        }
    }
    Ok(model)
}

struct CountingReader<R> {
    inner: R,
    count: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, count: 0 }
    }

    fn read_exact_at(&mut self, path: &Path, buf: &mut [u8]) -> Result<()> {
        let offset = self.count;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    path: path.to_path_buf(),
                    offset,
                    message: "truncated file".into(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        self.count += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, path: &Path) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(path, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream_indexed;
    use rand::Rng;

    #[test]
    fn model1_label_head_has_l_softmax_outputs() {
        let m = build_model_with_input(ArchitectureId::Model1, &[28, 28, 1], 10, 7).unwrap();
        let last_dense = m
            .label_layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .unwrap();
        assert_eq!(last_dense, 10);
        assert!(matches!(m.label_layers.last(), Some(LayerSpec::SoftmaxOutput)));
    }

    #[test]
    fn model3_domain_head_is_1024_1024_1() {
        let m = build_model(ArchitectureId::Model3, 43, 7).unwrap();
        let dense_units: Vec<usize> = m
            .domain_layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect();
        assert_eq!(dense_units, vec![1024, 1024, 1]);
        assert!(matches!(m.domain_layers.first(), Some(LayerSpec::Grl)));
        assert!(matches!(m.domain_layers.last(), Some(LayerSpec::SigmoidOutput)));
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let a = build_model_with_input(ArchitectureId::Model1Small, &[28, 28, 1], 10, 5).unwrap();
        let b = build_model_with_input(ArchitectureId::Model1Small, &[28, 28, 1], 10, 5).unwrap();
        assert_eq!(a.feature_params.flatten(), b.feature_params.flatten());
        assert_eq!(a.label_params.flatten(), b.label_params.flatten());
        assert_eq!(a.domain_params.flatten(), b.domain_params.flatten());
    }

    #[test]
    fn unknown_arch_is_config_error() {
        assert!(ArchitectureId::parse("model9").is_err());
    }

    #[test]
    fn model1_feature_width_is_768() {
        let m = build_model_with_input(ArchitectureId::Model1, &[28, 28, 1], 10, 3).unwrap();
        assert_eq!(m.feature_dim(), 48 * 4 * 4);
        let x = Tensor::zeros(vec![28, 28, 1]);
        let rows = m.extract_features(&[x]).unwrap();
        assert_eq!(rows[0].len(), 768);
        assert!(rows[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fresh_model_rows_are_near_uniform() {
        // Near-zero logits at init keep every posterior below 2/L.
        for seed in 0..10 {
            let m = build_model_with_input(ArchitectureId::Model1Small, &[28, 28, 1], 10, seed).unwrap();
            let mut rng = substream_indexed(seed, "data", 0);
            let x = Tensor::new(
                vec![28, 28, 1],
                (0..784).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let probs = m.label_probs(&x).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let max = probs.iter().cloned().fold(0.0, f64::max);
            assert!(max < 2.0 / 10.0, "seed {seed}: max prob {max}");
        }
    }

    #[test]
    fn zero_weight_domain_head_predicts_half() {
        let mut m = build_model_with_input(ArchitectureId::MlpToy, &[2], 3, 1).unwrap();
        for e in m.domain_params.entries.iter_mut().flatten() {
            e.weight.data_mut().fill(0.0);
            e.bias.data_mut().fill(0.0);
        }
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let p = m.predict_domain_prob(&[x]).unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn heads_are_independent_given_features() {
        let mut m = build_model_with_input(ArchitectureId::MlpToy, &[2], 3, 1).unwrap();
        let x = Tensor::from_vec(vec![0.5, 0.25]);
        let domain_before = m.predict_domain_prob(&[x.clone()]).unwrap();
        let label_before = m.label_probs(&x).unwrap();
        // Perturb the label head; the domain output must not move.
        for e in m.label_params.entries.iter_mut().flatten() {
            for v in e.weight.data_mut() {
                *v += 0.37;
            }
        }
        assert_eq!(m.predict_domain_prob(&[x.clone()]).unwrap(), domain_before);
        assert_ne!(m.label_probs(&x).unwrap(), label_before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.idnn");
        let mut m = build_model_with_input(ArchitectureId::MlpToy, &[2], 4, 11).unwrap();
        m.grl_lambda = 0.25;
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.arch, m.arch);
        assert_eq!(loaded.num_labels, 4);
        assert_eq!(loaded.grl_lambda, 0.25);
        assert_eq!(loaded.feature_params.flatten(), m.feature_params.flatten());
        assert_eq!(loaded.label_params.flatten(), m.label_params.flatten());
        assert_eq!(loaded.domain_params.flatten(), m.domain_params.flatten());
    }

    #[test]
    fn checkpoint_bad_magic_is_positioned_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idnn");
        std::fs::write(&path, b"XXXXrest").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
