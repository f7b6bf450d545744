//! Small feed-forward models: parameter containers, initialization, forward
//! passes on the autodiff tape, and the two loss heads.

use std::io::Read;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Shape, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Output head of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Regression,
    /// k-way classification; the forward pass returns logits.
    Classification,
}

/// Architecture of a fully connected network with rectifier activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub head: Head,
}

impl ModelSpec {
    pub fn regression(input_dim: usize, hidden: Vec<usize>) -> Self {
        ModelSpec { input_dim, hidden, output_dim: 1, head: Head::Regression }
    }

    pub fn classification(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        ModelSpec { input_dim, hidden, output_dim: classes, head: Head::Classification }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::contract("hidden sizes must be positive"));
        }
        if self.head == Head::Regression && self.output_dim != 1 {
            return Err(Error::contract("regression head requires output dimension 1"));
        }
        Ok(())
    }

    /// Layer dimensions as (in, out) pairs, input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Named, ordered collection of parameter arrays. Immutable once built;
/// updates produce new sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for i in 0..entries.len() {
            for j in (i + 1)..entries.len() {
                if entries[i].0 == entries[j].0 {
                    return Err(Error::contract(format!(
                        "duplicate parameter name {:?}",
                        entries[i].0
                    )));
                }
            }
        }
        Ok(ParameterSet { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Concatenate all values in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild a set with this set's names and shapes from a flat vector.
    /// Exact inverse of [`ParameterSet::flatten`].
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParameterSet> {
        if flat.len() != self.total_len() {
            return Err(Error::contract(format!(
                "unflatten: expected {} values, got {}",
                self.total_len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let n = t.data().len();
                let data = flat[offset..offset + n].to_vec();
                offset += n;
                (name.clone(), Tensor::new(t.shape(), data))
            })
            .collect();
        Ok(ParameterSet { entries })
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Checkpoint layout: a length-prefixed UTF-8 name/shape table followed by
    /// all values as little-endian f64 in declaration order.
    ///
    ///   u64  entry count
    ///   per entry: u32 name length, name bytes, u32 rank, u64 per dimension
    ///   f64  values...
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(bytes);
            let dims: Vec<u64> = match t.shape() {
                Shape::Scalar => vec![],
                Shape::Vector(n) => vec![n as u64],
                Shape::Matrix(r, c) => vec![r as u64, c as u64],
            };
            buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                buf.extend_from_slice(&d.to_le_bytes());
            }
        }
        for (_, t) in &self.entries {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<ParameterSet> {
        let mut file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let bad = |detail: &str| Error::Format {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };

        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(bad("truncated file"));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let mut dims = Vec::new();
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let shape = match dims.as_slice() {
                [] => Shape::Scalar,
                [n] => Shape::Vector(*n),
                [r, c] => Shape::Matrix(*r, *c),
                _ => return Err(bad("rank above 2 is not supported")),
            };
            headers.push((name, shape));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, shape) in headers {
            let n = shape.numel();
            let bytes = take(&mut pos, n * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(shape, data)));
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        ParameterSet::new(entries)
    }
}

/// Draw initial parameters: weights from a normal(0, 0.01) truncated at two
/// standard deviations, biases zero. Deterministic in the seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "init");
    let dist = Normal::new(0.0, 0.01).expect("valid stddev");
    let bound = 2.0 * 0.01;
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| loop {
                let z: f64 = dist.sample(&mut rng);
                if z.abs() <= bound {
                    break z;
                }
            })
            .collect()
    };
    let mut entries = Vec::new();
    for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        entries.push((
            format!("w{l}"),
            Tensor::new(Shape::Matrix(fan_in, fan_out), draw(fan_in * fan_out)),
        ));
        entries.push((format!("b{l}"), Tensor::zeros(Shape::Vector(fan_out))));
    }
    ParameterSet::new(entries)
}

/// Register every parameter array as a leaf on a tape, in declaration order.
pub fn register_params(tape: &mut Tape, params: &ParameterSet) -> Vec<NodeId> {
    params
        .entries()
        .iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect()
}

/// Read current values of parameter nodes back into a named set.
pub fn params_from_nodes(tape: &Tape, ids: &[NodeId], like: &ParameterSet) -> ParameterSet {
    let entries = like
        .entries()
        .iter()
        .zip(ids)
        .map(|((name, _), &id)| (name.clone(), tape.value(id).clone()))
        .collect();
    ParameterSet { entries }
}

/// Forward pass of the network on the tape. `x` is a [batch, input_dim]
/// matrix node; returns raw outputs (regression) or logits (classification).
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    param_ids: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    let batch = match tape.shape(x) {
        Shape::Matrix(b, d) if d == spec.input_dim => b,
        s => {
            return Err(Error::contract(format!(
                "forward: input shape {s:?} does not match input dimension {}",
                spec.input_dim
            )))
        }
    };
    let layers = spec.layer_dims().len();
    assert_eq!(param_ids.len(), 2 * layers, "forward: wrong parameter node count");
    let mut h = x;
    for l in 0..layers {
        let w = param_ids[2 * l];
        let b = param_ids[2 * l + 1];
        let xw = tape.matmul(h, w);
        let bb = tape.broadcast_rows(b, batch);
        let z = tape.add(xw, bb);
        h = if l + 1 < layers { tape.relu(z) } else { z };
    }
    Ok(h)
}

/// Forward pass without keeping a graph around.
pub fn forward(params: &ParameterSet, spec: &ModelSpec, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params);
    let xn = tape.leaf(x.clone());
    let out = forward_on_tape(&mut tape, spec, &ids, xn)?;
    Ok(tape.value(out).clone())
}

/// Per-task targets: real values for regression, class labels otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Vec<f64>),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.len(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch-mean loss on the tape: squared error for the regression head,
/// softmax cross-entropy for classification.
pub fn loss_on_tape(
    tape: &mut Tape,
    head: Head,
    pred: NodeId,
    targets: &Targets,
) -> Result<NodeId> {
    let (batch, _cols) = match tape.shape(pred) {
        Shape::Matrix(b, c) => (b, c),
        s => return Err(Error::contract(format!("loss: predictions must be a matrix, got {s:?}"))),
    };
    if batch == 0 || targets.is_empty() {
        return Err(Error::contract("loss: empty batch"));
    }
    if targets.len() != batch {
        return Err(Error::contract(format!(
            "loss: {} predictions vs {} targets",
            batch,
            targets.len()
        )));
    }
    match (head, targets) {
        (Head::Regression, Targets::Values(ys)) => {
            let y = tape.leaf(Tensor::matrix(batch, 1, ys.clone()));
            let d = tape.sub(pred, y);
            let sq = tape.mul(d, d);
            Ok(tape.mean_all(sq))
        }
        (Head::Classification, Targets::Labels(labels)) => {
            Ok(tape.softmax_cross_entropy(pred, labels))
        }
        _ => Err(Error::contract("loss: head and target kinds disagree")),
    }
}

/// Loss of a prediction batch against targets, as a plain value.
pub fn loss(pred: &Tensor, targets: &Targets, head: Head) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let l = loss_on_tape(&mut tape, head, p, targets)?;
    Ok(tape.value(l).item())
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (r, c) = match logits.shape() {
        Shape::Matrix(r, c) => (r, c),
        _ => panic!("accuracy: logits must be a matrix"),
    };
    assert_eq!(labels.len(), r);
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == label {
            hits += 1;
        }
    }
    hits as f64 / r as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_spec() -> ModelSpec {
        ModelSpec::regression(1, vec![40, 40])
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = sine_spec();
        let a = init_params(&spec, 42).unwrap();
        let b = init_params(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = init_params(&spec, 43).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.entries() {
            if name.starts_with('w') {
                assert!(t.data().iter().all(|v| v.abs() <= 0.02), "{name} out of bounds");
            } else {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn param_count_matches_hand_arithmetic() {
        // 1*40+40 + 40*40+40 + 40*1+1 = 80 + 1640 + 41
        assert_eq!(sine_spec().param_count(), 1761);
        let p = init_params(&sine_spec(), 1).unwrap();
        assert_eq!(p.total_len(), 1761);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = ModelSpec::regression(2, vec![3]);
        let p = init_params(&spec, 1).unwrap();
        let zeros = p.unflatten_like(&vec![0.0; p.total_len()]).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let y = forward(&zeros, &spec, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_is_w_times_x() {
        let spec = ModelSpec::regression(1, vec![]);
        let p = ParameterSet::new(vec![
            ("w0".into(), Tensor::matrix(1, 1, vec![2.5])),
            ("b0".into(), Tensor::zeros(Shape::Vector(1))),
        ])
        .unwrap();
        let x = Tensor::matrix(3, 1, vec![1.0, -2.0, 4.0]);
        let y = forward(&p, &spec, &x).unwrap();
        assert_eq!(y.data(), &[2.5, -5.0, 10.0]);
    }

    #[test]
    fn forward_is_pure() {
        let spec = ModelSpec::classification(4, vec![8], 3);
        let p = init_params(&spec, 9).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4]);
        let y1 = forward(&p, &spec, &x).unwrap();
        let y2 = forward(&p, &spec, &x).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let spec = ModelSpec::regression(3, vec![4]);
        let p = init_params(&spec, 1).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.0; 4]);
        assert!(forward(&p, &spec, &x).is_err());
    }

    #[test]
    fn mse_hand_computed() {
        // predictions [1, 3], targets [0, 0] -> (1 + 9) / 2 = 5
        let pred = Tensor::matrix(2, 1, vec![1.0, 3.0]);
        let t = Targets::Values(vec![0.0, 0.0]);
        assert_eq!(loss(&pred, &t, Head::Regression).unwrap(), 5.0);
    }

    #[test]
    fn mse_zero_when_exact() {
        let pred = Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]);
        let t = Targets::Values(vec![0.5, -1.0, 2.0]);
        assert_eq!(loss(&pred, &t, Head::Regression).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let pred = Tensor::matrix(2, 5, vec![0.3; 10]);
        let t = Targets::Labels(vec![0, 4]);
        let l = loss(&pred, &t, Head::Classification).unwrap();
        assert!((l - 5.0f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn empty_batch_rejected() {
        let pred = Tensor::matrix(1, 1, vec![1.0]);
        assert!(loss(&pred, &Targets::Values(vec![]), Head::Regression).is_err());
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let vals = [0.7, -0.3, 1.9, 0.0];
        let ys = [0.5, 0.5, -1.0, 2.0];
        let l1 = loss(
            &Tensor::matrix(4, 1, vals.to_vec()),
            &Targets::Values(ys.to_vec()),
            Head::Regression,
        )
        .unwrap();
        let perm = [2usize, 0, 3, 1];
        let l2 = loss(
            &Tensor::matrix(4, 1, perm.iter().map(|&i| vals[i]).collect()),
            &Targets::Values(perm.iter().map(|&i| ys[i]).collect()),
            Head::Regression,
        )
        .unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn ce_gradient_rows_sum_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::matrix(3, 4, vec![
            0.2, -0.5, 1.0, 0.1, 0.9, 0.3, -0.2, 0.0, -1.0, 0.4, 0.6, 0.2,
        ]));
        let l = loss_on_tape(&mut tape, Head::Classification, logits, &Targets::Labels(vec![1, 3, 0]))
            .unwrap();
        let g = tape.backward(l, &[logits]).unwrap().remove(0);
        for i in 0..3 {
            let row_sum: f64 = g.data()[i * 4..(i + 1) * 4].iter().sum();
            assert!(row_sum.abs() < 1e-15, "row {i} sums to {row_sum}");
        }
    }

    #[test]
    fn flatten_round_trips() {
        let spec = ModelSpec::classification(5, vec![7, 3], 4);
        let p = init_params(&spec, 11).unwrap();
        let flat = p.flatten();
        let q = p.unflatten_like(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.params");
        let spec = ModelSpec::regression(2, vec![4, 3]);
        let p = init_params(&spec, 5).unwrap();
        p.save(&path).unwrap();
        let q = ParameterSet::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::matrix(3, 3, vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 0.0]);
        let acc = accuracy(&logits, &[0, 1, 2]);
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }
}
