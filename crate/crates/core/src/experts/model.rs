use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::arch::{ArchitectureSpec, Topology};
use crate::error::{Error, Result};
use crate::numcore::{Activation, Tape, Tensor, Var};

/// Linear classifier over the feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `[F, classes]`
    pub weight: Tensor,
    /// `[classes]`
    pub bias: Tensor,
}

impl Head {
    pub fn classes(&self) -> usize {
        self.bias.numel()
    }
}

/// One full set of expert parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    /// `(weight, bias)` per encoder layer, embedding last.
    pub encoder: Vec<(Tensor, Tensor)>,
    pub source_head: Head,
    pub target_head: Option<Head>,
}

impl ParamSet {
    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.encoder.iter().enumerate() {
            out.push((format!("enc.{i}.w"), w));
            out.push((format!("enc.{i}.b"), b));
        }
        out.push(("src_head.w".into(), &self.source_head.weight));
        out.push(("src_head.b".into(), &self.source_head.bias));
        if let Some(h) = &self.target_head {
            out.push(("tgt_head.w".into(), &h.weight));
            out.push(("tgt_head.b".into(), &h.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_tensors_mut().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable counterpart of [`ParamSet::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, (w, b)) in self.encoder.iter_mut().enumerate() {
            out.push((format!("enc.{i}.w"), w));
            out.push((format!("enc.{i}.b"), b));
        }
        out.push(("src_head.w".into(), &mut self.source_head.weight));
        out.push(("src_head.b".into(), &mut self.source_head.bias));
        if let Some(h) = self.target_head.as_mut() {
            out.push(("tgt_head.w".into(), &mut h.weight));
            out.push(("tgt_head.b".into(), &mut h.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Which parameter set of an expert to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamChoice {
    /// Trained parameters θ.
    Current,
    /// Temporal average Θ.
    Average,
}

/// Tape handles produced by a forward pass.
#[derive(Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub logits_src: Var,
    pub logits_tgt: Option<Var>,
    /// Encoder `(weight, bias)` leaves, same order as [`ParamSet::encoder`].
    pub encoder: Vec<(Var, Var)>,
    pub source_head: (Var, Var),
    pub target_head: Option<(Var, Var)>,
}

/// Plain-tensor forward outputs.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Tensor,
    pub logits_src: Tensor,
    pub logits_tgt: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertModel {
    pub arch: ArchitectureSpec,
    pub input_dim: usize,
    pub theta: ParamSet,
    pub theta_avg: ParamSet,
    pub(crate) avg_acc: AverageAccumulator,
}

/// Θ held in f64 between EMA updates. In f32 an update whose step is below
/// half an ulp leaves Θ unchanged, so Θ would stall short of θ.
///
/// It is a cache: it is rebuilt from `theta_avg` whenever the two disagree,
/// and it takes no part in equality.
#[derive(Clone, Debug, Default)]
pub(crate) struct AverageAccumulator(Vec<Vec<f64>>);

impl PartialEq for AverageAccumulator {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl AverageAccumulator {
    fn matches(&self, avg: &[&mut Tensor]) -> bool {
        self.0.len() == avg.len()
            && self
                .0
                .iter()
                .zip(avg)
                .all(|(acc, t)| acc.len() == t.numel() && acc.iter().zip(t.data()).all(|(&a, &v)| a as f32 == v))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (sd * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Records the encoder and both heads on `tape`. Parameters become
/// trainable leaves when `trainable`, constants otherwise.
pub fn record_forward(
    tape: &mut Tape,
    arch: &ArchitectureSpec,
    params: &ParamSet,
    x: Var,
    trainable: bool,
) -> Result<ForwardVars> {
    let leaf = |tape: &mut Tape, t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let mut encoder = Vec::with_capacity(params.encoder.len());
    for (w, b) in &params.encoder {
        encoder.push((leaf(tape, w)?, leaf(tape, b)?));
    }
    let n_hidden = arch.widths.len();
    if encoder.len() != n_hidden + 1 {
        return Err(Error::Dimension(format!(
            "architecture `{}` expects {} layers, parameters have {}",
            arch.name,
            n_hidden + 1,
            encoder.len()
        )));
    }

    let layer = |tape: &mut Tape, input: Var, l: usize| -> Result<Var> {
        let (w, b) = encoder[l];
        let pre = tape.affine(input, w, b)?;
        tape.activation(pre, arch.activations[l])
    };

    let embed_input = match arch.topology {
        Topology::Plain => {
            let mut h = x;
            for l in 0..n_hidden {
                h = layer(tape, h, l)?;
            }
            h
        }
        Topology::Residual => {
            let mut h = layer(tape, x, 0)?;
            for l in 1..n_hidden {
                let delta = layer(tape, h, l)?;
                h = tape.add(h, delta)?;
            }
            h
        }
        Topology::DenseConcat => {
            let mut seen = vec![x];
            let mut outs = Vec::with_capacity(n_hidden);
            for l in 0..n_hidden {
                let input = if seen.len() == 1 { x } else { tape.concat(&seen)? };
                let h = layer(tape, input, l)?;
                seen.push(h);
                outs.push(h);
            }
            if outs.len() == 1 {
                outs[0]
            } else {
                tape.concat(&outs)?
            }
        }
        Topology::Parallel => {
            let branches = (0..n_hidden)
                .map(|l| layer(tape, x, l))
                .collect::<Result<Vec<_>>>()?;
            if branches.len() == 1 {
                branches[0]
            } else {
                tape.concat(&branches)?
            }
        }
    };
    let (ew, eb) = encoder[n_hidden];
    let embed = tape.affine(embed_input, ew, eb)?;
    let features = tape.pad_cols(embed, arch.feature_dim)?;

    let sw = leaf(tape, &params.source_head.weight)?;
    let sb = leaf(tape, &params.source_head.bias)?;
    let logits_src = tape.affine(features, sw, sb)?;
    let (logits_tgt, target_head) = match &params.target_head {
        Some(h) => {
            let tw = leaf(tape, &h.weight)?;
            let tb = leaf(tape, &h.bias)?;
            (Some(tape.affine(features, tw, tb)?), Some((tw, tb)))
        }
        None => (None, None),
    };
    Ok(ForwardVars {
        features,
        logits_src,
        logits_tgt,
        encoder,
        source_head: (sw, sb),
        target_head,
    })
}

impl ExpertModel {
    /// Fan-in scaled Gaussian initialization; Θ starts equal to θ.
    pub fn new(arch: ArchitectureSpec, input_dim: usize, source_classes: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if source_classes == 0 {
            return Err(Error::Config("source head needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = arch.layer_dims(input_dim);
        let mut encoder = Vec::with_capacity(dims.len());
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let gain = match arch.activations.get(l) {
                Some(Activation::Relu) => 2.0,
                _ => 1.0,
            };
            let w = gaussian(&mut rng, &[fan_in, fan_out], (gain / fan_in as f64).sqrt());
            encoder.push((w, Tensor::zeros(&[fan_out])));
        }
        let f = arch.feature_dim;
        let source_head = Head {
            weight: gaussian(&mut rng, &[f, source_classes], (1.0 / f as f64).sqrt()),
            bias: Tensor::zeros(&[source_classes]),
        };
        let theta = ParamSet {
            encoder,
            source_head,
            target_head: None,
        };
        Ok(Self {
            arch,
            input_dim,
            theta_avg: theta.clone(),
            theta,
            avg_acc: AverageAccumulator::default(),
        })
    }

    pub fn params(&self, which: ParamChoice) -> &ParamSet {
        match which {
            ParamChoice::Current => &self.theta,
            ParamChoice::Average => &self.theta_avg,
        }
    }

    pub fn name(&self) -> &str {
        &self.arch.name
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    pub fn target_classes(&self) -> Option<usize> {
        self.theta.target_head.as_ref().map(Head::classes)
    }

    /// Gradient-free forward pass over `x: [B, D]`.
    pub fn forward(&self, which: ParamChoice, x: &Tensor) -> Result<ForwardOutput> {
        let (_, d) = x.require_matrix("expert input")?;
        if d != self.input_dim {
            return Err(Error::Dimension(format!(
                "expert `{}` takes {} inputs, got {d}",
                self.arch.name, self.input_dim
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let vars = record_forward(&mut tape, &self.arch, self.params(which), xv, false)?;
        Ok(ForwardOutput {
            features: tape.value(vars.features).clone(),
            logits_src: tape.value(vars.logits_src).clone(),
            logits_tgt: vars.logits_tgt.map(|v| tape.value(v).clone()),
        })
    }

    /// Features for a large input, computed in chunks.
    pub fn features(&self, which: ParamChoice, x: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = x.rows();
        let f = self.arch.feature_dim;
        let mut data = Vec::with_capacity(n * f);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let out = self.forward(which, &x.select_rows(&idx))?;
            data.extend_from_slice(out.features.data());
            start = end;
        }
        Tensor::matrix(n, f, data)
    }

    /// `Θ <- alpha Θ + (1 - alpha) θ` for every tensor, heads included.
    pub fn ema_update(&mut self, alpha: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA alpha {alpha} outside [0, 1]")));
        }
        let current = self.theta.named_tensors();
        let mut avg = self.theta_avg.tensors_mut();
        if current.len() != avg.len() {
            return Err(Error::Contract("θ and Θ hold different tensor sets".into()));
        }
        if !self.avg_acc.matches(&avg) {
            self.avg_acc.0 = avg.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
        }
        let (alpha, beta) = (alpha as f64, 1.0 - alpha as f64);
        for (((_, cur), avg), acc) in current.into_iter().zip(avg.iter_mut()).zip(&mut self.avg_acc.0) {
            for ((a, &c), out) in acc.iter_mut().zip(cur.data()).zip(avg.data_mut()) {
                *a = alpha * *a + beta * c as f64;
                *out = *a as f32;
            }
        }
        Ok(())
    }

    /// Copies θ into Θ.
    pub fn sync_average(&mut self) {
        self.theta_avg = self.theta.clone();
    }

    /// Replaces the target classifier of both θ and Θ with L2-normalized
    /// `centroids: [M_t, F]` as weight columns and a zero bias.
    pub fn reset_target_head(&mut self, centroids: &Tensor) -> Result<()> {
        let (m, f) = centroids.require_matrix("centroids")?;
        if f != self.arch.feature_dim {
            return Err(Error::Dimension(format!(
                "centroids have {f} dims, features have {}",
                self.arch.feature_dim
            )));
        }
        let mut weight = Tensor::zeros(&[f, m]);
        for j in 0..m {
            let row = centroids.row(j);
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= 1e-12 {
                return Err(Error::Degenerate(format!("centroid {j} has zero norm")));
            }
            for (k, &v) in row.iter().enumerate() {
                weight.data_mut()[k * m + j] = (v as f64 / norm) as f32;
            }
        }
        let head = Head {
            weight,
            bias: Tensor::zeros(&[m]),
        };
        self.theta.target_head = Some(head.clone());
        self.theta_avg.target_head = Some(head);
        Ok(())
    }
}

/// Builds one expert per spec with seeds derived from `seed`.
pub fn build_experts(
    specs: &[ArchitectureSpec],
    input_dim: usize,
    source_classes: usize,
    seed: u64,
) -> Result<Vec<ExpertModel>> {
    if specs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 experts, got {}",
            specs.len()
        )));
    }
    let f = specs[0].feature_dim;
    if let Some(s) = specs.iter().find(|s| s.feature_dim != f) {
        return Err(Error::Config(format!(
            "expert `{}` has feature_dim {}, others use {f}",
            s.name, s.feature_dim
        )));
    }
    for (i, a) in specs.iter().enumerate() {
        if specs[..i].iter().any(|b| b == a) {
            return Err(Error::Config(format!("duplicate architecture `{}`", a.name)));
        }
    }
    specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            ExpertModel::new(
                spec.clone(),
                input_dim,
                source_classes,
                seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
            )
        })
        .collect()
}
