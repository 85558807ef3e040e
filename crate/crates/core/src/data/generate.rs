use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Domain, SampleRecord, SplitDataset};
use crate::error::{Error, Result};

/// Affine map applied to clean target samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DomainShift {
    Identity,
    /// `V diag(s) V^T` with a random orthogonal `V` and log-spaced singular
    /// values whose ratio is `condition_number`, plus a Gaussian offset.
    /// The map stretches the space without rotating it.
    Random {
        condition_number: f64,
        offset_sd: f64,
    },
    Explicit {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Training identities per domain; the test split gets as many again.
    pub num_identities: usize,
    pub cameras_per_domain: usize,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    /// Standard deviation of identity prototypes.
    pub identity_separation: f64,
    /// Prototypes span a random subspace of this dimension; `None` uses all
    /// `input_dim` directions.
    pub identity_rank: Option<usize>,
    /// Standard deviation of each identity's cloud around its prototype.
    pub identity_spread: f64,
    pub domain_shift: DomainShift,
    pub camera_jitter_sd: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_identities: 50,
            cameras_per_domain: 4,
            samples_per_identity: 20,
            input_dim: 32,
            identity_separation: 1.0,
            identity_rank: None,
            identity_spread: 0.42,
            domain_shift: DomainShift::Random {
                condition_number: 5.0,
                offset_sd: 1.0,
            },
            camera_jitter_sd: 0.6,
            noise_sd: 0.42,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::Config(format!(
                "input_dim must be at least 2, got {}",
                self.input_dim
            )));
        }
        if let Some(r) = self.identity_rank {
            if r == 0 || r > self.input_dim {
                return Err(Error::Config(format!(
                    "identity_rank must be in 1..={}, got {r}",
                    self.input_dim
                )));
            }
        }
        for (name, v) in [
            ("num_identities", self.num_identities),
            ("cameras_per_domain", self.cameras_per_domain),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.samples_per_identity < 2 {
            return Err(Error::Config(
                "samples_per_identity must be at least 2 (query + gallery)".into(),
            ));
        }
        for (name, v) in [
            ("identity_separation", self.identity_separation),
            ("identity_spread", self.identity_spread),
            ("camera_jitter_sd", self.camera_jitter_sd),
            ("noise_sd", self.noise_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        match &self.domain_shift {
            DomainShift::Identity => {}
            DomainShift::Random {
                condition_number,
                offset_sd,
            } => {
                if !(*condition_number >= 1.0 && condition_number.is_finite()) {
                    return Err(Error::Config("condition_number must be >= 1".into()));
                }
                if offset_sd.is_nan() || *offset_sd < 0.0 {
                    return Err(Error::Config("offset_sd must be >= 0".into()));
                }
            }
            DomainShift::Explicit { matrix, offset } => {
                let d = self.input_dim;
                if matrix.len() != d || matrix.iter().any(|r| r.len() != d) || offset.len() != d {
                    return Err(Error::Config(format!(
                        "explicit domain shift must be a {d}x{d} matrix and a {d}-vector"
                    )));
                }
            }
        }
        Ok(())
    }
}

struct Affine {
    matrix: Vec<f64>,
    offset: Vec<f64>,
}

impl Affine {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|i| {
                let row = &self.matrix[i * d..(i + 1) * d];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offset[i]
            })
            .collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, sd: f64) -> Vec<f64> {
    (0..d)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Random orthogonal matrix (rows orthonormal) by Gram-Schmidt.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v = gaussian_vec(rng, d, 1.0);
        for r in &rows {
            let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows.concat()
}

fn build_shift(shift: &DomainShift, d: usize, rng: &mut ChaCha8Rng) -> Affine {
    match shift {
        DomainShift::Identity => {
            let mut matrix = vec![0.0; d * d];
            (0..d).for_each(|i| matrix[i * d + i] = 1.0);
            Affine {
                matrix,
                offset: vec![0.0; d],
            }
        }
        DomainShift::Random {
            condition_number,
            offset_sd,
        } => {
            let v = random_orthogonal(rng, d);
            // Geometric mean of the singular values is 1.
            let sv: Vec<f64> = (0..d)
                .map(|i| condition_number.powf(i as f64 / (d - 1) as f64 - 0.5))
                .collect();
            let mut matrix = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    matrix[i * d + j] = (0..d).map(|k| v[i * d + k] * sv[k] * v[j * d + k]).sum();
                }
            }
            let offset = gaussian_vec(rng, d, *offset_sd);
            Affine { matrix, offset }
        }
        DomainShift::Explicit { matrix, offset } => Affine {
            matrix: matrix.concat(),
            offset: offset.clone(),
        },
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn generate_domain(
    cfg: &GeneratorConfig,
    domain: Domain,
    id_base: u32,
    shift: Option<&Affine>,
    basis: Option<&[Vec<f64>]>,
    rng: &mut ChaCha8Rng,
) -> SplitDataset {
    let d = cfg.input_dim;
    let n_ids = cfg.num_identities;
    let cams = cfg.cameras_per_domain;
    let spi = cfg.samples_per_identity;
    let queries_per_id = cams.min(spi / 2).max(1);

    let camera_offsets: Vec<Vec<f64>> = (0..cams)
        .map(|_| gaussian_vec(rng, d, cfg.camera_jitter_sd))
        .collect();

    let mut out = SplitDataset {
        domain,
        dim: d,
        num_identities: n_ids,
        train: Vec::with_capacity(n_ids * spi),
        query: Vec::new(),
        gallery: Vec::new(),
    };

    // Training identities first, then the disjoint test identities.
    for id in 0..2 * n_ids {
        let prototype = match basis {
            None => gaussian_vec(rng, d, cfg.identity_separation),
            Some(rows) => {
                let coef = gaussian_vec(rng, rows.len(), cfg.identity_separation);
                (0..d)
                    .map(|j| rows.iter().zip(&coef).map(|(r, c)| r[j] * c).sum())
                    .collect()
            }
        };
        for s in 0..spi {
            let camera = s % cams;
            let clean: Vec<f64> = prototype
                .iter()
                .map(|p| p + cfg.identity_spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mapped = match shift {
                Some(a) => a.apply(&clean),
                None => clean,
            };
            let features: Vec<f64> = mapped
                .iter()
                .zip(&camera_offsets[camera])
                .map(|(x, o)| x + o + cfg.noise_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let record = SampleRecord {
                features: to_f32(features),
                identity: id_base + id as u32,
                camera: camera as u32,
                domain,
            };
            if id < n_ids {
                out.train.push(record);
            } else if s < queries_per_id {
                out.query.push(record);
            } else {
                out.gallery.push(record);
            }
        }
    }
    out
}

/// Generates a labelled source domain and a shifted target domain with
/// disjoint identity sets. Deterministic per `cfg.seed`.
pub fn generate(cfg: &GeneratorConfig) -> Result<(SplitDataset, SplitDataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shift = build_shift(&cfg.domain_shift, cfg.input_dim, &mut rng);
    let basis: Option<Vec<Vec<f64>>> = cfg.identity_rank.map(|r| {
        let q = random_orthogonal(&mut rng, cfg.input_dim);
        q.chunks(cfg.input_dim).take(r).map(<[f64]>::to_vec).collect()
    });
    let per_domain = (2 * cfg.num_identities) as u32;
    let source = generate_domain(cfg, Domain::Source, 0, None, basis.as_deref(), &mut rng);
    let target = generate_domain(cfg, Domain::Target, per_domain, Some(&shift), basis.as_deref(), &mut rng);
    Ok((source, target))
}
