use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{init_mlp, Activation, AdamWConfig, MlpClassifier, OptimizerState};
use crate::seed;
use crate::synthworld::{dot, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Affine factor embedding composed with a fixed orthonormal lift.
    Exact,
    /// One-hidden-layer tanh network regressed onto the exact decoder.
    Trained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub decoder: DecoderKind,
    pub hidden: usize,
    pub train_samples: usize,
    pub train_epochs: usize,
    /// Largest accepted sup-norm reconstruction error of the trained decoder.
    pub tolerance: f64,
    pub inversion_steps: usize,
    pub inversion_lr: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderKind::Exact,
            hidden: 64,
            train_samples: 4096,
            train_epochs: 60,
            tolerance: 0.05,
            inversion_steps: 200,
            inversion_lr: 0.05,
        }
    }
}

/// Invertible stand-in for a generative model: latent codes `z` in `R^m`
/// with a standard normal prior decode to inputs in `R^d`.
///
/// The exact decoder is `g(z) = c + A W^T z`, where `W` (`m x d`) has
/// orthonormal columns and `A = E S` maps whitened factor coordinates to
/// input space (`E` an orthonormal basis of class, spurious and remaining
/// directions, `S` the per-direction data scale under the reference split).
/// `W^T z` are the effective coordinates; the rest of `z` lies in the null
/// space of the decoder.
#[derive(Clone, Debug)]
pub struct Generator {
    center: Vec<f64>,
    mix: DMatrix<f64>,
    unmix: DMatrix<f64>,
    lift: DMatrix<f64>,
    /// `A W^T`, `d x m`.
    decode_matrix: Tensor<f64>,
    trained: Option<TrainedDecoder>,
    config: GeneratorConfig,
}

#[derive(Clone, Debug)]
struct TrainedDecoder {
    net: MlpClassifier<f64>,
}

fn factor_basis(world: &World) -> Vec<Vec<f64>> {
    let spec = world.spec();
    let d = world.input_dim();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    let candidates = spec
        .class_directions
        .iter()
        .chain(&spec.spurious_directions)
        .cloned()
        .chain((0..d).map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        }));
    for mut v in candidates {
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= p * c);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
        if basis.len() == d {
            break;
        }
    }
    basis
}

impl Generator {
    /// Builds the exact decoder for `world`; the lift `W` is drawn from `seed`.
    pub fn exact(world: &World, seed: u64) -> Result<Self> {
        Self::with_config(world, GeneratorConfig::default(), seed)
    }

    pub fn with_config(world: &World, config: GeneratorConfig, seed: u64) -> Result<Self> {
        let d = world.input_dim();
        let m = world.spec().latent_dim;
        let priors = world.priors(world.spec().reference_split);
        let groups: Vec<_> = world.groups().collect();
        let k = world.num_spurious_bits();
        let mut center = vec![0.0; d];
        for g in &groups {
            let p = priors[g.index(k)];
            center.iter_mut().zip(world.group_mean(*g)).for_each(|(c, mu)| *c += p * mu);
        }
        let noise = world.spec().noise_std;
        let basis = factor_basis(world);
        let mut mix = DMatrix::zeros(d, d);
        for (j, e) in basis.iter().enumerate() {
            let proj_c = dot(e, &center);
            let var: f64 = groups
                .iter()
                .map(|g| priors[g.index(k)] * (dot(e, world.group_mean(*g)) - proj_c).powi(2))
                .sum::<f64>()
                + noise * noise;
            let scale = var.sqrt();
            for i in 0..d {
                mix[(i, j)] = e[i] * scale;
            }
        }
        let unmix = mix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidSpec("degenerate factor embedding".into()))?;
        let mut rng = seed::rng(seed::derive(seed, "generator-lift"));
        let gauss = DMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lift = gauss.qr().q();
        let dm = &mix * lift.transpose();
        let decode_matrix = Tensor::from_vec(d, m, (0..d * m).map(|i| dm[(i / m, i % m)]).collect());
        let mut generator = Self {
            center,
            mix,
            unmix,
            lift,
            decode_matrix,
            trained: None,
            config: config.clone(),
        };
        if config.decoder == DecoderKind::Trained {
            generator.trained = Some(generator.fit_decoder(seed::derive(seed, "generator-decoder"))?);
        }
        Ok(generator)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.lift.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.center.len()
    }

    pub fn is_exact(&self) -> bool {
        self.trained.is_none()
    }

    fn decode_exact(&self, z: &[f64]) -> Vec<f64> {
        let x = self.decode_matrix.matmul(&Tensor::column(z.to_vec()));
        x.data().iter().zip(&self.center).map(|(a, c)| a + c).collect()
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.latent_dim(), "latent dimension");
        match &self.trained {
            None => self.decode_exact(z),
            Some(t) => t.net.logits_of(z),
        }
    }

    /// Records `z -> g(z)` for a latent node of shape `m x n`.
    pub fn record_decode(&self, tape: &mut Tape<f64>, z: Var) -> Var {
        match &self.trained {
            None => {
                let w = tape.leaf(self.decode_matrix.clone());
                let c = tape.leaf(Tensor::column(self.center.clone()));
                tape.affine(w, z, Some(c))
            }
            Some(t) => t.net.record(tape, z).1,
        }
    }

    /// Whitened factor coordinates `W^T z`.
    pub fn effective(&self, z: &[f64]) -> Vec<f64> {
        (self.lift.transpose() * DVector::from_column_slice(z)).as_slice().to_vec()
    }

    /// A latent code with effective coordinates `s` and a standard normal
    /// null-space component drawn from `seed`.
    pub fn from_effective(&self, s: &[f64], seed: u64) -> Vec<f64> {
        let m = self.latent_dim();
        let mut rng = seed::rng(seed);
        let n = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let null = &n - &self.lift * (self.lift.transpose() * &n);
        let z = &self.lift * DVector::from_column_slice(s) + null;
        z.as_slice().to_vec()
    }

    /// Latent code reconstructing `x`. The null-space component is keyed by
    /// the bits of `x` and `salt`, so inversion is a pure function.
    pub fn invert(&self, x: &[f64], salt: u64) -> Result<Vec<f64>> {
        assert_eq!(x.len(), self.input_dim(), "input dimension");
        let key = seed::hash_f64s(x, salt);
        let diff = DVector::from_iterator(x.len(), x.iter().zip(&self.center).map(|(a, c)| a - c));
        let s = &self.unmix * diff;
        let z0 = self.from_effective(s.as_slice(), key);
        match &self.trained {
            None => Ok(z0),
            Some(t) => self.invert_trained(t, x, key),
        }
    }

    fn invert_trained(&self, t: &TrainedDecoder, x: &[f64], key: u64) -> Result<Vec<f64>> {
        let m = self.latent_dim();
        let mut rng = seed::rng(key);
        let mut z = Tensor::column((0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let out = t.net.record(&mut tape, zv).1;
        let target = tape.leaf(Tensor::column(x.to_vec()));
        let r = tape.combine(&[(out, 1.0), (target, -1.0)], 0.0);
        let sq = tape.pow(r, 2.0);
        tape.sum(sq);
        let mut opt = OptimizerState::new(AdamWConfig::default().learning_rate(self.config.inversion_lr).weight_decay(0.0));
        let mut best = (f64::INFINITY, z.clone());
        for step in 0..=self.config.inversion_steps {
            tape.forward_with(&[(zv, z.clone())])?;
            let residual = tape
                .value(out)
                .expect("evaluated")
                .data()
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if residual < best.0 {
                best = (residual, z.clone());
            }
            if step == self.config.inversion_steps {
                break;
            }
            let g = tape.backward()?.wrt(zv).clone();
            opt.step(&mut [&mut z], &[&g])?;
        }
        if best.0 > self.config.tolerance {
            return Err(Error::Reconstruction {
                residual: best.0,
                tolerance: self.config.tolerance,
            });
        }
        Ok(best.1.into_vec())
    }

    fn fit_decoder(&self, seed: u64) -> Result<TrainedDecoder> {
        let m = self.latent_dim();
        let d = self.input_dim();
        let mut net = init_mlp::<f64>(&[m, self.config.hidden, d], Activation::Tanh, seed)?;
        let mut rng = seed::rng(seed::derive(seed, "samples"));
        let zs: Vec<Vec<f64>> = (0..self.config.train_samples)
            .map(|_| (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let xs: Vec<Vec<f64>> = zs.iter().map(|z| self.decode_exact(z)).collect();
        let batch = 128;
        let total = self.config.train_epochs * zs.len().div_ceil(batch);
        let mut opt = OptimizerState::new(AdamWConfig::default().learning_rate(1e-2).weight_decay(0.0));
        let mut step = 0;
        for _ in 0..self.config.train_epochs {
            for (zb, xb) in zs.chunks(batch).zip(xs.chunks(batch)) {
                let mut tape = Tape::new();
                let zv = tape.leaf(Tensor::from_columns(zb));
                let (leaves, out) = net.record(&mut tape, zv);
                let tv = tape.leaf(Tensor::from_columns(xb));
                let r = tape.combine(&[(out, 1.0), (tv, -1.0)], 0.0);
                let sq = tape.pow(r, 2.0);
                let s = tape.sum(sq);
                tape.combine(&[(s, 1.0 / zb.len() as f64)], 0.0);
                tape.forward()?;
                let grads = tape.backward()?;
                let gs: Vec<&Tensor<f64>> = leaves.iter().map(|v| grads.wrt(*v)).collect();
                opt.set_learning_rate(crate::models::cosine_lr(1e-2, step, total)?);
                opt.step(&mut net.params_mut(), &gs)?;
                step += 1;
            }
        }
        Ok(TrainedDecoder { net })
    }

    /// `A`, mapping whitened factor coordinates to input offsets.
    pub fn factor_matrix(&self) -> &DMatrix<f64> {
        &self.mix
    }
}
