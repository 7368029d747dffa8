use cvaegg_autodiff::Tensor;
use rand::Rng;

use super::model::CvaeModel;
use super::vocab::{TokenizedTuple, COMPONENTS};
use super::CvaeError;
use crate::dfscode::{decode, validate_partial, DfsCode};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    /// Maximum decoder steps, the EOS step included.
    pub max_len: usize,
    /// Use `z = 0` and the most likely symbol of every head.
    pub greedy: bool,
    /// Softmax temperature for sampling; ignored when greedy.
    pub temperature: f64,
}

impl GenerateOptions {
    pub fn sampling(max_len: usize) -> Self {
        Self {
            max_len,
            greedy: false,
            temperature: 1.0,
        }
    }

    pub fn greedy(max_len: usize) -> Self {
        Self {
            max_len,
            greedy: true,
            temperature: 1.0,
        }
    }
}

/// Why a sampled sequence was discarded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rejection {
    InvalidCode(String),
    MaxLenExceeded,
}

impl Rejection {
    /// Short reason label for reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidCode(_) => "invalid_code",
            Self::MaxLenExceeded => "max_len",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Generated {
    Accepted(DfsCode),
    Rejected(Rejection),
}

impl CvaeModel {
    /// Samples one code under `condition`. Every step draws all five
    /// components; the sequence ends when the `t_u` head emits EOS. Prefixes
    /// that can no longer become a valid code are rejected immediately.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        condition: &[f64],
        rng: &mut R,
        opts: &GenerateOptions,
    ) -> Result<Generated, CvaeError> {
        if condition.len() != self.condition_dim() {
            return Err(CvaeError::ConditionWidth {
                expected: self.condition_dim(),
                got: condition.len(),
            });
        }
        if !opts.greedy && !(opts.temperature.is_finite() && opts.temperature > 0.0) {
            return Err(CvaeError::Config(format!(
                "temperature must be positive, got {}",
                opts.temperature
            )));
        }
        let latent = self.hyperparams().latent_dim;
        let z = if opts.greedy {
            vec![0.0; latent]
        } else {
            Tensor::normal(1, latent, 1.0, rng).into_data()
        };
        let vocab = *self.vocab();
        let eos = vocab.eos_indices();
        let mut state = self.start_state(&z)?;
        let mut prev: Option<TokenizedTuple> = None;
        let mut tuples = Vec::new();
        for _ in 0..opts.max_len {
            let (logits, next) = self.step(prev.as_ref(), condition, &z, &state)?;
            state = next;
            let mut indices = [0; COMPONENTS];
            for (k, l) in logits.iter().enumerate() {
                indices[k] = if opts.greedy {
                    argmax(l)
                } else {
                    sample_softmax(l, opts.temperature, rng)
                };
            }
            if indices[0] == eos[0] {
                if tuples.is_empty() {
                    return Ok(Generated::Rejected(Rejection::InvalidCode(
                        "EOS before any edge".into(),
                    )));
                }
                let code = DfsCode::new(tuples);
                return Ok(match decode(&code) {
                    Ok(_) => Generated::Accepted(code),
                    Err(e) => Generated::Rejected(Rejection::InvalidCode(e.to_string())),
                });
            }
            let row = TokenizedTuple {
                indices,
                eos: false,
            };
            match vocab.detokenize_tuple(&row) {
                Ok(t) => tuples.push(t),
                Err(e) => return Ok(Generated::Rejected(Rejection::InvalidCode(e.to_string()))),
            }
            if !validate_partial(&tuples) {
                let reason = match decode(&DfsCode::new(tuples)) {
                    Err(e) => e.to_string(),
                    Ok(_) => unreachable!("decode accepts exactly the valid prefixes"),
                };
                return Ok(Generated::Rejected(Rejection::InvalidCode(reason)));
            }
            prev = Some(row);
        }
        Ok(Generated::Rejected(Rejection::MaxLenExceeded))
    }
}

/// Index of the largest entry; the first one on ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::{Hyperparams, Vocabularies};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CvaeModel {
        let hp = Hyperparams {
            hidden_dim: 16,
            embed_dim: 10,
            latent_dim: 4,
            ..Hyperparams::default()
        };
        CvaeModel::new(hp, Vocabularies::new(8).unwrap(), 2, 1).unwrap()
    }

    #[test]
    fn zero_budget_is_rejected() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m
            .generate(&[-1.1, 0.2], &mut rng, &GenerateOptions::sampling(0))
            .unwrap();
        assert_eq!(out, Generated::Rejected(Rejection::MaxLenExceeded));
    }

    #[test]
    fn accepted_codes_decode_to_connected_graphs() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let opts = GenerateOptions::sampling(30);
        let mut outcomes = 0;
        for _ in 0..200 {
            match m.generate(&[-1.1, 0.2], &mut rng, &opts).unwrap() {
                Generated::Accepted(code) => {
                    let g = decode(&code).unwrap();
                    assert!(g.is_connected());
                    assert_eq!(g.edge_count(), code.len());
                }
                Generated::Rejected(_) => {}
            }
            outcomes += 1;
        }
        assert_eq!(outcomes, 200);
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = model();
        let opts = GenerateOptions::greedy(30);
        let a = m
            .generate(&[-0.8, 0.4], &mut ChaCha8Rng::seed_from_u64(1), &opts)
            .unwrap();
        let b = m
            .generate(&[-0.8, 0.4], &mut ChaCha8Rng::seed_from_u64(2), &opts)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_sampling_repeats() {
        let m = model();
        let opts = GenerateOptions::sampling(30);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| m.generate(&[-0.5, 0.6], &mut rng, &opts).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn softmax_sampling_follows_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = [0.0, (3.0f64).ln()];
        let ones = (0..20000)
            .filter(|_| sample_softmax(&logits, 1.0, &mut rng) == 1)
            .count();
        assert!((ones as f64 / 20000.0 - 0.75).abs() < 0.015);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
