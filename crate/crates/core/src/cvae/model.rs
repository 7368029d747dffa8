use cvaegg_autodiff::{Gradients, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{TokenizedTuple, Vocabularies, COMPONENTS};
use super::{CvaeError, Hyperparams, LatentWiring};

const COMPONENT_NAMES: [&str; COMPONENTS] = ["t_u", "t_v", "l_u", "l_e", "l_v"];

// Fixed parameter order. Heads interleave weight and bias per component.
const EMBED: usize = 0;
const START: usize = 5;
const ENC_WX: usize = 6;
const ENC_WH: usize = 7;
const ENC_B: usize = 8;
const MU_W: usize = 9;
const MU_B: usize = 10;
const LV_W: usize = 11;
const LV_B: usize = 12;
const INIT_W: usize = 13;
const INIT_B: usize = 14;
const DEC_WX: usize = 15;
const DEC_WH: usize = 16;
const DEC_B: usize = 17;
const HEAD: usize = 18;
const PARAM_COUNT: usize = HEAD + 2 * COMPONENTS;

/// Splits `embed_dim` across the five components as evenly as possible.
/// Every component gets at least one column, so the total exceeds
/// `embed_dim` when it is below 5.
pub fn embedding_widths(embed_dim: usize) -> [usize; COMPONENTS] {
    let base = embed_dim / COMPONENTS;
    let extra = embed_dim % COMPONENTS;
    std::array::from_fn(|k| (base + usize::from(k < extra)).max(1))
}

/// LSTM hidden and cell state, one row per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Model parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// One gradient per parameter, zero where the loss did not reach it.
    pub fn collect_gradients(&self, grads: &mut Gradients, params: &[Tensor]) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params)
            .map(|(v, p)| {
                grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect()
    }
}

/// The ELBO pieces for one batch. `total = reconstruction + kl_weight * kl`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel {
    hp: Hyperparams,
    vocab: Vocabularies,
    condition_dim: usize,
    params: Vec<Tensor>,
}

impl CvaeModel {
    /// A freshly initialized model. Weights are uniform in
    /// `±1/sqrt(fan_in)`, embeddings standard normal, forget-gate biases 1.
    pub fn new(
        hp: Hyperparams,
        vocab: Vocabularies,
        condition_dim: usize,
        seed: u64,
    ) -> Result<Self, CvaeError> {
        hp.validate()?;
        if condition_dim == 0 {
            return Err(CvaeError::Config("condition_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(&hp, &vocab, condition_dim);
        let h = hp.hidden_dim;
        let mut params = Vec::with_capacity(PARAM_COUNT);
        for (i, &(rows, cols)) in shapes.iter().enumerate() {
            let t = match i {
                EMBED..=START => Tensor::normal(rows, cols, 1.0, &mut rng),
                ENC_WX | ENC_WH | ENC_B | DEC_WX | DEC_WH | DEC_B => {
                    let mut t = Tensor::uniform(rows, cols, 1.0 / (h as f64).sqrt(), &mut rng);
                    if rows == 1 {
                        for j in h..2 * h {
                            t.set(0, j, t.get(0, j) + 1.0);
                        }
                    }
                    t
                }
                _ => {
                    // Biases share the bound of their weight matrix.
                    let fan_in = if rows == 1 { shapes[i - 1].0 } else { rows };
                    Tensor::uniform(rows, cols, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                }
            };
            params.push(t);
        }
        Ok(Self {
            hp,
            vocab,
            condition_dim,
            params,
        })
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_parts(
        hp: Hyperparams,
        vocab: Vocabularies,
        condition_dim: usize,
        params: Vec<Tensor>,
    ) -> Result<Self, CvaeError> {
        hp.validate()?;
        let shapes = param_shapes(&hp, &vocab, condition_dim);
        if params.len() != shapes.len() {
            return Err(CvaeError::Config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        let names = param_names();
        for ((p, shape), name) in params.iter().zip(&shapes).zip(&names) {
            if p.shape() != *shape {
                return Err(CvaeError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            hp,
            vocab,
            condition_dim,
            params,
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn set_hyperparams(&mut self, hp: Hyperparams) -> Result<(), CvaeError> {
        hp.validate()?;
        let same_shape = |a: &Hyperparams| (a.hidden_dim, a.embed_dim, a.latent_dim, a.wiring);
        if same_shape(&hp) != same_shape(&self.hp) {
            return Err(CvaeError::Config(
                "architecture fields cannot change".into(),
            ));
        }
        self.hp = hp;
        Ok(())
    }

    pub fn vocab(&self) -> &Vocabularies {
        &self.vocab
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    pub fn param_names(&self) -> Vec<String> {
        param_names()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` without copying.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p)).collect(),
        }
    }

    fn check_conditions(&self, conds: &[&[f64]]) -> Result<(), CvaeError> {
        for c in conds {
            if c.len() != self.condition_dim {
                return Err(CvaeError::ConditionWidth {
                    expected: self.condition_dim,
                    got: c.len(),
                });
            }
        }
        Ok(())
    }

    /// Concatenated component embeddings, one row per token.
    fn embed_rows(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        rows: &[TokenizedTuple],
    ) -> Result<Var, CvaeError> {
        let sizes = self.vocab.sizes();
        let mut parts = Vec::with_capacity(COMPONENTS);
        for k in 0..COMPONENTS {
            let idx: Vec<usize> = rows.iter().map(|r| r.indices[k]).collect();
            if let Some(&bad) = idx.iter().find(|&&i| i >= sizes[k]) {
                return Err(CvaeError::BadToken {
                    component: k,
                    index: bad,
                });
            }
            parts.push(tape.gather_rows(b.vars[EMBED + k], &idx)?);
        }
        Ok(tape.concat_cols(&parts)?)
    }

    /// `steps` copies of the batch's condition rows, step-major.
    fn condition_rows(&self, tape: &mut Tape<'_>, conds: &[&[f64]], steps: usize) -> Var {
        let mut data = Vec::with_capacity(steps * conds.len() * self.condition_dim);
        for _ in 0..steps {
            for c in conds {
                data.extend_from_slice(c);
            }
        }
        let t = Tensor::new(steps * conds.len(), self.condition_dim, data)
            .expect("non-empty batch and condition");
        tape.constant(t)
    }

    /// Runs the encoder over a batch of token sequences (each ending with
    /// EOS) and returns `(mu, logvar)`, one row per sequence.
    pub fn encode_batch(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        seqs: &[&[TokenizedTuple]],
        conds: &[&[f64]],
    ) -> Result<(Var, Var), CvaeError> {
        let batch = check_batch(seqs, conds)?;
        self.check_conditions(conds)?;
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let eos = self.vocab.eos();
        let rows: Vec<TokenizedTuple> = (0..steps)
            .flat_map(|t| seqs.iter().map(move |s| s.get(t).copied().unwrap_or(eos)))
            .collect();
        let emb = self.embed_rows(tape, b, &rows)?;
        let cond = self.condition_rows(tape, conds, steps);
        let x = tape.concat_cols(&[emb, cond])?;
        let xw = tape.matmul(x, b.vars[ENC_WX])?;
        let xw = tape.add_row(xw, b.vars[ENC_B])?;

        let hdim = self.hp.hidden_dim;
        let mut h = tape.constant(Tensor::zeros(batch, hdim));
        let mut c = tape.constant(Tensor::zeros(batch, hdim));
        for t in 0..steps {
            let xw_t = tape.slice_rows(xw, t * batch, (t + 1) * batch)?;
            let (h_new, c_new) = lstm_cell(tape, xw_t, h, c, b.vars[ENC_WH], hdim)?;
            if seqs.iter().all(|s| t < s.len()) {
                h = h_new;
                c = c_new;
            } else {
                // Finished sequences keep their last state.
                let mut mask = Tensor::zeros(batch, hdim);
                for (i, s) in seqs.iter().enumerate() {
                    if t < s.len() {
                        mask.data_mut()[i * hdim..(i + 1) * hdim].fill(1.0);
                    }
                }
                let mask = tape.constant(mask);
                h = masked_update(tape, h, h_new, mask)?;
                c = masked_update(tape, c, c_new, mask)?;
            }
        }
        let mu = tape.matmul(h, b.vars[MU_W])?;
        let mu = tape.add_row(mu, b.vars[MU_B])?;
        let logvar = tape.matmul(h, b.vars[LV_W])?;
        let logvar = tape.add_row(logvar, b.vars[LV_B])?;
        Ok((mu, logvar))
    }

    /// Decoder state before the first step: `h0 = tanh(z W + b)`, `c0 = 0`.
    pub fn initial_state(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        z: Var,
    ) -> Result<(Var, Var), CvaeError> {
        let rows = tape.value(z).rows();
        let pre = tape.matmul(z, b.vars[INIT_W])?;
        let pre = tape.add_row(pre, b.vars[INIT_B])?;
        let h = tape.tanh(pre);
        let c = tape.constant(Tensor::zeros(rows, self.hp.hidden_dim));
        Ok((h, c))
    }

    /// Logits for every component from hidden rows and matching `z` rows.
    fn heads(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        h: Var,
        z_rows: Var,
    ) -> Result<[Var; COMPONENTS], CvaeError> {
        let input = match self.hp.wiring {
            LatentWiring::HiddenConcat => tape.concat_cols(&[h, z_rows])?,
            LatentWiring::InputConcat => h,
        };
        let mut out = Vec::with_capacity(COMPONENTS);
        for k in 0..COMPONENTS {
            let logits = tape.matmul(input, b.vars[HEAD + 2 * k])?;
            out.push(tape.add_row(logits, b.vars[HEAD + 2 * k + 1])?);
        }
        Ok(out.try_into().expect("five heads"))
    }

    fn decoder_input(
        &self,
        tape: &mut Tape<'_>,
        emb: Var,
        cond: Var,
        z_rows: Var,
    ) -> Result<Var, CvaeError> {
        let parts = match self.hp.wiring {
            LatentWiring::HiddenConcat => vec![emb, cond],
            LatentWiring::InputConcat => vec![emb, cond, z_rows],
        };
        Ok(tape.concat_cols(&parts)?)
    }

    /// One decoder step for a batch. `prev = None` feeds the learned start
    /// marker. Returns the five logit blocks and the new `(h, c)`.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_step(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        prev: Option<&[TokenizedTuple]>,
        cond: Var,
        z: Var,
        state: (Var, Var),
    ) -> Result<([Var; COMPONENTS], (Var, Var)), CvaeError> {
        let rows = tape.value(z).rows();
        let emb = match prev {
            Some(p) => self.embed_rows(tape, b, p)?,
            None => tape.gather_rows(b.vars[START], &vec![0; rows])?,
        };
        let x = self.decoder_input(tape, emb, cond, z)?;
        let xw = tape.matmul(x, b.vars[DEC_WX])?;
        let xw = tape.add_row(xw, b.vars[DEC_B])?;
        let (h, c) = lstm_cell(
            tape,
            xw,
            state.0,
            state.1,
            b.vars[DEC_WH],
            self.hp.hidden_dim,
        )?;
        let logits = self.heads(tape, b, h, z)?;
        Ok((logits, (h, c)))
    }

    /// Teacher-forced reconstruction loss: step `j` sees token `j - 1` (the
    /// start marker at `j = 0`) and is scored on all five components of
    /// token `j`. Per sequence the loss is the mean over its steps; the
    /// batch value is the mean over sequences.
    pub fn reconstruction_loss_batch(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        seqs: &[&[TokenizedTuple]],
        conds: &[&[f64]],
        z: Var,
    ) -> Result<Var, CvaeError> {
        let batch = check_batch(seqs, conds)?;
        self.check_conditions(conds)?;
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let eos = self.vocab.eos();
        let token = |s: &[TokenizedTuple], t: usize| s.get(t).copied().unwrap_or(eos);

        let start = tape.gather_rows(b.vars[START], &vec![0; batch])?;
        let emb = if steps > 1 {
            let prev: Vec<TokenizedTuple> = (0..steps - 1)
                .flat_map(|t| seqs.iter().map(move |s| token(s, t)))
                .collect();
            let rest = self.embed_rows(tape, b, &prev)?;
            tape.concat_rows(&[start, rest])?
        } else {
            start
        };
        let cond = self.condition_rows(tape, conds, steps);
        let z_index: Vec<usize> = (0..steps).flat_map(|_| 0..batch).collect();
        let z_rows = tape.gather_rows(z, &z_index)?;
        let x = self.decoder_input(tape, emb, cond, z_rows)?;
        let xw = tape.matmul(x, b.vars[DEC_WX])?;
        let xw = tape.add_row(xw, b.vars[DEC_B])?;

        let (mut h, mut c) = self.initial_state(tape, b, z)?;
        let mut hidden = Vec::with_capacity(steps);
        for t in 0..steps {
            let xw_t = tape.slice_rows(xw, t * batch, (t + 1) * batch)?;
            (h, c) = lstm_cell(tape, xw_t, h, c, b.vars[DEC_WH], self.hp.hidden_dim)?;
            hidden.push(h);
        }
        let hidden = tape.concat_rows(&hidden)?;
        let logits = self.heads(tape, b, hidden, z_rows)?;

        let mut weights = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            for s in seqs {
                let w = if t < s.len() {
                    1.0 / (batch * s.len()) as f64
                } else {
                    0.0
                };
                weights.push(w);
            }
        }
        let mut terms = Vec::with_capacity(COMPONENTS);
        for (k, l) in logits.iter().enumerate() {
            let targets: Vec<usize> = (0..steps)
                .flat_map(|t| seqs.iter().map(move |s| token(s, t).indices[k]))
                .collect();
            terms.push(tape.weighted_softmax_cross_entropy(*l, &targets, &weights)?);
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        Ok(total)
    }

    /// Encode, sample `z = mu + exp(logvar / 2) * eps`, decode. `eps` holds
    /// one standard-normal row per sequence.
    pub fn loss_batch(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        seqs: &[&[TokenizedTuple]],
        conds: &[&[f64]],
        eps: Tensor,
    ) -> Result<LossTerms, CvaeError> {
        let (mu, logvar) = self.encode_batch(tape, b, seqs, conds)?;
        let z = reparameterize(tape, mu, logvar, eps)?;
        let reconstruction = self.reconstruction_loss_batch(tape, b, seqs, conds, z)?;
        let kl = kl_divergence(tape, mu, logvar)?;
        let weighted = tape.scale(kl, self.hp.kl_weight);
        let total = tape.add(reconstruction, weighted)?;
        Ok(LossTerms {
            total,
            reconstruction,
            kl,
        })
    }

    /// `(mu, logvar)` for a single sequence.
    pub fn encode(
        &self,
        tokens: &[TokenizedTuple],
        condition: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), CvaeError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let (mu, logvar) = self.encode_batch(&mut tape, &b, &[tokens], &[condition])?;
        Ok((
            tape.value(mu).data().to_vec(),
            tape.value(logvar).data().to_vec(),
        ))
    }

    /// Reconstruction loss of a single sequence for a given `z`.
    pub fn reconstruction_loss(
        &self,
        tokens: &[TokenizedTuple],
        condition: &[f64],
        z: &[f64],
    ) -> Result<f64, CvaeError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let z = tape.constant(self.latent_row(z)?);
        let loss = self.reconstruction_loss_batch(&mut tape, &b, &[tokens], &[condition], z)?;
        Ok(tape.value(loss).item())
    }

    /// Full single-sequence loss with `eps` drawn from `seed`.
    pub fn loss(
        &self,
        tokens: &[TokenizedTuple],
        condition: &[f64],
        seed: u64,
    ) -> Result<f64, CvaeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Tensor::normal(1, self.hp.latent_dim, 1.0, &mut rng);
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let terms = self.loss_batch(&mut tape, &b, &[tokens], &[condition], eps)?;
        Ok(tape.value(terms.total).item())
    }

    /// Initial decoder state for a latent row.
    pub fn start_state(&self, z: &[f64]) -> Result<LstmState, CvaeError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let z = tape.constant(self.latent_row(z)?);
        let (h, c) = self.initial_state(&mut tape, &b, z)?;
        Ok(LstmState {
            h: tape.value(h).clone(),
            c: tape.value(c).clone(),
        })
    }

    /// One decoder step on plain values, for generation.
    pub fn step(
        &self,
        prev: Option<&TokenizedTuple>,
        condition: &[f64],
        z: &[f64],
        state: &LstmState,
    ) -> Result<([Vec<f64>; COMPONENTS], LstmState), CvaeError> {
        self.check_conditions(&[condition])?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let cond = tape.constant(Tensor::row(condition));
        let z = tape.constant(self.latent_row(z)?);
        let h = tape.constant(state.h.clone());
        let c = tape.constant(state.c.clone());
        let prev = prev.map(std::slice::from_ref);
        let (logits, (h, c)) = self.decoder_step(&mut tape, &b, prev, cond, z, (h, c))?;
        let logits = logits.map(|l| tape.value(l).data().to_vec());
        Ok((
            logits,
            LstmState {
                h: tape.value(h).clone(),
                c: tape.value(c).clone(),
            },
        ))
    }

    fn latent_row(&self, z: &[f64]) -> Result<Tensor, CvaeError> {
        if z.len() != self.hp.latent_dim {
            return Err(CvaeError::Config(format!(
                "latent vector has {} values, model expects {}",
                z.len(),
                self.hp.latent_dim
            )));
        }
        Ok(Tensor::row(z))
    }
}

fn check_batch(seqs: &[&[TokenizedTuple]], conds: &[&[f64]]) -> Result<usize, CvaeError> {
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        return Err(CvaeError::EmptyBatch);
    }
    if seqs.len() != conds.len() {
        return Err(CvaeError::Config(format!(
            "{} sequences but {} conditions",
            seqs.len(),
            conds.len()
        )));
    }
    Ok(seqs.len())
}

pub(super) fn param_names() -> Vec<String> {
    let mut names: Vec<String> = COMPONENT_NAMES
        .iter()
        .map(|c| format!("embed.{c}"))
        .collect();
    names.extend(
        [
            "start",
            "encoder.w_x",
            "encoder.w_h",
            "encoder.b",
            "mu.w",
            "mu.b",
            "logvar.w",
            "logvar.b",
            "init.w",
            "init.b",
            "decoder.w_x",
            "decoder.w_h",
            "decoder.b",
        ]
        .map(String::from),
    );
    for c in COMPONENT_NAMES {
        names.push(format!("head.{c}.w"));
        names.push(format!("head.{c}.b"));
    }
    names
}

fn param_shapes(hp: &Hyperparams, vocab: &Vocabularies, cond: usize) -> Vec<(usize, usize)> {
    let widths = embedding_widths(hp.embed_dim);
    let sizes = vocab.sizes();
    let e: usize = widths.iter().sum();
    let (h, l) = (hp.hidden_dim, hp.latent_dim);
    let dec_in = match hp.wiring {
        LatentWiring::HiddenConcat => e + cond,
        LatentWiring::InputConcat => e + cond + l,
    };
    let head_in = match hp.wiring {
        LatentWiring::HiddenConcat => h + l,
        LatentWiring::InputConcat => h,
    };
    let mut shapes: Vec<(usize, usize)> = (0..COMPONENTS).map(|k| (sizes[k], widths[k])).collect();
    shapes.extend([
        (1, e),
        (e + cond, 4 * h),
        (h, 4 * h),
        (1, 4 * h),
        (h, l),
        (1, l),
        (h, l),
        (1, l),
        (l, h),
        (1, h),
        (dec_in, 4 * h),
        (h, 4 * h),
        (1, 4 * h),
    ]);
    for s in sizes {
        shapes.push((head_in, s));
        shapes.push((1, s));
    }
    debug_assert_eq!(shapes.len(), PARAM_COUNT);
    shapes
}

/// One LSTM step. `xw` already holds the input projection plus bias; gate
/// blocks are ordered input, forget, candidate, output.
pub fn lstm_cell(
    tape: &mut Tape<'_>,
    xw: Var,
    h: Var,
    c: Var,
    w_h: Var,
    hidden: usize,
) -> Result<(Var, Var), CvaeError> {
    let hw = tape.matmul(h, w_h)?;
    let pre = tape.add(xw, hw)?;
    let i = tape.slice_cols(pre, 0, hidden)?;
    let f = tape.slice_cols(pre, hidden, 2 * hidden)?;
    let g = tape.slice_cols(pre, 2 * hidden, 3 * hidden)?;
    let o = tape.slice_cols(pre, 3 * hidden, 4 * hidden)?;
    let (i, f, g, o) = (
        tape.sigmoid(i),
        tape.sigmoid(f),
        tape.tanh(g),
        tape.sigmoid(o),
    );
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// `old + mask * (new - old)`.
fn masked_update(tape: &mut Tape<'_>, old: Var, new: Var, mask: Var) -> Result<Var, CvaeError> {
    let delta = tape.sub(new, old)?;
    let delta = tape.mul(delta, mask)?;
    Ok(tape.add(old, delta)?)
}

/// `z = mu + exp(logvar / 2) * eps`, differentiable in `mu` and `logvar`.
pub fn reparameterize(
    tape: &mut Tape<'_>,
    mu: Var,
    logvar: Var,
    eps: Tensor,
) -> Result<Var, CvaeError> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(eps);
    let noise = tape.mul(std, eps)?;
    Ok(tape.add(mu, noise)?)
}

/// `0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)`, averaged over rows.
pub fn kl_divergence(tape: &mut Tape<'_>, mu: Var, logvar: Var) -> Result<Var, CvaeError> {
    let rows = tape.value(mu).rows();
    let var = tape.exp(logvar);
    let mu2 = tape.mul(mu, mu)?;
    let a = tape.add(var, mu2)?;
    let a = tape.sub(a, logvar)?;
    let a = tape.add_scalar(a, -1.0);
    let s = tape.sum(a);
    Ok(tape.scale(s, 0.5 / rows as f64))
}

/// [`kl_divergence`] of one diagonal Gaussian, on plain values.
pub fn kl_divergence_values(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfscode::min_dfs_code;
    use crate::graph::Graph;

    pub(super) fn tiny(wiring: LatentWiring) -> CvaeModel {
        let hp = Hyperparams {
            hidden_dim: 8,
            embed_dim: 4,
            latent_dim: 3,
            wiring,
            ..Hyperparams::default()
        };
        CvaeModel::new(hp, Vocabularies::new(6).unwrap(), 2, 5).unwrap()
    }

    fn tokens(model: &CvaeModel, edges: &[(usize, usize)]) -> Vec<TokenizedTuple> {
        let n = edges.iter().map(|&(a, b)| a.max(b)).max().unwrap() + 1;
        let g = Graph::from_edges(n, edges)
            .unwrap()
            .relabel_reciprocal_degree()
            .unwrap();
        model.vocab().tokenize(&min_dfs_code(&g).unwrap()).unwrap()
    }

    #[test]
    fn widths_split_evenly() {
        assert_eq!(embedding_widths(128), [26, 26, 26, 25, 25]);
        assert_eq!(embedding_widths(32), [7, 7, 6, 6, 6]);
        assert_eq!(embedding_widths(4), [1, 1, 1, 1, 1]);
    }

    #[test]
    fn shapes_follow_hyperparams() {
        let m =
            CvaeModel::new(Hyperparams::default(), Vocabularies::new(25).unwrap(), 2, 0).unwrap();
        let names = m.param_names();
        let find = |n: &str| &m.params()[names.iter().position(|x| x == n).unwrap()];
        assert_eq!(find("mu.w").shape(), (256, 20));
        assert_eq!(find("logvar.w").shape(), (256, 20));
        assert_eq!(find("encoder.w_x").shape(), (130, 1024));
        assert_eq!(find("head.t_u.w").shape(), (276, 26));
        assert_eq!(find("head.l_e.b").shape(), (1, 2));
        let bias = find("encoder.b");
        for j in 0..1024 {
            let center = if (256..512).contains(&j) { 1.0 } else { 0.0 };
            assert!((bias.get(0, j) - center).abs() <= 1.0 / 16.0);
        }
    }

    #[test]
    fn encoder_output_shapes() {
        let m = tiny(LatentWiring::HiddenConcat);
        let t = tokens(&m, &[(0, 1), (1, 2)]);
        let (mu, lv) = m.encode(&t, &[-1.0, 0.2]).unwrap();
        assert_eq!((mu.len(), lv.len()), (3, 3));
        assert!(m.encode(&t, &[-1.0]).is_err());
    }

    #[test]
    fn batched_encoding_matches_single() {
        let m = tiny(LatentWiring::HiddenConcat);
        let a = tokens(&m, &[(0, 1), (1, 2), (2, 0), (2, 3)]);
        let b = tokens(&m, &[(0, 1)]);
        let (ca, cb) = ([-1.0, 0.3], [-0.5, 0.0]);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let (mu, _) = m
            .encode_batch(&mut tape, &bound, &[&a, &b], &[&ca, &cb])
            .unwrap();
        let mu = tape.value(mu).clone();
        let (mu_a, _) = m.encode(&a, &ca).unwrap();
        let (mu_b, _) = m.encode(&b, &cb).unwrap();
        for j in 0..3 {
            assert!((mu.get(0, j) - mu_a[j]).abs() < 1e-12);
            assert!((mu.get(1, j) - mu_b[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_forcing_matches_stepwise_decoding() {
        for wiring in [LatentWiring::HiddenConcat, LatentWiring::InputConcat] {
            let m = tiny(wiring);
            let t = tokens(&m, &[(0, 1), (1, 2), (2, 0)]);
            let c = [-0.8, 0.4];
            let z = [0.3, -1.2, 0.5];
            let forced = m.reconstruction_loss(&t, &c, &z).unwrap();
            let mut state = m.start_state(&z).unwrap();
            let mut total = 0.0;
            for (j, target) in t.iter().enumerate() {
                let prev = j.checked_sub(1).map(|p| &t[p]);
                let (logits, next) = m.step(prev, &c, &z, &state).unwrap();
                for k in 0..COMPONENTS {
                    total += neg_log_softmax(&logits[k], target.indices[k]);
                }
                state = next;
            }
            let stepwise = total / t.len() as f64;
            assert!(
                (forced - stepwise).abs() < 1e-12,
                "{wiring}: {forced} vs {stepwise}"
            );
        }
    }

    fn neg_log_softmax(logits: &[f64], target: usize) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        lse - logits[target]
    }

    #[test]
    fn latent_changes_logits() {
        let m = tiny(LatentWiring::HiddenConcat);
        let s0 = m.start_state(&[0.0; 3]).unwrap();
        let s1 = m.start_state(&[1.0, -1.0, 0.5]).unwrap();
        let (a, _) = m.step(None, &[-1.1, 0.2], &[0.0; 3], &s0).unwrap();
        let (b, _) = m.step(None, &[-1.1, 0.2], &[1.0, -1.0, 0.5], &s1).unwrap();
        assert_ne!(a, b);
        let (again, _) = m.step(None, &[-1.1, 0.2], &[0.0; 3], &s0).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence_values(&[0.0; 20], &[0.0; 20]), 0.0);
        assert!((kl_divergence_values(&[1.0; 20], &[0.0; 20]) - 10.0).abs() < 1e-12);
        let mut tape = Tape::new();
        let mu = tape.variable(Tensor::row(&[1.0; 20]));
        let lv = tape.variable(Tensor::row(&[0.0; 20]));
        let kl = kl_divergence(&mut tape, mu, lv).unwrap();
        assert!((tape.value(kl).item() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_collapses_without_variance() {
        let mut tape = Tape::new();
        let mu = tape.variable(Tensor::row(&[0.7, -2.0]));
        let lv = tape.variable(Tensor::row(&[-50.0, -50.0]));
        let z = reparameterize(&mut tape, mu, lv, Tensor::row(&[1.5, -0.3])).unwrap();
        let z = tape.value(z);
        assert!((z.get(0, 0) - 0.7).abs() < 1e-9 && (z.get(0, 1) + 2.0).abs() < 1e-9);
    }

    #[test]
    fn kl_weight_zero_leaves_reconstruction() {
        let mut m = tiny(LatentWiring::HiddenConcat);
        let hp = Hyperparams {
            kl_weight: 0.0,
            ..*m.hyperparams()
        };
        m.set_hyperparams(hp).unwrap();
        let t = tokens(&m, &[(0, 1), (1, 2)]);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let eps = Tensor::row(&[0.1, 0.2, -0.3]);
        let terms = m
            .loss_batch(&mut tape, &b, &[&t], &[&[-1.0, 0.0]], eps)
            .unwrap();
        assert_eq!(
            tape.value(terms.total).item(),
            tape.value(terms.reconstruction).item()
        );
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = tiny(LatentWiring::HiddenConcat);
        let mut params = m.params().to_vec();
        assert_eq!(
            CvaeModel::from_parts(*m.hyperparams(), *m.vocab(), 2, params.clone()).unwrap(),
            m
        );
        params[3] = Tensor::zeros(1, 1);
        assert!(CvaeModel::from_parts(*m.hyperparams(), *m.vocab(), 2, params).is_err());
    }
}
