use rand::seq::SliceRandom;
use rand::Rng;

use super::{mask_positions, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numeric::log_softmax_in_place;
use crate::rng::{stream, Purpose};
use crate::seq::{CleanSequence, MaskedSequence, TokenProbabilityMatrix};

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    tok: usize,
    pos: usize,
    w1: usize,
    b1: usize,
    wout: usize,
    bout: usize,
    total: usize,
}

impl Layout {
    fn new(len: usize, vocab: usize, hidden: usize) -> Self {
        let tok = 0;
        let pos = tok + (vocab + 1) * hidden;
        let w1 = pos + len * hidden;
        let b1 = w1 + hidden * 2 * hidden;
        let wout = b1 + hidden;
        let bout = wout + len * vocab * hidden;
        let total = bout + len * vocab;
        Self {
            tok,
            pos,
            w1,
            b1,
            wout,
            bout,
            total,
        }
    }
}

struct Activations {
    /// token + position embedding per position, `L × H`
    embed: Vec<f64>,
    /// mean of `embed` over positions, `H`
    context: Vec<f64>,
    /// `tanh` hidden layer, `L × H`
    hidden: Vec<f64>,
    /// raw output logits, `L × V`
    logits: Vec<f64>,
}

/// Small order-sensitive denoiser.
///
/// Per position: `e_ℓ = tok[z_ℓ] + pos[ℓ]` (masked positions use a learned
/// mask row of `tok`), `c = mean_ℓ e_ℓ`, `h_ℓ = tanh(W1·[e_ℓ; c] + b1)`,
/// `logits_ℓ = Wout_ℓ·h_ℓ + bout_ℓ`. The embedding width equals the hidden
/// width `H`. Parameters live in one flat vector so gradients and persistence
/// stay trivial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableDenoiser {
    len: usize,
    vocab: usize,
    hidden: usize,
    learning_rate: f64,
    params: Vec<f64>,
}

impl TrainableDenoiser {
    pub fn new(len: usize, vocab: usize, hidden: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        let layout = Self::check_shape(len, vocab, hidden)?;
        let mut rng = stream(Purpose::Init, seed, 0, 0);
        let emb_scale = 0.5;
        let w1_scale = 1.0 / (2.0 * hidden as f64).sqrt();
        let out_scale = 1.0 / (hidden as f64).sqrt();
        let mut params = vec![0.0; layout.total];
        for (i, p) in params.iter_mut().enumerate() {
            let scale = if i < layout.w1 {
                emb_scale
            } else if i < layout.b1 {
                w1_scale
            } else if i < layout.wout {
                0.0
            } else if i < layout.bout {
                out_scale
            } else {
                0.0
            };
            *p = scale * rng.random_range(-1.0..1.0);
        }
        Self::from_params(len, vocab, hidden, learning_rate, params)
    }

    pub fn from_params(len: usize, vocab: usize, hidden: usize, learning_rate: f64, params: Vec<f64>) -> Result<Self> {
        let layout = Self::check_shape(len, vocab, hidden)?;
        if params.len() != layout.total {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid learning rate {learning_rate}")));
        }
        Ok(Self {
            len,
            vocab,
            hidden,
            learning_rate,
            params,
        })
    }

    fn check_shape(len: usize, vocab: usize, hidden: usize) -> Result<Layout> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        if len == 0 || vocab == 0 {
            return Err(Error::InvalidConfig("L and V must be positive".into()));
        }
        Ok(Layout::new(len, vocab, hidden))
    }

    fn layout(&self) -> Layout {
        Layout::new(self.len, self.vocab, self.hidden)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Copy with parameter `i` replaced; used by finite-difference checks.
    pub fn with_param(&self, i: usize, value: f64) -> Self {
        let mut next = self.clone();
        next.params[i] = value;
        next
    }

    /// Mutable access to the output bias of `(pos, tok)`.
    pub fn output_bias_mut(&mut self, pos: usize, tok: usize) -> &mut f64 {
        let i = self.layout().bout + pos * self.vocab + tok;
        &mut self.params[i]
    }

    fn forward(&self, z: &MaskedSequence) -> Activations {
        let (l, v, h) = (self.len, self.vocab, self.hidden);
        let lay = self.layout();
        let p = &self.params;

        let mut embed = vec![0.0; l * h];
        for pos in 0..l {
            let row = z.get(pos).map_or(v, |t| t as usize);
            for j in 0..h {
                embed[pos * h + j] = p[lay.tok + row * h + j] + p[lay.pos + pos * h + j];
            }
        }
        let mut context = vec![0.0; h];
        for pos in 0..l {
            for j in 0..h {
                context[j] += embed[pos * h + j];
            }
        }
        for c in &mut context {
            *c /= l as f64;
        }

        let mut hidden = vec![0.0; l * h];
        let mut logits = vec![0.0; l * v];
        for pos in 0..l {
            let e = &embed[pos * h..(pos + 1) * h];
            for i in 0..h {
                let w = &p[lay.w1 + i * 2 * h..lay.w1 + (i + 1) * 2 * h];
                let mut u = p[lay.b1 + i];
                for j in 0..h {
                    u += w[j] * e[j] + w[h + j] * context[j];
                }
                hidden[pos * h + i] = u.tanh();
            }
            let hrow = &hidden[pos * h..(pos + 1) * h];
            for tok in 0..v {
                let w = &p[lay.wout + (pos * v + tok) * h..lay.wout + (pos * v + tok + 1) * h];
                let dot: f64 = w.iter().zip(hrow).map(|(a, b)| a * b).sum();
                logits[pos * v + tok] = dot + p[lay.bout + pos * v + tok];
            }
        }
        Activations {
            embed,
            context,
            hidden,
            logits,
        }
    }

    /// Loss `(L/n) Σ_{ℓ∈S} -log P_ℓ[x_ℓ]` for the explicit mask set `S` and its
    /// gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, x: &CleanSequence, masked: &[usize]) -> (f64, Vec<f64>) {
        let (l, v, h) = (self.len, self.vocab, self.hidden);
        let lay = self.layout();
        let p = &self.params;
        let z = mask_positions(x, v, masked);
        let act = self.forward(&z);
        let weight = NoiseSchedule::discrete_linear(l).weight(masked.len());

        let mut grad = vec![0.0; lay.total];
        let mut loss = 0.0;
        let mut g_embed = vec![0.0; l * h];
        let mut g_context = vec![0.0; h];

        for &pos in masked {
            let mut logp = act.logits[pos * v..(pos + 1) * v].to_vec();
            log_softmax_in_place(&mut logp);
            let target = x.tokens()[pos] as usize;
            loss -= weight * logp[target];

            let g_out: Vec<f64> = logp
                .iter()
                .enumerate()
                .map(|(tok, lp)| weight * (lp.exp() - if tok == target { 1.0 } else { 0.0 }))
                .collect();

            let hrow = &act.hidden[pos * h..(pos + 1) * h];
            let mut g_hidden = vec![0.0; h];
            for (tok, &go) in g_out.iter().enumerate() {
                let base = lay.wout + (pos * v + tok) * h;
                for j in 0..h {
                    grad[base + j] += go * hrow[j];
                    g_hidden[j] += go * p[base + j];
                }
                grad[lay.bout + pos * v + tok] += go;
            }

            let e = &act.embed[pos * h..(pos + 1) * h];
            for i in 0..h {
                let gu = g_hidden[i] * (1.0 - hrow[i] * hrow[i]);
                if gu == 0.0 {
                    continue;
                }
                grad[lay.b1 + i] += gu;
                let base = lay.w1 + i * 2 * h;
                for j in 0..h {
                    grad[base + j] += gu * e[j];
                    grad[base + h + j] += gu * act.context[j];
                    g_embed[pos * h + j] += gu * p[base + j];
                    g_context[j] += gu * p[base + h + j];
                }
            }
        }

        // the context is a mean, so every position receives g_context / L
        for pos in 0..l {
            let row = z.get(pos).map_or(v, |t| t as usize);
            for j in 0..h {
                let g = g_embed[pos * h + j] + g_context[j] / l as f64;
                grad[lay.tok + row * h + j] += g;
                grad[lay.pos + pos * h + j] += g;
            }
        }
        (loss, grad)
    }

    /// `steps` SGD updates on single-draw masked-diffusion losses, visiting
    /// the corpus in a fresh shuffled order every epoch.
    pub fn train(&self, corpus: &[CleanSequence], steps: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        let mut next = self.clone();
        next.learning_rate = learning_rate;
        if steps == 0 {
            return Ok(next);
        }
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for x in corpus {
            if x.len() != self.len {
                return Err(Error::LengthMismatch {
                    expected: self.len,
                    got: x.len(),
                });
            }
            CleanSequence::new(x.tokens().to_vec(), self.vocab)?;
        }
        let schedule = NoiseSchedule::discrete_linear(self.len);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for step in 0..steps {
            let epoch = step / corpus.len();
            let slot = step % corpus.len();
            if slot == 0 {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut stream(Purpose::TrainShuffle, seed, epoch as u64, 0));
            }
            let x = &corpus[order[slot]];
            let masked = schedule.draw(&mut stream(Purpose::TrainDraw, seed, step as u64, 0));
            let (_, grad) = next.loss_and_gradient(x, &masked);
            for (w, g) in next.params.iter_mut().zip(&grad) {
                *w -= learning_rate * g;
            }
        }
        Ok(next)
    }
}

impl Denoiser for TrainableDenoiser {
    fn seq_len(&self) -> usize {
        self.len
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn evaluate(&self, z: &MaskedSequence) -> TokenProbabilityMatrix {
        assert_eq!(z.len(), self.len, "state length does not match denoiser");
        let mut rows = self.forward(z).logits;
        for row in rows.chunks_mut(self.vocab) {
            log_softmax_in_place(row);
        }
        TokenProbabilityMatrix::from_log_rows(z, rows, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{elbo_loss_gradient, elbo_loss_mc};

    fn seq(t: &[u32], v: usize) -> CleanSequence {
        CleanSequence::new(t.to_vec(), v).unwrap()
    }

    #[test]
    fn zero_hidden_is_rejected() {
        assert!(matches!(
            TrainableDenoiser::new(2, 2, 0, 0.1, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn evaluate_applies_subs() {
        let d = TrainableDenoiser::new(3, 4, 5, 0.1, 1).unwrap();
        let z = MaskedSequence::from_ids(&[2, 4, 4], 4).unwrap();
        let p = d.evaluate(&z);
        p.check().unwrap();
        assert_eq!(p.row(0), vec![0.0, 0.0, 1.0, 0.0]);
        let full = MaskedSequence::from_ids(&[0, 1, 3], 4).unwrap();
        let p = d.evaluate(&full);
        assert_eq!(p.prob(2, 3), 1.0);
    }

    #[test]
    fn evaluate_is_bit_deterministic() {
        let d = TrainableDenoiser::new(4, 3, 6, 0.1, 9).unwrap();
        let z = MaskedSequence::from_ids(&[3, 1, 3, 0], 3).unwrap();
        assert_eq!(d.evaluate(&z), d.evaluate(&z));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = seq(&[0, 2, 1], 3);
        for init in 0..3 {
            let d = TrainableDenoiser::new(3, 3, 4, 0.1, init).unwrap();
            for seed in 0..4 {
                let g = elbo_loss_gradient(&d, &x, seed);
                for i in (0..d.num_params()).step_by(7) {
                    let h = 1e-5;
                    let w = d.params()[i];
                    let up = elbo_loss_mc(&d.with_param(i, w + h), &x, seed);
                    let dn = elbo_loss_mc(&d.with_param(i, w - h), &x, seed);
                    let fd = (up - dn) / (2.0 * h);
                    let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd}", g[i]);
                }
            }
        }
    }

    #[test]
    fn saturated_outputs_have_vanishing_gradient() {
        let x = seq(&[1, 0], 2);
        let mut d = TrainableDenoiser::new(2, 2, 3, 0.1, 0).unwrap();
        for (pos, &t) in x.tokens().iter().enumerate() {
            *d.output_bias_mut(pos, t as usize) = 60.0;
        }
        let g = elbo_loss_gradient(&d, &x, 3);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "norm {norm}");
        assert!(elbo_loss_mc(&d, &x, 3) < 1e-20);
    }

    #[test]
    fn train_zero_steps_and_determinism() {
        let corpus = [seq(&[0, 0], 2), seq(&[1, 1], 2)];
        let d = TrainableDenoiser::new(2, 2, 4, 0.1, 0).unwrap();
        assert_eq!(d.train(&corpus, 0, 0.1, 5).unwrap().params(), d.params());
        let a = d.train(&corpus, 50, 0.1, 5).unwrap();
        let b = d.train(&corpus, 50, 0.1, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), d.params());
    }

    #[test]
    fn train_rejects_mismatched_corpus() {
        let d = TrainableDenoiser::new(2, 2, 4, 0.1, 0).unwrap();
        assert!(d.train(&[seq(&[0, 0, 1], 2)], 3, 0.1, 0).is_err());
        assert_eq!(d.train(&[], 3, 0.1, 0), Err(Error::EmptyCorpus));
    }
}
