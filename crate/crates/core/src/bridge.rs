//! Multi-source personalized bridge.
//!
//! For each source domain `d` a user's behaviour sequence is pooled by an
//! attention MLP `psi` into `q`, a meta-network `eta_d` maps `q` to a `k x k`
//! matrix `W`, and the transformed embedding is `e = tanh(W u_d)`. The target
//! embedding is the weighted sum of the `e_d` under weights supplied by the
//! policy; those weights are constants as far as the bridge is concerned.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::mf::DomainEmbeddings;
use crate::numerics::{dot, softmax, Activation, Adam, BoundMlp, Gradients, Head, Mlp, Parameterized, Tape, Tensor2, Var};

pub const BRIDGE_MAGIC: &str = "MARCO-BR v1";

/// Tolerance on the simplex check in [`integrate_target`].
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub k: usize,
    pub hidden: usize,
    /// One meta-network for all source domains.
    pub shared: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeParams {
    k: usize,
    n_sources: usize,
    pub psi: Mlp,
    eta: Vec<Mlp>,
}

impl BridgeParams {
    pub fn new<R: Rng + ?Sized>(cfg: &BridgeConfig, n_sources: usize, rng: &mut R) -> Result<Self> {
        if cfg.k == 0 || cfg.hidden == 0 || n_sources == 0 {
            return Err(Error::Config(format!(
                "bridge needs k, hidden and source count > 0 (got {}, {}, {n_sources})",
                cfg.k, cfg.hidden
            )));
        }
        let k = cfg.k;
        let psi = Mlp::new(&[k, cfg.hidden, 1], Activation::Tanh, Activation::Identity, Head::Linear, rng)?;
        let n_eta = if cfg.shared { 1 } else { n_sources };
        let eta = (0..n_eta)
            .map(|_| Mlp::new(&[k, cfg.hidden, k * k], Activation::Tanh, Activation::Identity, Head::Linear, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { k, n_sources, psi, eta })
    }

    pub fn from_parts(k: usize, n_sources: usize, psi: Mlp, eta: Vec<Mlp>) -> Result<Self> {
        if eta.len() != 1 && eta.len() != n_sources {
            return Err(Error::Shape(format!("{} meta-networks for {n_sources} sources", eta.len())));
        }
        if psi.input_dim() != k || psi.output_dim() != 1 {
            return Err(Error::Shape("attention network must map k -> 1".into()));
        }
        if eta.iter().any(|m| m.input_dim() != k || m.output_dim() != k * k) {
            return Err(Error::Shape("meta-networks must map k -> k*k".into()));
        }
        Ok(Self { k, n_sources, psi, eta })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn is_shared(&self) -> bool {
        self.eta.len() == 1 && self.n_sources > 1
    }

    /// Meta-network used for source slot `d`.
    pub fn eta(&self, d: usize) -> &Mlp {
        &self.eta[if self.eta.len() == 1 { 0 } else { d }]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBridge {
        BoundBridge {
            k: self.k,
            psi: self.psi.bind(tape),
            eta: self.eta.iter().map(|m| m.bind(tape)).collect(),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundBridge {
        BoundBridge {
            k: self.k,
            psi: self.psi.bind_frozen(tape),
            eta: self.eta.iter().map(|m| m.bind_frozen(tape)).collect(),
        }
    }

    /// Transformed embeddings `e_d` (one `B x k` matrix per source slot).
    pub fn transform(&self, batches: &[DomainBatch]) -> Result<Vec<Tensor2>> {
        self.check_batches(batches)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let fwd = bound.forward(&mut tape, batches);
        fwd.e
            .iter()
            .map(|&v| {
                let t = tape.value(v).clone();
                t.ensure_finite("transformed embedding")?;
                Ok(t)
            })
            .collect()
    }

    pub fn check_batches(&self, batches: &[DomainBatch]) -> Result<()> {
        if batches.len() != self.n_sources {
            return Err(Error::Shape(format!(
                "{} source batches for {} sources",
                batches.len(),
                self.n_sources
            )));
        }
        let b = batches[0].users.rows();
        for db in batches {
            if db.users.rows() != b || db.users.cols() != self.k || db.items.cols() != self.k {
                return Err(Error::Shape("source batches disagree on size or k".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        checkpoint::write(
            path,
            BRIDGE_MAGIC,
            &BridgeFile {
                config_hash: config_hash.to_string(),
                params: self.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let f: BridgeFile = checkpoint::read(path, BRIDGE_MAGIC)?;
        Ok((f.params, f.config_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct BridgeFile {
    config_hash: String,
    params: BridgeParams,
}

impl Parameterized for BridgeParams {
    fn params(&self) -> Vec<&Tensor2> {
        let mut out = self.psi.params();
        for m in &self.eta {
            out.extend(m.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = self.psi.params_mut();
        for m in &mut self.eta {
            out.extend(m.params_mut());
        }
        out
    }
}

/// Inputs for one source slot over a batch of users.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    /// Pretrained source user embeddings, `B x k`.
    pub users: Tensor2,
    /// Every item embedding of every sequence, stacked.
    pub items: Tensor2,
    /// Rows of `items` belonging to each user.
    pub segments: Vec<Range<usize>>,
    /// Users whose sequence was empty and fell back to their own embedding.
    pub fallbacks: usize,
}

impl DomainBatch {
    /// Gathers embeddings for domain-local users and their item sequences.
    /// An empty sequence is replaced by the user's own embedding, which makes
    /// the pooled vector equal to that embedding.
    pub fn gather(emb: &DomainEmbeddings, users: &[u32], seqs: &[Vec<u32>]) -> Result<Self> {
        if users.len() != seqs.len() {
            return Err(Error::Shape("one sequence per user required".into()));
        }
        let k = emb.k;
        let mut u = Vec::with_capacity(users.len() * k);
        let mut items = Vec::new();
        let mut segments = Vec::with_capacity(users.len());
        let mut fallbacks = 0;
        for (&user, seq) in users.iter().zip(seqs) {
            let urow = emb.user(user)?;
            u.extend_from_slice(urow);
            let start = items.len() / k;
            if seq.is_empty() {
                items.extend_from_slice(urow);
                fallbacks += 1;
            } else {
                for &i in seq {
                    items.extend_from_slice(emb.item(i)?);
                }
            }
            segments.push(start..items.len() / k);
        }
        let n_items = items.len() / k;
        Ok(Self {
            users: Tensor2::from_vec(users.len(), k, u)?,
            items: Tensor2::from_vec(n_items, k, items)?,
            segments,
            fallbacks,
        })
    }

    pub fn len(&self) -> usize {
        self.users.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.users.rows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct BoundBridge {
    k: usize,
    psi: BoundMlp,
    eta: Vec<BoundMlp>,
}

/// Tape handles produced by one bridge forward pass, one per source slot.
#[derive(Clone, Debug)]
pub struct BridgeVars {
    pub alpha: Vec<Var>,
    pub q: Vec<Var>,
    pub w: Vec<Var>,
    pub e: Vec<Var>,
}

impl BoundBridge {
    pub fn forward(&self, tape: &mut Tape, batches: &[DomainBatch]) -> BridgeVars {
        let scale = 1.0 / (self.k as f64).sqrt();
        let mut out = BridgeVars {
            alpha: Vec::new(),
            q: Vec::new(),
            w: Vec::new(),
            e: Vec::new(),
        };
        for (d, db) in batches.iter().enumerate() {
            let items = tape.constant(db.items.clone());
            let logits = self.psi.forward(tape, items);
            let alpha = tape.segment_softmax(logits, &db.segments);
            let q = tape.segment_weighted_sum(alpha, items, &db.segments);
            let eta = &self.eta[if self.eta.len() == 1 { 0 } else { d }];
            let w = eta.forward(tape, q);
            let w = tape.scale(w, scale);
            let u = tape.constant(db.users.clone());
            let wu = tape.batched_matvec(w, u);
            let e = tape.tanh(wu);
            out.alpha.push(alpha);
            out.q.push(q);
            out.w.push(w);
            out.e.push(e);
        }
        out
    }

    /// Gradients in [`Parameterized::params`] order of [`BridgeParams`].
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor2> {
        let mut out = self.psi.grads(grads);
        for m in &self.eta {
            out.extend(m.grads(grads));
        }
        out
    }
}

/// `u_t = sum_d p_d * e_d` on the tape, with `weights` (`B x N`) constant.
pub fn integrate_on_tape(tape: &mut Tape, e: &[Var], weights: &Tensor2) -> Var {
    let p = tape.constant(weights.clone());
    let mut acc: Option<Var> = None;
    for (d, &ed) in e.iter().enumerate() {
        let pd = tape.slice_cols(p, d, d + 1);
        let term = tape.mul_col(ed, pd);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    acc.expect("at least one source")
}

/// Mean squared rating error of `u_t . v_t` against `ratings` (`B x 1`).
pub fn rating_loss_on_tape(tape: &mut Tape, ut: Var, vt: &Tensor2, ratings: &Tensor2) -> Var {
    let v = tape.constant(vt.clone());
    let r = tape.constant(ratings.clone());
    let pred = tape.row_dot(ut, v);
    let err = tape.sub(pred, r);
    let sq = tape.square(err);
    tape.mean(sq)
}

/// Attention weights of `psi` over a sequence.
pub fn attention_weights(psi: &Mlp, items: &[Vec<f64>]) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Encoder("empty behaviour sequence".into()));
    }
    let logits = psi.forward(&Tensor2::from_rows(items)?)?;
    Ok(softmax(logits.data()))
}

/// Attention-pooled sequence embedding `q`.
pub fn encode_behavior(psi: &Mlp, items: &[Vec<f64>]) -> Result<Vec<f64>> {
    let alpha = attention_weights(psi, items)?;
    let k = items[0].len();
    let mut q = vec![0.0; k];
    for (a, v) in alpha.iter().zip(items) {
        for (o, x) in q.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    Ok(q)
}

/// Bridge matrix `W` (`k x k`, from the meta-network) and `e = tanh(W u)`.
pub fn personalized_bridge(eta: &Mlp, q: &[f64], u: &[f64]) -> Result<(Tensor2, Vec<f64>)> {
    let k = u.len();
    if q.len() != k || eta.input_dim() != k || eta.output_dim() != k * k {
        return Err(Error::Shape(format!("bridge with k = {k} got q of length {}", q.len())));
    }
    let flat = eta.forward(&Tensor2::row_vector(q.to_vec()))?;
    let w = flat.scaled(1.0 / (k as f64).sqrt()).reshape(k, k)?;
    let e: Vec<f64> = (0..k).map(|i| dot(w.row(i), u).tanh()).collect();
    w.ensure_finite("bridge matrix")?;
    if e.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("transformed embedding".into()));
    }
    Ok((w, e))
}

/// Weighted sum of transformed embeddings; `weights` must lie on the simplex.
pub fn integrate_target(es: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&p| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&p)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!("weights {weights:?} are not on the simplex")));
    }
    integrate_target_unchecked(es, weights)
}

/// [`integrate_target`] without the simplex check.
pub fn integrate_target_unchecked(es: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if es.is_empty() || es.len() != weights.len() {
        return Err(Error::Contract(format!("{} embeddings for {} weights", es.len(), weights.len())));
    }
    let k = es[0].len();
    if es.iter().any(|e| e.len() != k) {
        return Err(Error::Shape("embeddings differ in length".into()));
    }
    let mut u = vec![0.0; k];
    for (e, &p) in es.iter().zip(weights) {
        for (o, x) in u.iter_mut().zip(e) {
            *o += p * x;
        }
    }
    Ok(u)
}

/// Mean of `(u_i . v_i - r_i)^2`.
pub fn rating_loss(ut: &[Vec<f64>], vt: &[Vec<f64>], ratings: &[f64]) -> Result<f64> {
    if ut.is_empty() || ut.len() != vt.len() || ut.len() != ratings.len() {
        return Err(Error::Contract(format!(
            "rating loss over {} users, {} items, {} ratings",
            ut.len(),
            vt.len(),
            ratings.len()
        )));
    }
    let total: f64 = ut
        .iter()
        .zip(vt)
        .zip(ratings)
        .map(|((u, v), r)| (dot(u, v) - r).powi(2))
        .sum();
    Ok(total / ut.len() as f64)
}

/// One Adam step on the rating loss with the integration weights held fixed.
/// Returns the pre-step loss.
pub fn bridge_step(
    params: &mut BridgeParams,
    opt: &mut Adam,
    batches: &[DomainBatch],
    weights: &Tensor2,
    vt: &Tensor2,
    ratings: &Tensor2,
    max_grad_norm: f64,
) -> Result<f64> {
    params.check_batches(batches)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = bound.forward(&mut tape, batches);
    let ut = integrate_on_tape(&mut tape, &fwd.e, weights);
    let loss = rating_loss_on_tape(&mut tape, ut, vt, ratings);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("bridge rating loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    let mut g = bound.grads(&grads);
    crate::numerics::clip_global_norm(&mut g, max_grad_norm);
    opt.step(params.params_mut(), &g)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn params(k: usize, n: usize, shared: bool, seed: u64) -> BridgeParams {
        BridgeParams::new(&BridgeConfig { k, hidden: 6, shared }, n, &mut rng::stream(seed, "t", 0)).unwrap()
    }

    #[test]
    fn identical_items_pool_to_that_item() {
        let p = params(3, 1, false, 1);
        let v = vec![0.3, -0.2, 0.9];
        let q = encode_behavior(&p.psi, &[v.clone(), v.clone(), v.clone()]).unwrap();
        for (a, b) in q.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(encode_behavior(&p.psi, &[]), Err(Error::Encoder(_))));
    }

    #[test]
    fn zero_attention_gives_mean() {
        let mut p = params(2, 1, false, 1);
        for t in p.psi.params_mut() {
            t.scale_in_place(0.0);
        }
        let q = encode_behavior(&p.psi, &[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(q, vec![0.5, 1.5]);
    }

    #[test]
    fn identity_and_zero_bridges() {
        let k = 3;
        let mut p = params(k, 1, false, 2);
        let eta = &mut p.eta[0];
        for t in eta.params_mut() {
            t.scale_in_place(0.0);
        }
        let u = vec![0.5, -1.0, 2.0];
        let (_, e) = personalized_bridge(eta, &[0.1, 0.2, 0.3], &u).unwrap();
        assert_eq!(e, vec![0.0; 3]);
        // Output bias = sqrt(k) * I so the scaled matrix is the identity.
        let last = eta.layers_mut().last_mut().unwrap();
        for i in 0..k {
            last.bias.set(0, i * k + i, (k as f64).sqrt());
        }
        let (w, e) = personalized_bridge(eta, &[0.1, 0.2, 0.3], &u).unwrap();
        assert!(w.max_abs_diff(&Tensor2::identity(k)) < 1e-12);
        for (a, b) in e.iter().zip(&u) {
            assert!((a - b.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn integration_checks_simplex() {
        let es = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(integrate_target(&es, &[1.0, 0.0]).unwrap(), es[0]);
        assert!(matches!(integrate_target(&es, &[0.7, 0.7]), Err(Error::Contract(_))));
        assert_eq!(integrate_target_unchecked(&es, &[2.0, 0.0]).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn rating_loss_examples() {
        assert_eq!(rating_loss(&[vec![3.0]], &[vec![1.0]], &[5.0]).unwrap(), 4.0);
        assert_eq!(rating_loss(&[vec![1.0, 1.0]], &[vec![2.0, 0.5]], &[2.5]).unwrap(), 0.0);
        assert!(matches!(rating_loss(&[vec![1.0]], &[], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_bridge_uses_one_meta_network() {
        let p = params(3, 3, true, 4);
        assert!(p.is_shared());
        assert_eq!(p.eta(0), p.eta(2));
        let q = vec![0.2, -0.4, 0.1];
        let u = vec![1.0, 0.0, -1.0];
        let a = personalized_bridge(p.eta(0), &q, &u).unwrap();
        let b = personalized_bridge(p.eta(2), &q, &u).unwrap();
        assert_eq!(a.0.data(), b.0.data());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = params(3, 2, false, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        p.save(&path, "h").unwrap();
        assert_eq!(BridgeParams::load(&path).unwrap(), (p, "h".to_string()));
    }
}
