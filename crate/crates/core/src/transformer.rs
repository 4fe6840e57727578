//! Pre-norm transformer blocks shared by the autoregressive and parallel
//! token models, with optional low-rank adapters on the attention projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Linear, Norm};
use crate::numeric::{init, Bound, Graph, ParamId, ParamStore, Segment, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_emb: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub dropout: f32,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_emb: 128,
            ffn: 512,
            max_positions: 256,
            dropout: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_emb % self.heads != 0 {
            return Err(Error::invalid(format!("d_emb {} not divisible by {} heads", self.d_emb, self.heads)));
        }
        if self.layers == 0 || self.ffn == 0 || self.max_positions == 0 {
            return Err(Error::invalid("transformer sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Sinusoidal encodings for arbitrary position indices: `[len, d]`.
pub fn sinusoidal(positions: &[usize], d: usize) -> Tensor {
    let mut data = vec![0.0f32; positions.len() * d];
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..d / 2 {
            let freq = (-(2.0 * i as f64 / d as f64) * 10000f64.ln()).exp();
            let a = pos as f64 * freq;
            data[r * d + 2 * i] = a.sin() as f32;
            data[r * d + 2 * i + 1] = a.cos() as f32;
        }
    }
    Tensor::new(vec![positions.len(), d], data).expect("shape matches data")
}

/// Random keep-mask scaled by `1 / (1 - rate)`.
pub fn dropout<R: Rng>(g: &Graph, x: Var, rate: f32, rng: &mut R) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let mask: Vec<f32> = (0..n).map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep }).collect();
    g.mul(x, g.constant(Tensor::new(shape, mask)?))
}

/// Rank-`r` update `scale * A B` for one `[d, d]` projection.
#[derive(Clone, Copy, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
}

/// Adapters for the four attention projections of every block.
#[derive(Clone, Debug)]
pub struct LoraAdapters {
    pub rank: usize,
    pub alpha: f32,
    /// `[block][q, k, v, o]`
    pub pairs: Vec<[LoraPair; 4]>,
}

impl LoraAdapters {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// Adds adapters for `blocks` to `store`; `B` starts at zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        blocks: &[Block],
        rank: usize,
        alpha: f32,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be positive"));
        }
        let mut pairs = Vec::new();
        for (l, blk) in blocks.iter().enumerate() {
            let d = blk.d_emb;
            if rank > d {
                return Err(Error::invalid(format!("LoRA rank {rank} exceeds width {d}")));
            }
            let mk = |store: &mut ParamStore, rng: &mut R, p: &str| LoraPair {
                a: store.add(
                    format!("{name}.{l}.{p}.a"),
                    init::normal_tensor(rng, &[d, rank], 1.0 / (d as f32).sqrt()),
                ),
                b: store.add(format!("{name}.{l}.{p}.b"), Tensor::zeros(&[rank, d])),
            };
            pairs.push([mk(store, rng, "q"), mk(store, rng, "k"), mk(store, rng, "v"), mk(store, rng, "o")]);
        }
        Ok(Self { rank, alpha, pairs })
    }

    /// Checks that every adapter matches the rank and block widths.
    pub fn check(&self, store: &ParamStore, blocks: &[Block]) -> Result<()> {
        if self.pairs.len() != blocks.len() {
            return Err(Error::shape("lora", format!("{} adapter sets for {} blocks", self.pairs.len(), blocks.len())));
        }
        for (set, blk) in self.pairs.iter().zip(blocks) {
            for pair in set {
                let a = store.get(pair.a).shape();
                let b = store.get(pair.b).shape();
                if a != [blk.d_emb, self.rank] || b != [self.rank, blk.d_emb] {
                    return Err(Error::shape(
                        "lora",
                        format!("A {a:?} and B {b:?} do not match rank {} width {}", self.rank, blk.d_emb),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Folds `scale * A B` into the base projection weights.
    pub fn merge_into(&self, store: &mut ParamStore, blocks: &[Block]) -> Result<()> {
        self.check(store, blocks)?;
        let s = self.scale();
        for (set, blk) in self.pairs.iter().zip(blocks) {
            let targets = [blk.q.w, blk.k.w, blk.v.w, blk.o.w];
            for (pair, w) in set.iter().zip(targets) {
                let a = store.get(pair.a).clone();
                let b = store.get(pair.b).clone();
                let d = blk.d_emb;
                let r = self.rank;
                let wt = store.get_mut(w).data_mut();
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0f32;
                        for k in 0..r {
                            acc += a.data()[i * r + k] * b.data()[k * d + j];
                        }
                        wt[i * d + j] += s * acc;
                    }
                }
            }
        }
        Ok(())
    }
}

/// One pre-norm block: attention then feed-forward, both residual.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub d_emb: usize,
    pub heads: usize,
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.d_emb;
        Self {
            d_emb: d,
            heads: cfg.heads,
            ln1: Norm::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            ln2: Norm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.ffn, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn, d, rng),
        }
    }

    fn project(g: &Graph, p: &Bound, lin: &Linear, x: Var, lora: Option<(LoraPair, f32)>) -> Result<Var> {
        let y = lin.forward(g, p, x)?;
        match lora {
            None => Ok(y),
            Some((pair, s)) => {
                let low = g.matmul(g.matmul(x, p.var(pair.a))?, p.var(pair.b))?;
                g.add(y, g.scale(low, s))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        g: &Graph,
        p: &Bound,
        x: Var,
        segments: &[Segment],
        causal: bool,
        lora: Option<(&[LoraPair; 4], f32)>,
        drop: Option<(f32, &mut R)>,
    ) -> Result<Var> {
        let pick = |i: usize| lora.map(|(set, s)| (set[i], s));
        let h = self.ln1.forward(g, p, x)?;
        let q = Self::project(g, p, &self.q, h, pick(0))?;
        let k = Self::project(g, p, &self.k, h, pick(1))?;
        let v = Self::project(g, p, &self.v, h, pick(2))?;
        let att = g.attention(q, k, v, self.heads, segments, causal)?;
        let mut att = Self::project(g, p, &self.o, att, pick(3))?;
        let mut drop = drop;
        if let Some((rate, rng)) = drop.as_mut() {
            att = dropout(g, att, *rate, *rng)?;
        }
        let x = g.add(x, att)?;
        let h = self.ln2.forward(g, p, x)?;
        let mut f = self.ff2.forward(g, p, g.gelu(self.ff1.forward(g, p, h)?))?;
        if let Some((rate, rng)) = drop.as_mut() {
            f = dropout(g, f, *rate, *rng)?;
        }
        g.add(x, f)
    }
}

/// Runs every block in order.
#[allow(clippy::too_many_arguments)]
pub fn run_blocks<R: Rng>(
    g: &Graph,
    p: &Bound,
    blocks: &[Block],
    mut x: Var,
    segments: &[Segment],
    causal: bool,
    lora: Option<&LoraAdapters>,
    mut drop: Option<(f32, &mut R)>,
) -> Result<Var> {
    for (l, blk) in blocks.iter().enumerate() {
        let ad = lora.map(|a| (&a.pairs[l], a.scale()));
        let d = drop.as_mut().map(|(r, rng)| (*r, &mut **rng));
        x = blk.forward(g, p, x, segments, causal, ad, d)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_rows_have_fixed_norm() {
        let t = sinusoidal(&[0, 3, 250], 128);
        for r in 0..3 {
            let n: f32 = t.row(r).iter().map(|v| v * v).sum();
            assert!((n - 64.0).abs() < 1e-3);
        }
        assert_eq!(t.row(0)[0], 0.0);
        assert_eq!(t.row(0)[1], 1.0);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let c = TransformerConfig { heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        assert!(TransformerConfig::default().validate().is_ok());
    }

    #[test]
    fn dropout_keeps_expectation() {
        use rand::SeedableRng;
        let g = Graph::new();
        let x = g.constant(Tensor::filled(&[100, 100], 1.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = dropout(&g, x, 0.1, &mut rng).unwrap();
        let mean = g.value(y).data().iter().sum::<f32>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }
}
