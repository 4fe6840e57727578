//! Residual vector quantization with EMA-trained codebooks.
//!
//! Entry 0 of every codebook is held at the zero vector, so each layer can
//! always leave its residual unchanged and residual norms never grow.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::codec::LatentFrames;
use crate::numeric::Tensor;
use crate::{Error, Result};

/// Per-layer codebook index sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcousticTokens {
    pub sample_rate: u32,
    pub hop: usize,
    pub layers: Vec<Vec<usize>>,
}

impl AcousticTokens {
    pub fn new(sample_rate: u32, hop: usize, layers: Vec<Vec<usize>>) -> Result<Self> {
        let t = Self {
            sample_rate,
            hop,
            layers,
        };
        t.validate(None)?;
        Ok(t)
    }

    pub fn frames(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Equal layer lengths and, when `k` is given, every index below it.
    pub fn validate(&self, k: Option<usize>) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("token set has no layers"));
        }
        let n = self.layers[0].len();
        if self.layers.iter().any(|l| l.len() != n) {
            return Err(Error::shape("tokens", "layers differ in length"));
        }
        if let Some(k) = k {
            for l in &self.layers {
                if let Some(&bad) = l.iter().find(|&&i| i >= k) {
                    return Err(Error::OutOfRange {
                        what: "codebook index",
                        index: bad,
                        limit: k,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate(None)?;
        Ok(t)
    }
}

/// `Q` codebooks of `K x D` entries with EMA statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    k: usize,
    dim: usize,
    entries: Vec<Vec<f32>>,
    usage: Vec<Vec<f32>>,
    sums: Vec<Vec<f32>>,
}

/// Output of [`rvq_quantize`].
#[derive(Clone, Debug)]
pub struct Quantized {
    pub tokens: AcousticTokens,
    pub quantized: LatentFrames,
    /// Mean L2 norm of the residual left after each layer.
    pub residual_norms: Vec<f32>,
    /// Per-frame residual norms after each layer, `[layer][frame]`.
    pub frame_residuals: Vec<Vec<f32>>,
    /// Residual each layer was asked to quantize, `[layer][frame*dim]`.
    pub layer_inputs: Vec<Vec<f32>>,
}

impl CodebookSet {
    /// Codebooks from explicit `[K x D]` entry matrices. Entry 0 is not forced
    /// to zero here; the trainer pins it.
    pub fn from_entries(entries: Vec<Tensor>) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::invalid("no codebooks"))?;
        let (k, dim) = first.dims2()?;
        if k == 0 || dim == 0 {
            return Err(Error::invalid("empty codebook"));
        }
        let mut out = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.shape() != [k, dim] {
                return Err(Error::shape("codebooks", format!("{:?} vs [{k}, {dim}]", e.shape())));
            }
            if !e.all_finite() {
                return Err(Error::NonFinite("codebook"));
            }
            out.push(e.data().to_vec());
        }
        let q = out.len();
        Ok(Self {
            k,
            dim,
            sums: out.clone(),
            entries: out,
            usage: vec![vec![1.0; k]; q],
        })
    }

    /// Small random entries with entry 0 at zero.
    pub fn random<R: Rng>(rng: &mut R, q: usize, k: usize, dim: usize, scale: f32) -> Self {
        let entries = (0..q)
            .map(|_| {
                let mut e: Vec<f32> = (0..k * dim).map(|_| rng.gen_range(-scale..scale)).collect();
                e[..dim].iter_mut().for_each(|v| *v = 0.0);
                Tensor::new(vec![k, dim], e).expect("shape")
            })
            .collect();
        Self::from_entries(entries).expect("valid random codebooks")
    }

    pub fn layers(&self) -> usize {
        self.entries.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, layer: usize, idx: usize) -> &[f32] {
        &self.entries[layer][idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn usage(&self, layer: usize) -> &[f32] {
        &self.usage[layer]
    }

    pub fn entries_tensor(&self, layer: usize) -> Tensor {
        Tensor::new(vec![self.k, self.dim], self.entries[layer].clone()).expect("shape")
    }

    /// Index of the nearest entry by squared distance, lowest index on ties.
    pub fn nearest(&self, layer: usize, x: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for i in 0..self.k {
            let e = self.entry(layer, i);
            let d: f32 = x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Replace `layer` with k-means centroids of `data` (rows of `dim`),
    /// keeping entry 0 at zero. Deterministic given `rng`.
    pub fn kmeans_init<R: Rng>(&mut self, layer: usize, data: &[f32], iters: usize, rng: &mut R) {
        let n = data.len() / self.dim;
        if n == 0 {
            return;
        }
        let d = self.dim;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut cents = vec![0.0; self.k * d];
        for c in 1..self.k {
            let src = order[(c - 1) % n];
            cents[c * d..(c + 1) * d].copy_from_slice(&data[src * d..(src + 1) * d]);
        }
        self.entries[layer] = cents;
        for _ in 0..iters {
            let mut sums = vec![0.0f64; self.k * d];
            let mut counts = vec![0usize; self.k];
            for r in 0..n {
                let x = &data[r * d..(r + 1) * d];
                let (i, _) = self.nearest(layer, x);
                counts[i] += 1;
                for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(x) {
                    *s += *v as f64;
                }
            }
            for c in 1..self.k {
                if counts[c] == 0 {
                    let src = order[rng.gen_range(0..n)];
                    self.entries[layer][c * d..(c + 1) * d].copy_from_slice(&data[src * d..(src + 1) * d]);
                } else {
                    for j in 0..d {
                        self.entries[layer][c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
                    }
                }
            }
        }
        self.usage[layer] = vec![1.0; self.k];
        self.sums[layer] = self.entries[layer].clone();
    }

    /// One EMA step from batch assignments: `usage <- decay*usage + (1-decay)*n_k`,
    /// `sum <- decay*sum + (1-decay)*sum_x`, entry = sum / usage (Laplace smoothed).
    pub fn ema_update(&mut self, layer: usize, inputs: &[f32], assign: &[usize], decay: f32) {
        let d = self.dim;
        let mut counts = vec![0.0f32; self.k];
        let mut sums = vec![0.0f32; self.k * d];
        for (r, &i) in assign.iter().enumerate() {
            counts[i] += 1.0;
            for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(&inputs[r * d..(r + 1) * d]) {
                *s += v;
            }
        }
        let usage = &mut self.usage[layer];
        for (u, c) in usage.iter_mut().zip(&counts) {
            *u = decay * *u + (1.0 - decay) * c;
        }
        for (m, s) in self.sums[layer].iter_mut().zip(&sums) {
            *m = decay * *m + (1.0 - decay) * s;
        }
        let total: f32 = usage.iter().sum();
        let eps = 1e-5;
        let kf = self.k as f32;
        for c in 1..self.k {
            let smoothed = (usage[c] + eps) / (total + kf * eps) * total;
            for j in 0..d {
                self.entries[layer][c * d + j] = self.sums[layer][c * d + j] / smoothed;
            }
        }
        self.entries[layer][..d].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Reseed entries whose epoch assignment count is below `min_count` from
    /// random rows of `pool`. Returns how many were reseeded.
    pub fn reseed_dead<R: Rng>(
        &mut self,
        layer: usize,
        epoch_counts: &[usize],
        min_count: usize,
        pool: &[f32],
        rng: &mut R,
    ) -> usize {
        let d = self.dim;
        let n = pool.len() / d;
        if n == 0 {
            return 0;
        }
        let mut reseeded = 0;
        for c in 1..self.k {
            if epoch_counts[c] < min_count {
                let src = rng.gen_range(0..n);
                let row = &pool[src * d..(src + 1) * d];
                self.entries[layer][c * d..(c + 1) * d].copy_from_slice(row);
                self.usage[layer][c] = 1.0;
                self.sums[layer][c * d..(c + 1) * d].copy_from_slice(row);
                reseeded += 1;
            }
        }
        reseeded
    }

    fn dist(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
    }

    /// Smallest distance between two distinct entries of `layer`.
    pub fn separation(&self, layer: usize) -> f32 {
        let mut sep = f32::INFINITY;
        for i in 0..self.k {
            for j in 0..i {
                let d = Self::dist(self.entry(layer, i), self.entry(layer, j));
                if d > 0.0 {
                    sep = sep.min(d);
                }
            }
        }
        sep
    }

    /// Largest entry norm of `layer`.
    pub fn max_norm(&self, layer: usize) -> f32 {
        (0..self.k)
            .map(|i| self.entry(layer, i).iter().map(|v| v * v).sum::<f32>().sqrt())
            .fold(0.0, f32::max)
    }

    /// Keeps the codebooks nested: layer-0 entries closer than `delta` are
    /// merged into the lower index, and the deeper layers share a norm budget
    /// below half the layer-0 separation. Under this condition every token
    /// sequence decodes to a point that re-quantizes to the same tokens.
    pub fn enforce_nesting(&mut self, delta: f32) {
        let d = self.dim;
        for i in 1..self.k {
            for j in 0..i {
                let dist = Self::dist(self.entry(0, i), self.entry(0, j));
                if dist > 0.0 && dist < delta {
                    let src = self.entries[0][j * d..(j + 1) * d].to_vec();
                    self.entries[0][i * d..(i + 1) * d].copy_from_slice(&src);
                    self.sums[0][i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    self.usage[0][i] = 0.0;
                    break;
                }
            }
        }
        if self.layers() < 2 {
            return;
        }
        let sep = self.separation(0);
        if !sep.is_finite() {
            return;
        }
        let budget = 0.49 * sep / (self.layers() - 1) as f32;
        for q in 1..self.layers() {
            for i in 0..self.k {
                let n = self.entry(q, i).iter().map(|v| v * v).sum::<f32>().sqrt();
                if n > budget {
                    let f = budget / n;
                    self.entries[q][i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= f);
                    self.sums[q][i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= f);
                }
            }
        }
    }

    /// Whether the deeper layers fit inside half the layer-0 separation.
    pub fn is_nested(&self) -> bool {
        let deeper: f32 = (1..self.layers()).map(|q| self.max_norm(q)).sum();
        self.layers() < 2 || deeper < 0.5 * self.separation(0)
    }

    /// Checkpoint records: `rvq.{q}.entries`, `rvq.{q}.usage`, `rvq.{q}.sums`.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for q in 0..self.layers() {
            out.push((format!("rvq.{q}.entries"), self.entries_tensor(q)));
            out.push((
                format!("rvq.{q}.usage"),
                Tensor::new(vec![self.k], self.usage[q].clone()).expect("shape"),
            ));
            out.push((
                format!("rvq.{q}.sums"),
                Tensor::new(vec![self.k, self.dim], self.sums[q].clone()).expect("shape"),
            ));
        }
        out
    }

    pub fn from_named(named: &[(String, Tensor)]) -> Result<Self> {
        let find = |n: &str| named.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone());
        let mut entries = Vec::new();
        while let Some(t) = find(&format!("rvq.{}.entries", entries.len())) {
            entries.push(t);
        }
        let mut cb = Self::from_entries(entries)?;
        for q in 0..cb.layers() {
            if let Some(u) = find(&format!("rvq.{q}.usage")) {
                if u.len() != cb.k {
                    return Err(Error::Format(format!("rvq.{q}.usage length")));
                }
                cb.usage[q] = u.into_data();
            }
            if let Some(s) = find(&format!("rvq.{q}.sums")) {
                if s.len() != cb.k * cb.dim {
                    return Err(Error::Format(format!("rvq.{q}.sums length")));
                }
                cb.sums[q] = s.into_data();
            }
        }
        Ok(cb)
    }
}

/// Greedy residual quantization: layer `q` picks the entry nearest to the
/// residual left by layers `< q`.
pub fn rvq_quantize(z: &LatentFrames, cb: &CodebookSet) -> Result<Quantized> {
    let (n, d) = z.frames.dims2()?;
    if d != cb.dim {
        return Err(Error::shape("rvq_quantize", format!("latent dim {d} vs codebook dim {}", cb.dim)));
    }
    let mut residual = z.frames.data().to_vec();
    let mut layers = Vec::with_capacity(cb.layers());
    let mut residual_norms = Vec::with_capacity(cb.layers());
    let mut frame_residuals = Vec::with_capacity(cb.layers());
    let mut layer_inputs = Vec::with_capacity(cb.layers());
    for q in 0..cb.layers() {
        layer_inputs.push(residual.clone());
        let mut idx = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &mut residual[r * d..(r + 1) * d];
            let (i, _) = cb.nearest(q, row);
            for (x, e) in row.iter_mut().zip(cb.entry(q, i)) {
                *x -= e;
            }
            norms.push(row.iter().map(|v| v * v).sum::<f32>().sqrt());
            idx.push(i);
        }
        residual_norms.push(norms.iter().map(|&v| v as f64).sum::<f64>() as f32 / n.max(1) as f32);
        frame_residuals.push(norms);
        layers.push(idx);
    }
    let quantized: Vec<f32> = z.frames.data().iter().zip(&residual).map(|(a, r)| a - r).collect();
    Ok(Quantized {
        tokens: AcousticTokens {
            sample_rate: z.sample_rate,
            hop: z.hop,
            layers,
        },
        quantized: LatentFrames {
            frames: Tensor::new(vec![n, d], quantized)?,
            hop: z.hop,
            sample_rate: z.sample_rate,
        },
        residual_norms,
        frame_residuals,
        layer_inputs,
    })
}

/// Sum of the selected entries across layers.
pub fn rvq_dequantize(t: &AcousticTokens, cb: &CodebookSet) -> Result<LatentFrames> {
    t.validate(Some(cb.k))?;
    if t.layers.len() > cb.layers() {
        return Err(Error::shape("rvq_dequantize", format!("{} layers vs {}", t.layers.len(), cb.layers())));
    }
    let n = t.frames();
    let d = cb.dim;
    let mut out = vec![0.0f32; n * d];
    for (q, layer) in t.layers.iter().enumerate() {
        for (r, &i) in layer.iter().enumerate() {
            for (o, e) in out[r * d..(r + 1) * d].iter_mut().zip(cb.entry(q, i)) {
                *o += e;
            }
        }
    }
    Ok(LatentFrames {
        frames: Tensor::new(vec![n, d], out)?,
        hop: t.hop,
        sample_rate: t.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn latent(rows: Vec<Vec<f32>>) -> LatentFrames {
        LatentFrames {
            frames: Tensor::from_rows(&rows).unwrap(),
            hop: 320,
            sample_rate: 16000,
        }
    }

    #[test]
    fn exact_entry_gives_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = CodebookSet::random(&mut rng, 2, 16, 4, 1.0);
        let z = latent(vec![cb.entry(0, 7).to_vec()]);
        let q = rvq_quantize(&z, &cb).unwrap();
        assert_eq!(q.tokens.layers, vec![vec![7], vec![0]]);
        assert_eq!(q.residual_norms[1], 0.0);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let e = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let cb = CodebookSet::from_entries(vec![e]).unwrap();
        let z = latent(vec![vec![0.0, 5.0]]);
        // (0,0) is closest; drop it to make 1 and 2 tie
        assert_eq!(rvq_quantize(&z, &cb).unwrap().tokens.layers[0], vec![0]);
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let cb = CodebookSet::from_entries(vec![e]).unwrap();
        assert_eq!(rvq_quantize(&z, &cb).unwrap().tokens.layers[0], vec![0]);
    }

    #[test]
    fn dequantize_sums_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = CodebookSet::random(&mut rng, 2, 4, 3, 1.0);
        let t = AcousticTokens::new(16000, 320, vec![vec![1, 3], vec![2, 0]]).unwrap();
        let z = rvq_dequantize(&t, &cb).unwrap();
        for j in 0..3 {
            assert_eq!(z.frames.row(0)[j], cb.entry(0, 1)[j] + cb.entry(1, 2)[j]);
            assert_eq!(z.frames.row(1)[j], cb.entry(0, 3)[j] + cb.entry(1, 0)[j]);
        }
        let bad = AcousticTokens::new(16000, 320, vec![vec![4], vec![0]]).unwrap();
        assert!(rvq_dequantize(&bad, &cb).is_err());
    }

    #[test]
    fn dimension_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = CodebookSet::random(&mut rng, 2, 4, 3, 1.0);
        assert!(rvq_quantize(&latent(vec![vec![0.0; 4]]), &cb).is_err());
    }

    #[test]
    fn token_json_shape() {
        let t = AcousticTokens::new(16000, 320, vec![vec![1, 2], vec![3, 4]]).unwrap();
        let s = t.to_json().unwrap();
        assert_eq!(s, r#"{"sample_rate":16000,"hop":320,"layers":[[1,2],[3,4]]}"#);
        assert_eq!(AcousticTokens::from_json(&s).unwrap(), t);
        assert!(AcousticTokens::from_json(r#"{"sample_rate":16000,"hop":320,"layers":[[1],[]]}"#).is_err());
    }

    #[test]
    fn kmeans_and_ema_keep_zero_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cb = CodebookSet::random(&mut rng, 1, 8, 2, 1.0);
        let data: Vec<f32> = (0..200).map(|i| (i % 7) as f32 - 3.0).collect();
        cb.kmeans_init(0, &data, 5, &mut rng);
        assert_eq!(cb.entry(0, 0), &[0.0, 0.0]);
        let assign: Vec<usize> = (0..100).map(|r| cb.nearest(0, &data[r * 2..r * 2 + 2]).0).collect();
        cb.ema_update(0, &data, &assign, 0.99);
        assert_eq!(cb.entry(0, 0), &[0.0, 0.0]);
        let named = cb.named();
        assert_eq!(CodebookSet::from_named(&named).unwrap(), cb);
    }

    /// Greedy per-layer nearest neighbour by exhaustive scan, lowest index on ties.
    fn oracle(rows: &[Vec<f32>], cb: &CodebookSet) -> Vec<Vec<usize>> {
        let mut res: Vec<Vec<f32>> = rows.to_vec();
        let mut out = Vec::new();
        for l in 0..cb.layers() {
            let mut idx = Vec::new();
            for r in res.iter_mut() {
                let mut best = (0usize, f32::INFINITY);
                for k in 0..cb.k() {
                    let d: f32 = r.iter().zip(cb.entry(l, k)).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                r.iter_mut().zip(cb.entry(l, best.0)).for_each(|(a, b)| *a -= b);
                idx.push(best.0);
            }
            out.push(idx);
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_exhaustive_search(seed in any::<u64>(), q in 1usize..=3, n in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = CodebookSet::random(&mut rng, q, 4, 3, 1.0);
            let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let got = rvq_quantize(&latent(rows.clone()), &cb).unwrap();
            prop_assert_eq!(got.tokens.layers, oracle(&rows, &cb));
        }
    }

    proptest! {
        #[test]
        fn residual_norms_never_grow(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = CodebookSet::random(&mut rng, 2, 8, 4, 1.0);
            let rows: Vec<Vec<f32>> = (0..4).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let norms0: Vec<f32> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
            let q = rvq_quantize(&latent(rows), &cb).unwrap();
            for f in 0..4 {
                prop_assert!(q.frame_residuals[0][f] <= norms0[f] + 1e-6);
                prop_assert!(q.frame_residuals[1][f] <= q.frame_residuals[0][f] + 1e-6);
            }
        }

        #[test]
        fn quantize_dequantize_fixed_point(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cb = CodebookSet::random(&mut rng, 2, 8, 4, 1.0);
            cb.enforce_nesting(0.3);
            prop_assert!(cb.is_nested());
            let layers = vec![(0..6).map(|_| rng.gen_range(0..8)).collect(), (0..6).map(|_| rng.gen_range(0..8)).collect()];
            let t = AcousticTokens::new(16000, 320, layers).unwrap();
            let z = rvq_dequantize(&t, &cb).unwrap();
            let t2 = rvq_quantize(&z, &cb).unwrap().tokens;
            let z2 = rvq_dequantize(&t2, &cb).unwrap();
            let t3 = rvq_quantize(&z2, &cb).unwrap().tokens;
            prop_assert_eq!(&t2, &t3);
            // tokens coming out of the quantizer survive a single round trip
            let zr = latent((0..6).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect());
            let t4 = rvq_quantize(&zr, &cb).unwrap().tokens;
            let t5 = rvq_quantize(&rvq_dequantize(&t4, &cb).unwrap(), &cb).unwrap().tokens;
            prop_assert_eq!(t4, t5);
        }
    }
}
