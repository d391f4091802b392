//! Randomized trials shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use framegate::gate::{init_gate, la_gate};
use framegate::ops::softmax_stable;
use framegate::sampler::{gumbel_noise, gumbel_softmax_rows, straight_through_mask};
use framegate::{Graph, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A random gate instance: parameters, visual rows `[m, D]`, text `[l, D]`, heads.
pub struct GateCase {
    pub store: ParamStore,
    pub v: Tensor,
    pub t: Tensor,
    pub heads: usize,
}

impl GateCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let dim = heads * rng.random_range(1..5);
        let (m, l) = (rng.random_range(1..9), rng.random_range(1..5));
        let mut store = ParamStore::new();
        init_gate(&mut store, &mut rng, "g", dim);
        let v = Tensor::matrix(m, dim, normals(&mut rng, m * dim)).unwrap();
        let t = Tensor::matrix(l, dim, normals(&mut rng, l * dim)).unwrap();
        Self { store, v, t, heads }
    }

    pub fn run(&self, store: &ParamStore, v: &Tensor, t: &Tensor) -> Tensor {
        let mut g = Graph::new(store);
        let vv = g.tape.leaf(v);
        let tt = g.tape.leaf(t);
        let y = la_gate(&mut g, vv, tt, "g", self.heads).unwrap();
        g.tape.tensor(y)
    }

    pub fn out(&self) -> Tensor {
        self.run(&self.store, &self.v, &self.t)
    }
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Perturbing row `j` of the visual input leaves every other output row bitwise unchanged.
pub fn row_locality(seed: u64) -> Result<(), String> {
    let c = GateCase::random(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let base = c.out();
    let (m, d) = (c.v.rows(), c.v.cols());
    let j = rng.random_range(0..m);
    let mut v = c.v.clone();
    for x in &mut v.data_mut()[j * d..(j + 1) * d] {
        *x += rng.sample::<f64, _>(StandardNormal);
    }
    let moved = c.run(&c.store, &v, &c.t);
    for i in (0..m).filter(|&i| i != j) {
        if bits(base.row(i)) != bits(moved.row(i)) {
            return Err(format!("seed {seed}: row {i} changed when row {j} moved"));
        }
    }
    Ok(())
}

/// Scaling the text by `c > 0` leaves the output unchanged: bitwise for
/// powers of two, to 1e-12 relative otherwise.
pub fn scale_invariance(seed: u64) -> Result<(), String> {
    let c = GateCase::random(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    let base = c.out();
    let pow2 = 2f64.powi(rng.random_range(-8..9));
    let any = 10f64.powf(rng.random_range(-2.0..2.0));
    for (k, s) in [pow2, any].into_iter().enumerate() {
        let t = Tensor::new(
            c.t.shape().to_vec(),
            c.t.data().iter().map(|x| x * s).collect(),
        )
        .unwrap();
        let y = c.run(&c.store, &c.v, &t);
        let ok = if k == 0 {
            bits(y.data()) == bits(base.data())
        } else {
            y.data()
                .iter()
                .zip(base.data())
                .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0))
        };
        if !ok {
            return Err(format!("seed {seed}: text scale {s} changed the output"));
        }
    }
    Ok(())
}

/// A zero output projection makes the gate the identity.
pub fn zero_gate_identity(seed: u64) -> Result<(), String> {
    let c = GateCase::random(seed);
    let mut store = c.store.clone();
    store.get_mut("g.w_o.w").unwrap().data_mut().fill(0.0);
    let y = c.run(&store, &c.v, &c.t);
    if bits(y.data()) != bits(c.v.data()) {
        return Err(format!("seed {seed}: zero gate is not the identity"));
    }
    Ok(())
}

/// No text content reaches an all-zero visual input.
pub fn zero_video_zero_output(seed: u64) -> Result<(), String> {
    let c = GateCase::random(seed);
    let v = Tensor::zeros(c.v.shape());
    let y = c.run(&c.store, &v, &c.t);
    if y.data().iter().any(|&x| x != 0.0) {
        return Err(format!("seed {seed}: zero video produced {:?}", y.data()));
    }
    Ok(())
}

pub fn shape_preserved(seed: u64) -> Result<(), String> {
    let c = GateCase::random(seed);
    let y = c.out();
    if y.shape() != c.v.shape() {
        return Err(format!("seed {seed}: {:?} -> {:?}", c.v.shape(), y.shape()));
    }
    Ok(())
}

pub const GATE_PROPERTIES: [(&str, fn(u64) -> Result<(), String>); 5] = [
    ("row locality", row_locality),
    ("text scale invariance", scale_invariance),
    ("zero-gate identity", zero_gate_identity),
    ("zero video, zero output", zero_video_zero_output),
    ("shape preservation", shape_preserved),
];

/// Gradient of `Σ G ⊙ f(y_soft)` with respect to the logits, with `f` the
/// straight-through mask or the identity. Also returns the forward value.
fn st_pass(x: &Tensor, noise: &[f64], tau: f64, g: &[f64], straight: bool) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let xv = t.param(x.shape(), x.data().to_vec()).unwrap();
    let y = gumbel_softmax_rows(&mut t, xv, noise, tau).unwrap();
    let out = if straight {
        straight_through_mask(&mut t, y).unwrap().0
    } else {
        y
    };
    let gv = t.constant(x.shape(), g.to_vec()).unwrap();
    let p = t.mul(out, gv).unwrap();
    let loss = t.sum(p);
    t.backward(loss).unwrap();
    (t.grad(xv).unwrap().to_vec(), t.value(out).to_vec())
}

/// Straight-through gradient equals the soft surrogate's bitwise, and the
/// forward value is exactly one-hot at the soft argmax.
pub fn straight_through_identity(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, n) = (rng.random_range(1..6), rng.random_range(2..12));
    let x = Tensor::matrix(k, n, normals(&mut rng, k * n)).unwrap();
    let noise = gumbel_noise(&mut rng, k * n);
    let g = normals(&mut rng, k * n);
    let tau = rng.random_range(0.2..2.0);
    let (st_grad, hard) = st_pass(&x, &noise, tau, &g, true);
    let (soft_grad, soft) = st_pass(&x, &noise, tau, &g, false);
    if bits(&st_grad) != bits(&soft_grad) {
        return Err(format!("seed {seed}: gradients differ"));
    }
    for r in 0..k {
        let row = &soft[r * n..(r + 1) * n];
        let best = (0..n).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        for i in 0..n {
            let want = if i == best { 1.0 } else { 0.0 };
            if hard[r * n + i].to_bits() != f64::to_bits(want) {
                return Err(format!(
                    "seed {seed}: forward row {r} is not one-hot at {best}"
                ));
            }
        }
    }
    Ok(())
}

/// Largest gap between Gumbel-max selection frequencies and `softmax(x)`
/// over `draws` draws for one random logit vector.
pub fn gumbel_max_gap(seed: u64, draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..9);
    let x: Vec<f64> = normals(&mut rng, n);
    let p = softmax_stable(&x).unwrap();
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        let g = gumbel_noise(&mut rng, n);
        let best = (0..n).fold(0, |b, i| if x[i] + g[i] > x[b] + g[b] { i } else { b });
        counts[best] += 1;
    }
    counts
        .iter()
        .zip(&p)
        .map(|(&c, &q)| (c as f64 / draws as f64 - q).abs())
        .fold(0.0, f64::max)
}
