//! Encoder–decoder network with skip connections and optional scalar
//! noise-level conditioning, plus its hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, Act, Real};
use super::{Conditioning, DenoiserSpec};

/// Width of the sinusoidal noise-level embedding.
pub const EMB_DIM: usize = 32;
/// Hidden width of the embedding MLP.
pub const EMB_HIDDEN: usize = 64;
/// Multiplier applied to ᾱ before the sinusoidal embedding.
const EMB_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<R> {
    pub entries: Vec<Param<R>>,
}

impl<R: Real> Params<R> {
    pub fn zeros_like<S>(other: &Params<S>) -> Self {
        Self {
            entries: other
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![R::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> Params<S> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| S::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// Flat `(entry, offset)` address of the `i`-th scalar parameter.
    pub fn locate(&self, mut i: usize) -> (usize, usize) {
        for (e, p) in self.entries.iter().enumerate() {
            if i < p.data.len() {
                return (e, i);
            }
            i -= p.data.len();
        }
        panic!("parameter index out of range");
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    din: usize,
    dout: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv_a: Conv,
    conv_b: Conv,
    emb: Option<Dense>,
}

/// Parameter layout of the network; the tensors themselves live in [`Params`].
#[derive(Debug, Clone)]
pub struct Unet {
    depth: usize,
    enc: Vec<Block>,
    dec: Vec<Block>,
    out: Conv,
    emb_mlp: Option<Dense>,
}

struct Builder {
    names: Vec<(String, Vec<usize>, usize)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        self.names.push((name, shape, fan_in));
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan = cin * k * k;
        Conv {
            w: self.push(format!("{name}.weight"), vec![cout, cin, k, k], fan),
            b: self.push(format!("{name}.bias"), vec![cout], fan),
            cout,
            k,
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        Dense {
            w: self.push(format!("{name}.weight"), vec![dout, din], din),
            b: self.push(format!("{name}.bias"), vec![dout], din),
            din,
            dout,
        }
    }
}

impl Unet {
    pub fn new(spec: &DenoiserSpec) -> (Self, Vec<(String, Vec<usize>, usize)>) {
        let mut b = Builder { names: Vec::new() };
        let cond = spec.conditioning == Conditioning::NoiseLevelScalar;
        let emb_mlp = cond.then(|| b.dense("emb.fc", EMB_DIM, EMB_HIDDEN));
        let widths: Vec<usize> = (0..spec.depth).map(|k| spec.base_width << k).collect();
        let mut enc = Vec::new();
        let mut cin = spec.in_channels;
        for (k, &wk) in widths.iter().enumerate() {
            let conv_a = b.conv(&format!("enc{k}.conv_a"), cin, wk, 3);
            let emb = cond.then(|| b.dense(&format!("enc{k}.emb"), EMB_HIDDEN, wk));
            let conv_b = b.conv(&format!("enc{k}.conv_b"), wk, wk, 3);
            enc.push(Block { conv_a, conv_b, emb });
            cin = wk;
        }
        let mut dec = Vec::new();
        for k in (0..spec.depth - 1).rev() {
            let wk = widths[k];
            let conv_a = b.conv(&format!("dec{k}.conv_a"), widths[k + 1] + wk, wk, 3);
            let emb = cond.then(|| b.dense(&format!("dec{k}.emb"), EMB_HIDDEN, wk));
            let conv_b = b.conv(&format!("dec{k}.conv_b"), wk, wk, 3);
            dec.push(Block { conv_a, conv_b, emb });
        }
        let out = b.conv("out", widths[0], spec.out_channels, 1);
        (
            Self {
                depth: spec.depth,
                enc,
                dec,
                out,
                emb_mlp,
            },
            b.names,
        )
    }

    /// Uniform(±1/√fan_in) initialisation from a seed.
    pub fn init_params(spec: &DenoiserSpec, seed: u64) -> Params<f32> {
        let (_, names) = Self::new(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Params {
            entries: names
                .into_iter()
                .map(|(name, shape, fan_in)| {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let len = shape.iter().product();
                    let data = (0..len)
                        .map(|_| rng.random_range(-bound..bound) as f32)
                        .collect();
                    Param { name, shape, data }
                })
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

fn sinusoidal<R: Real>(levels: &[R]) -> Vec<R> {
    let half = EMB_DIM / 2;
    let mut out = Vec::with_capacity(levels.len() * EMB_DIM);
    for &lv in levels {
        let v = lv.to_f64_lossy() * EMB_SCALE;
        let args: Vec<f64> = (0..half)
            .map(|i| v * (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        out.extend(args.iter().map(|a| R::from_f64_lossy(a.sin())));
        out.extend(args.iter().map(|a| R::from_f64_lossy(a.cos())));
    }
    out
}

fn dense_forward<R: Real>(p: &Params<R>, d: Dense, x: &[R], batch: usize) -> Vec<R> {
    let mut y = vec![R::zero(); batch * d.dout];
    ops::matmul(batch, d.din, d.dout, x, false, &p.entries[d.w].data, true, &mut y, false);
    let bias = &p.entries[d.b].data;
    for row in y.chunks_exact_mut(d.dout) {
        row.iter_mut().zip(bias).for_each(|(v, &b)| *v = *v + b);
    }
    y
}

fn dense_backward<R: Real>(
    p: &Params<R>,
    g: &mut Params<R>,
    d: Dense,
    x: &[R],
    dy: &[R],
    batch: usize,
) -> Vec<R> {
    ops::matmul(d.dout, batch, d.din, dy, true, x, false, &mut g.entries[d.w].data, true);
    for row in dy.chunks_exact(d.dout) {
        let gb = &mut g.entries[d.b].data;
        gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
    }
    let mut dx = vec![R::zero(); batch * d.din];
    ops::matmul(batch, d.dout, d.din, dy, false, &p.entries[d.w].data, false, &mut dx, false);
    dx
}

fn silu_vec<R: Real>(v: &[R]) -> Vec<R> {
    v.iter().map(|&x| x / (R::one() + (-x).exp())).collect()
}

struct BlockTape<R> {
    input: Act<R>,
    a1: Act<R>,
    h1: Act<R>,
    a2: Act<R>,
}

/// Intermediate values kept for the backward pass.
pub struct Tape<R> {
    batch: usize,
    emb_in: Vec<R>,
    emb_pre: Vec<R>,
    emb_h: Vec<R>,
    enc: Vec<BlockTape<R>>,
    dec: Vec<BlockTape<R>>,
    out_in: Act<R>,
}

impl Unet {
    fn block_forward<R: Real>(
        &self,
        p: &Params<R>,
        blk: &Block,
        x: Act<R>,
        emb_h: Option<&[R]>,
        tape: &mut Vec<BlockTape<R>>,
        keep: bool,
    ) -> Act<R> {
        let ca = blk.conv_a;
        let mut a1 = ops::conv_forward(&x, &p.entries[ca.w].data, &p.entries[ca.b].data, ca.cout, ca.k);
        if let (Some(d), Some(h)) = (blk.emb, emb_h) {
            let e = dense_forward(p, d, h, x.b);
            ops::add_channel_bias(&mut a1, &e);
        }
        let h1 = ops::silu(&a1);
        let cb = blk.conv_b;
        let a2 = ops::conv_forward(&h1, &p.entries[cb.w].data, &p.entries[cb.b].data, cb.cout, cb.k);
        let h2 = ops::silu(&a2);
        if keep {
            tape.push(BlockTape { input: x, a1, h1, a2 });
        }
        h2
    }

    /// Runs the network on `x` (`[c][b][h][w]`). `levels` holds one noise
    /// level per batch item for conditioned networks.
    pub fn forward<R: Real>(
        &self,
        p: &Params<R>,
        x: Act<R>,
        levels: Option<&[R]>,
        keep_tape: bool,
    ) -> (Act<R>, Option<Tape<R>>) {
        let batch = x.b;
        let (emb_in, emb_pre, emb_h) = match (self.emb_mlp, levels) {
            (Some(d), Some(lv)) => {
                let e_in = sinusoidal(lv);
                let pre = dense_forward(p, d, &e_in, batch);
                let h = silu_vec(&pre);
                (e_in, pre, h)
            }
            _ => (Vec::new(), Vec::new(), Vec::new()),
        };
        let emb = (!emb_h.is_empty()).then_some(emb_h.as_slice());

        let mut enc_tape = Vec::new();
        let mut skips = Vec::new();
        let mut h = x;
        for (k, blk) in self.enc.iter().enumerate() {
            let out = self.block_forward(p, blk, h, emb, &mut enc_tape, keep_tape);
            if k + 1 < self.depth {
                h = ops::avg_pool2(&out);
                skips.push(out);
            } else {
                h = out;
            }
        }
        let mut dec_tape = Vec::new();
        for blk in &self.dec {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = ops::upsample2(&h);
            let cat = up.concat(&skip);
            h = self.block_forward(p, blk, cat, emb, &mut dec_tape, keep_tape);
        }
        let o = self.out;
        let y = ops::conv_forward(&h, &p.entries[o.w].data, &p.entries[o.b].data, o.cout, o.k);
        let tape = keep_tape.then(|| Tape {
            batch,
            emb_in,
            emb_pre,
            emb_h,
            enc: enc_tape,
            dec: dec_tape,
            out_in: h,
        });
        (y, tape)
    }

    fn block_backward<R: Real>(
        &self,
        p: &Params<R>,
        g: &mut Params<R>,
        blk: &Block,
        t: &BlockTape<R>,
        mut dh2: Act<R>,
        demb: &mut Option<Vec<R>>,
        emb_h: &[R],
        need_input_grad: bool,
    ) -> Option<Act<R>> {
        ops::silu_backward(&t.a2, &mut dh2);
        let cb = blk.conv_b;
        let (gw, gb) = two_mut(&mut g.entries, cb.w, cb.b);
        let mut dh1 = ops::conv_backward(&t.h1, &dh2, &p.entries[cb.w].data, gw, gb, cb.k, true)
            .expect("input grad requested");
        ops::silu_backward(&t.a1, &mut dh1);
        if let (Some(d), Some(acc)) = (blk.emb, demb.as_mut()) {
            let de = ops::channel_bias_grad(&dh1);
            let dh = dense_backward(p, g, d, emb_h, &de, dh1.b);
            acc.iter_mut().zip(dh).for_each(|(a, b)| *a = *a + b);
        }
        let ca = blk.conv_a;
        let (gw, gb) = two_mut(&mut g.entries, ca.w, ca.b);
        ops::conv_backward(&t.input, &dh1, &p.entries[ca.w].data, gw, gb, ca.k, need_input_grad)
    }

    /// Gradients of all parameters given the output gradient.
    pub fn backward<R: Real>(&self, p: &Params<R>, tape: Tape<R>, dout: Act<R>) -> Params<R> {
        let mut g = Params::zeros_like(p);
        let o = self.out;
        let (gw, gb) = two_mut(&mut g.entries, o.w, o.b);
        let mut dh = ops::conv_backward(&tape.out_in, &dout, &p.entries[o.w].data, gw, gb, o.k, true)
            .expect("input grad requested");
        let mut demb = self.emb_mlp.map(|_| vec![R::zero(); tape.batch * EMB_HIDDEN]);

        // decoder, last-applied first
        let mut skip_grads: Vec<Act<R>> = Vec::new();
        for (i, blk) in self.dec.iter().enumerate().rev() {
            let t = &tape.dec[i];
            let dcat = self
                .block_backward(p, &mut g, blk, t, dh, &mut demb, &tape.emb_h, true)
                .expect("input grad requested");
            let skip_c = blk.conv_b.cout;
            let up_c = dcat.c - skip_c;
            let (dup, dskip) = dcat.split(up_c);
            skip_grads.push(dskip);
            dh = ops::upsample2_backward(&dup);
        }
        // skip_grads[j] belongs to encoder level j
        for (k, blk) in self.enc.iter().enumerate().rev() {
            if k + 1 < self.depth {
                let pooled = ops::avg_pool2_backward(&dh);
                let mut total = skip_grads[k].clone();
                total.data.iter_mut().zip(pooled.data).for_each(|(a, b)| *a = *a + b);
                dh = total;
            }
            let need = k > 0;
            match self.block_backward(p, &mut g, blk, &tape.enc[k], dh, &mut demb, &tape.emb_h, need) {
                Some(dx) => dh = dx,
                None => break,
            }
        }
        if let (Some(d), Some(mut dembh)) = (self.emb_mlp, demb) {
            // through the SiLU of the embedding MLP
            for (gv, &a) in dembh.iter_mut().zip(&tape.emb_pre) {
                let s = R::one() / (R::one() + (-a).exp());
                *gv = *gv * s * (R::one() + a * (R::one() - s));
            }
            dense_backward(p, &mut g, d, &tape.emb_in, &dembh, tape.batch);
        }
        g
    }
}

fn two_mut<T>(v: &mut [Param<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

/// Mean squared error of the network output against `target` (`[b][h][w]`)
/// together with the gradient of every parameter.
pub fn loss_and_grad<R: Real>(
    net: &Unet,
    p: &Params<R>,
    x: Act<R>,
    levels: Option<&[R]>,
    target: &[R],
) -> (f64, Params<R>) {
    let (y, tape) = net.forward(p, x, levels, true);
    assert_eq!(y.data.len(), target.len());
    let n = target.len() as f64;
    let mut loss = 0.0;
    let scale = R::from_f64_lossy(2.0 / n);
    let dy: Vec<R> = y
        .data
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a - b;
            loss += d.to_f64_lossy().powi(2);
            d * scale
        })
        .collect();
    let g = net.backward(p, tape.expect("tape kept"), Act { data: dy, ..y });
    (loss / n, g)
}

/// Mean squared error only.
pub fn loss<R: Real>(net: &Unet, p: &Params<R>, x: Act<R>, levels: Option<&[R]>, target: &[R]) -> f64 {
    let (y, _) = net.forward(p, x, levels, false);
    y.data
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
        .sum::<f64>()
        / target.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Conditioning, DenoiserSpec};
    use rand::Rng;

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let spec = DenoiserSpec::new(2, Conditioning::NoiseLevelScalar).with_size(3, 4);
        let (net, _) = Unet::new(&spec);
        let p: Params<f64> = Unet::init_params(&spec, 7).cast();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Act {
            c: 2,
            b: 2,
            h: 8,
            w: 8,
            data: (0..2 * 2 * 64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let target: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let levels = [0.9, 0.2];
        let (_, g) = loss_and_grad(&net, &p, x.clone(), Some(&levels), &target);
        let total = p.count();
        for _ in 0..25 {
            let (e, o) = p.locate(rng.random_range(0..total));
            let h = 1e-5;
            let mut plus = p.clone();
            plus.entries[e].data[o] += h;
            let mut minus = p.clone();
            minus.entries[e].data[o] -= h;
            let fd = (loss(&net, &plus, x.clone(), Some(&levels), &target)
                - loss(&net, &minus, x.clone(), Some(&levels), &target))
                / (2.0 * h);
            let an = g.entries[e].data[o];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3 || (fd - an).abs() < 1e-9, "{}[{o}]: fd {fd} vs analytic {an}", p.entries[e].name);
        }
    }
}
