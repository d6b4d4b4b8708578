//! Acceptance criteria 1-11. Each criterion is one test that prints a single
//! `criterion N: PASS|FAIL ...` line and then asserts. Heavy criteria share a
//! lock so they do not compete for cores.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use octforge::alignment::{mmd_distance, total_loss_var, DomainBatch};
use octforge::cli::{cmd_protocol, LambdaArg, ProtocolArgs};
use octforge::fusion::attention_fuse;
use octforge::harness::{
    builtin_protocol, predict_image, run_protocol, split_dataset, AuditedSource, CropClassifier,
    DiskSource, Phase, ProtocolConfig, SplitRatio,
};
use octforge::manifest::{load_manifest, Label, ManifestRecord};
use octforge::model::{CropPrediction, Detector, LabeledImage, ModelConfig};
use octforge::octnet::{
    oct_conv_values, Backbone, BackboneConfig, Forward, OctChannels, OctConvLayer, OctTensor, OctVar, Preset,
};
use octforge::preprocess::{average_spectrum, cdi_hf_energy, CropInputs, RgbImage};
use octforge::synthgen::{gen_fake, gen_real, write_corpus, Family, Sample};
use octforge::tensor::gradcheck::{grad_check, grad_check_model, random_input, TOLERANCE};
use octforge::tensor::{Graph, NormMode, ParamStore, Tensor, Var, BN_EPS};
use octforge::trainer::{
    evaluate_images, lr_after, train_pipeline, LambdaChoice, Plateau, Splits, Stages, TrainConfig, TrainState,
    MODEL_FILE,
};

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|p| p.into_inner())
}

fn verdict(id: &str, pass: bool, detail: String) {
    // Written past the harness capture so passing criteria still report.
    let line = format!("criterion {id}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).and_then(|_| out.flush()).expect("stdout");
    assert!(pass, "criterion {id} failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Brute-force reference operators on [N, C, H, W] buffers.

fn conv_ref(x: &[f64], xd: [usize; 4], w: &[f64], wd: [usize; 4], b: Option<&[f64]>, s: usize, p: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wi] = xd;
    let [co, ci, kh, kw] = wd;
    assert_eq!(c, ci);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (wi + 2 * p - kw) / s + 1;
    let mut y = vec![0.0; n * co * oh * ow];
    for i in 0..n {
        for o in 0..co {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for ch in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let yy = (r * s + a) as isize - p as isize;
                                let xx = (q * s + bb) as isize - p as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wi as isize {
                                    continue;
                                }
                                let xv = x[((i * c + ch) * h + yy as usize) * wi + xx as usize];
                                acc += xv * w[((o * ci + ch) * kh + a) * kw + bb];
                            }
                        }
                    }
                    y[((i * co + o) * oh + r) * ow + q] = acc;
                }
            }
        }
    }
    (y, [n, co, oh, ow])
}

fn pool_ref(x: &[f64], d: [usize; 4]) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = d;
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; n * c * oh * ow];
    for pl in 0..n * c {
        for r in 0..oh {
            for q in 0..ow {
                let at = |a: usize, b: usize| x[(pl * h + 2 * r + a) * w + 2 * q + b];
                y[(pl * oh + r) * ow + q] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    (y, [n, c, oh, ow])
}

fn up_ref(x: &[f64], d: [usize; 4]) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = d;
    let mut y = vec![0.0; n * c * 4 * h * w];
    for pl in 0..n * c {
        for r in 0..2 * h {
            for q in 0..2 * w {
                y[(pl * 2 * h + r) * 2 * w + q] = x[(pl * h + r / 2) * w + q / 2];
            }
        }
    }
    (y, [n, c, 2 * h, 2 * w])
}

fn add_ref(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dims4(d: &[usize]) -> [usize; 4] {
    d.try_into().expect("rank 4")
}

#[test]
fn criterion_01_operator_oracles() {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |op: &'static str, err: f64| {
        let e = worst.entry(op).or_insert(0.0);
        *e = e.max(err);
    };

    for seed in 0..20u64 {
        let mut r = rng(100 + seed);
        let n = r.random_range(1..3);
        let c = r.random_range(1..4);
        let co = r.random_range(1..4);
        let k = [1, 3][r.random_range(0..2)];
        let s = r.random_range(1..3);
        let p = r.random_range(0..=k / 2);
        let (h, w) = (r.random_range(k..9), r.random_range(k..9));
        let xd = [n, c, h, w];
        let wd = [co, c, k, k];
        let x = uniform(&mut r, n * c * h * w);
        let wt = uniform(&mut r, co * c * k * k);
        let b = uniform(&mut r, co);
        let mut g = Graph::<f32>::new();
        let xv = g.input(Tensor::from_f64(&xd, &x).unwrap()).unwrap();
        let wv = g.input(Tensor::from_f64(&wd, &wt).unwrap()).unwrap();
        let bv = g.input(Tensor::from_f64(&[co], &b).unwrap()).unwrap();
        let y = g.conv2d(xv, wv, Some(bv), s, p).unwrap();
        let (expect, ed) = conv_ref(&x, xd, &wt, wd, Some(&b), s, p);
        assert_eq!(g.dims(y), ed);
        note("conv2d", max_abs(&to_f64(g.value(y)), &expect));

        let (ph, pw) = (2 * r.random_range(1..5), 2 * r.random_range(1..5));
        let pd = [n, c, ph, pw];
        let px = uniform(&mut r, n * c * ph * pw);
        let mut g = Graph::<f32>::new();
        let v = g.input(Tensor::from_f64(&pd, &px).unwrap()).unwrap();
        let pooled = g.avg_pool2x2(v).unwrap();
        let upped = g.upsample_nearest2x(v).unwrap();
        let (pe, _) = pool_ref(&px, pd);
        let (ue, ud) = up_ref(&px, pd);
        assert_eq!(g.dims(upped), ud);
        note("avg_pool2x2", max_abs(&to_f64(g.value(pooled)), &pe));
        note("upsample_nearest2x", max_abs(&to_f64(g.value(upped)), &ue));

        let (rows, din, dout) = (r.random_range(1..5), r.random_range(1..8), r.random_range(1..6));
        let lx = uniform(&mut r, rows * din);
        let lw = uniform(&mut r, dout * din);
        let lb = uniform(&mut r, dout);
        let mut g = Graph::<f32>::new();
        let xv = g.input(Tensor::from_f64(&[rows, din], &lx).unwrap()).unwrap();
        let wv = g.input(Tensor::from_f64(&[dout, din], &lw).unwrap()).unwrap();
        let bv = g.input(Tensor::from_f64(&[dout], &lb).unwrap()).unwrap();
        let y = g.linear(xv, wv, bv).unwrap();
        let expect: Vec<f64> = (0..rows)
            .flat_map(|i| {
                let (lx, lw, lb) = (&lx, &lw, &lb);
                (0..dout).map(move |o| lb[o] + (0..din).map(|j| lx[i * din + j] * lw[o * din + j]).sum::<f64>())
            })
            .collect();
        note("linear", max_abs(&to_f64(g.value(y)), &expect));

        let classes = r.random_range(2..5);
        let logits: Vec<f64> = uniform(&mut r, rows * classes).iter().map(|v| 4.0 * v).collect();
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
        let mut g = Graph::<f32>::new();
        let z = g.input(Tensor::from_f64(&[rows, classes], &logits).unwrap()).unwrap();
        let loss = g.softmax_cross_entropy(z, &labels).unwrap();
        let expect = (0..rows)
            .map(|i| {
                let row = &logits[i * classes..(i + 1) * classes];
                let denom: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[labels[i]].exp() / denom).ln()
            })
            .sum::<f64>()
            / rows as f64;
        note("softmax_cross_entropy", (g.value(loss).data()[0] as f64 - expect).abs());

        let input = OctChannels { high: r.random_range(1..4), low: r.random_range(0..3) };
        let output = OctChannels { high: r.random_range(1..4), low: r.random_range(0..3) };
        let (k, s) = ([1, 3][r.random_range(0..2)], r.random_range(1..3));
        let side = [4, 8][r.random_range(0..2)];
        let mut store = ParamStore::<f32>::new();
        let layer = OctConvLayer::new(&mut store, "oc", input, output, k, s, &mut r).unwrap();
        let hd = [1, input.high, side, side];
        let ld = [1, input.low, side / 2, side / 2];
        let xh = uniform(&mut r, input.high * side * side);
        let xl = uniform(&mut r, input.low * side * side / 4);
        let x = OctTensor {
            high: Tensor::from_f64(&hd, &xh).unwrap(),
            low: (input.low > 0).then(|| Tensor::from_f64(&ld, &xl).unwrap()),
        };
        let y = oct_conv_values(&store, &layer, &x).unwrap();
        let wt = |id| to_f64(store.value(id));
        let wdims = |id| dims4(store.value(id).dims());
        let p = k / 2;
        let (mut yh, yhd) = conv_ref(&xh, hd, &wt(layer.hh), wdims(layer.hh), None, s, p);
        if let Some(id) = layer.lh {
            let (z, zd) = conv_ref(&xl, ld, &wt(id), wdims(id), None, s, p);
            yh = add_ref(&yh, &up_ref(&z, zd).0);
        }
        assert_eq!(y.high.dims(), yhd);
        note("oct_conv", max_abs(&to_f64(&y.high), &yh));
        match (layer.hl, y.low) {
            (Some(id), Some(low)) => {
                let (pooled, pd) = pool_ref(&xh, hd);
                let (mut yl, _) = conv_ref(&pooled, pd, &wt(id), wdims(id), None, s, p);
                if let Some(id) = layer.ll {
                    yl = add_ref(&yl, &conv_ref(&xl, ld, &wt(id), wdims(id), None, s, p).0);
                }
                note("oct_conv", max_abs(&to_f64(&low), &yl));
            }
            (None, None) => assert_eq!(output.low, 0),
            _ => panic!("low branch presence does not match the layer"),
        }
    }

    let mut store = ParamStore::<f32>::new();
    let unit = OctChannels { high: 1, low: 1 };
    let layer = OctConvLayer::new(&mut store, "hand", unit, unit, 1, 1, &mut rng(0)).unwrap();
    for id in layer.weights() {
        store.get_mut(id).value.data_mut()[0] = 1.0;
    }
    let x = OctTensor {
        high: Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap(),
        low: Some(Tensor::from_f64(&[1, 1, 1, 1], &[10.]).unwrap()),
    };
    let y = oct_conv_values(&store, &layer, &x).unwrap();
    let hand = y.high.data() == [11.0, 12.0, 13.0, 14.0] && y.low.as_ref().map(|l| l.data().to_vec()) == Some(vec![12.5]);

    let elapsed = start.elapsed();
    let max_err = worst.values().copied().fold(0.0, f64::max);
    let pass = max_err < 1e-5 && hand && worst.len() == 6 && elapsed < Duration::from_secs(60);
    verdict("1", pass, format!("max abs err {max_err:.2e} over {worst:?}, hand case {hand}, {elapsed:.1?}"));
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> octforge::Result<Var> {
    let dims = g.dims(y).to_vec();
    let w = g.input(random_input(&dims, seed))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn criterion_02_gradient_suite() {
    let _lock = heavy();
    let start = Instant::now();
    let mut errors: Vec<(&str, f64)> = Vec::new();
    let x4 = |seed| random_input(&[2, 3, 6, 6], seed);

    errors.push((
        "conv2d",
        grad_check(&[x4(1), random_input(&[4, 3, 3, 3], 2), random_input(&[4], 3)], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            weighted_sum(g, y, 4)
        })
        .unwrap(),
    ));
    errors.push((
        "avg_pool2x2",
        grad_check(&[x4(5)], |g, v| {
            let y = g.avg_pool2x2(v[0])?;
            weighted_sum(g, y, 6)
        })
        .unwrap(),
    ));
    errors.push((
        "upsample_nearest2x",
        grad_check(&[x4(7)], |g, v| {
            let y = g.upsample_nearest2x(v[0])?;
            weighted_sum(g, y, 8)
        })
        .unwrap(),
    ));
    errors.push((
        "add/mul/scale",
        grad_check(&[x4(9), x4(10)], |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[0])?;
            let s = g.scale(m, -0.7)?;
            weighted_sum(g, s, 11)
        })
        .unwrap(),
    ));
    errors.push((
        "relu",
        grad_check(&[x4(12)], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 13)
        })
        .unwrap(),
    ));
    errors.push((
        "batch_norm",
        grad_check(&[x4(14), random_input(&[3], 15), random_input(&[3], 16)], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Batch)?;
            weighted_sum(g, y, 17)
        })
        .unwrap(),
    ));
    errors.push((
        "global_avg_pool",
        grad_check(&[x4(18)], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            weighted_sum(g, y, 19)
        })
        .unwrap(),
    ));
    errors.push((
        "linear",
        grad_check(&[random_input(&[4, 5], 20), random_input(&[3, 5], 21), random_input(&[3], 22)], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted_sum(g, y, 23)
        })
        .unwrap(),
    ));
    errors.push((
        "softmax_cross_entropy",
        grad_check(&[random_input(&[4, 3], 24)], |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])).unwrap(),
    ));
    errors.push((
        "attention_fuse",
        grad_check(&[random_input(&[3, 4], 25), random_input(&[3, 4], 26), random_input(&[4], 27)], |g, v| {
            let y = g.attention_fuse(v[0], v[1], v[2])?;
            weighted_sum(g, y, 28)
        })
        .unwrap(),
    ));
    errors.push((
        "mmd",
        grad_check(&[random_input(&[6, 4], 29)], |g, v| g.mmd(v[0], &[vec![0, 3], vec![1, 4, 5], vec![2]])).unwrap(),
    ));

    let mut store = ParamStore::<f64>::new();
    let ch = OctChannels { high: 2, low: 2 };
    let layer = OctConvLayer::new(&mut store, "oc", ch, ch, 3, 2, &mut rng(30)).unwrap();
    let inputs = [random_input(&[2, 2, 8, 8], 31), random_input(&[2, 2, 4, 4], 32)];
    errors.push((
        "oct_conv",
        grad_check_model(&store, &inputs, usize::MAX, 33, |g, st, bound, v| {
            let mut f = Forward::new(g, st, bound, false);
            let y = layer.forward(&mut f, OctVar { high: v[0], low: Some(v[1]) })?;
            let a = weighted_sum(g, y.high, 34)?;
            let b = weighted_sum(g, y.low.expect("low branch"), 35)?;
            g.add(a, b)
        })
        .unwrap(),
    ));

    let (det, store) = Detector::build::<f64>(ModelConfig::default(), 36).unwrap();
    let inputs = [random_input(&[4, 3, 32, 32], 37), random_input(&[4, 1, 32, 32], 38)];
    let labels = [0usize, 1, 1, 0];
    let groups = [vec![0, 1], vec![2, 3]];
    errors.push((
        "composite",
        grad_check_model(&store, &inputs, 2, 39, |g, st, bound, v| {
            let mut f = Forward::new(g, st, bound, true);
            let out = det.forward(&mut f, v[0], v[1])?;
            let (total, _, _) =
                total_loss_var(g, out.fusion.logits, &labels, out.fusion.penultimate, &groups, 0.5)?;
            Ok(total)
        })
        .unwrap(),
    ));

    let elapsed = start.elapsed();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let pass = worst < TOLERANCE && elapsed < Duration::from_secs(300);
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict("2", pass, format!("max rel err {worst:.2e} [{}], {elapsed:.1?}", detail.join(", ")));
}

/// Plain residual network evaluated with loops, reading the weights of an
/// `alpha = 0` backbone by name.
struct PlainNet<'a> {
    store: &'a ParamStore<f64>,
    name: &'a str,
}

impl PlainNet<'_> {
    fn weight(&self, key: &str) -> (Vec<f64>, [usize; 4]) {
        let id = self.store.id(&format!("{}.{key}", self.name)).unwrap_or_else(|| panic!("missing {key}"));
        let t = self.store.value(id);
        (t.data().to_vec(), dims4(t.dims()))
    }

    fn vector(&self, key: &str) -> Vec<f64> {
        let id = self.store.id(&format!("{}.{key}", self.name)).unwrap_or_else(|| panic!("missing {key}"));
        self.store.value(id).data().to_vec()
    }

    fn conv(&self, key: &str, x: &[f64], d: [usize; 4], stride: usize) -> (Vec<f64>, [usize; 4]) {
        let (w, wd) = self.weight(key);
        conv_ref(x, d, &w, wd, None, stride, wd[2] / 2)
    }

    fn norm(&self, key: &str, x: &mut [f64], d: [usize; 4], relu: bool) {
        let (g, b, m, v) = (
            self.vector(&format!("{key}.gamma")),
            self.vector(&format!("{key}.beta")),
            self.vector(&format!("{key}.mean")),
            self.vector(&format!("{key}.var")),
        );
        let [n, c, h, w] = d;
        for i in 0..n {
            for ch in 0..c {
                for e in &mut x[(i * c + ch) * h * w..(i * c + ch + 1) * h * w] {
                    let y = g[ch] * (*e - m[ch]) / (v[ch] + BN_EPS).sqrt() + b[ch];
                    *e = if relu { y.max(0.0) } else { y };
                }
            }
        }
    }

    fn forward(&self, x: &[f64], d: [usize; 4], blocks: &[(String, usize)]) -> Vec<f64> {
        let (mut y, mut yd) = self.conv("stem.hh", x, d, 2);
        self.norm("stem.bn.h", &mut y, yd, true);
        for (block, stride) in blocks {
            let (mut a, ad) = self.conv(&format!("{block}.conv1.hh"), &y, yd, *stride);
            self.norm(&format!("{block}.bn1.h"), &mut a, ad, true);
            let (mut b, bd) = self.conv(&format!("{block}.conv2.hh"), &a, ad, 1);
            self.norm(&format!("{block}.bn2.h"), &mut b, bd, false);
            let skip = if self.store.id(&format!("{}.{block}.down.hh", self.name)).is_some() {
                let (mut s, sd) = self.conv(&format!("{block}.down.hh"), &y, yd, *stride);
                self.norm(&format!("{block}.down.bn.h"), &mut s, sd, false);
                s
            } else {
                y.clone()
            };
            y = add_ref(&b, &skip).iter().map(|v| v.max(0.0)).collect();
            yd = bd;
        }
        let [n, c, h, w] = yd;
        (0..n * c).map(|pl| y[pl * h * w..(pl + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect()
    }
}

#[test]
fn criterion_03_octconv_degeneracy() {
    let mut store = ParamStore::<f64>::new();
    let cfg = BackboneConfig::new(Preset::Desk10, 3).with_alpha(0.0);
    let backbone = Backbone::new(&mut store, "net", cfg, &mut rng(40)).unwrap();
    let mut r = rng(41);
    for p in store.iter_mut() {
        let fill = match p.name.rsplit('.').next() {
            Some("gamma" | "var") => Some((0.5, 1.5)),
            Some("beta" | "mean") => Some((-0.3, 0.3)),
            _ => None,
        };
        if let Some((lo, hi)) = fill {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(lo..hi));
        }
    }
    let low_params = store.iter().filter(|(_, p)| p.name.ends_with(".ll") || p.name.contains(".l.")).count();
    let d = [2, 3, 32, 32];
    let x = uniform(&mut r, d.iter().product());

    let mut g = Graph::new();
    let bound = store.bind(&mut g).unwrap();
    let xv = g.input(Tensor::from_f64(&d, &x).unwrap()).unwrap();
    let mut f = Forward::new(&mut g, &store, &bound, false);
    let y = backbone.forward(&mut f, xv).unwrap();
    let oct = g.value(y).data().to_vec();

    let blocks: Vec<(String, usize)> = backbone
        .blocks
        .iter()
        .map(|b| (b.name.trim_start_matches("net.").to_string(), b.conv1.stride))
        .collect();
    let plain = PlainNet { store: &store, name: "net" }.forward(&x, d, &blocks);
    let diff = max_abs(&oct, &plain);
    let pass = diff < 1e-6 && low_params == 0 && oct.len() == 2 * 128;
    verdict("3", pass, format!("max abs diff {diff:.2e}, low-branch params {low_params}, outputs {}", oct.len()));
}

fn dyadic_batch(domain: usize, rows: &[[f64; 3]]) -> DomainBatch {
    DomainBatch {
        domain,
        features: Tensor::new(vec![rows.len(), 3], rows.iter().flatten().copied().collect()).unwrap(),
        labels: vec![Label::Fake; rows.len()],
    }
}

#[test]
fn criterion_04_mmd() {
    let mut r = rng(50);
    let mut rows = |n: usize| -> Vec<[f64; 3]> {
        (0..n).map(|_| [0, 1, 2].map(|_| r.random_range(-64i32..=64) as f64 / 8.0)).collect()
    };
    let a = rows(4);
    let b = rows(4);
    let c = rows(8);
    let base = mmd_distance(&[dyadic_batch(0, &a), dyadic_batch(1, &b), dyadic_batch(2, &c)]).unwrap();

    let identical = mmd_distance(&[dyadic_batch(0, &a), dyadic_batch(1, &a)]).unwrap();
    let k2 = mmd_distance(&[dyadic_batch(0, &[[0.0; 3]]), dyadic_batch(1, &[[1.0, 1.0, 0.0]])]).unwrap();
    let k3 = mmd_distance(&[
        dyadic_batch(0, &[[1.0, 0.0, 0.0]]),
        dyadic_batch(1, &[[0.0, 1.0, 0.0]]),
        dyadic_batch(2, &[[0.0, 0.0, 1.0]]),
    ])
    .unwrap();

    let shift = [0.5, -1.25, 3.0];
    let moved = |rs: &[[f64; 3]]| -> Vec<[f64; 3]> { rs.iter().map(|v| [0, 1, 2].map(|i| v[i] + shift[i])).collect() };
    let translated =
        mmd_distance(&[dyadic_batch(0, &moved(&a)), dyadic_batch(1, &moved(&b)), dyadic_batch(2, &moved(&c))]).unwrap();
    let mut a_perm = a.clone();
    a_perm.reverse();
    let permuted = mmd_distance(&[dyadic_batch(2, &c), dyadic_batch(0, &a_perm), dyadic_batch(1, &b)]).unwrap();
    let doubled: Vec<[f64; 3]> = a.iter().chain(&a).copied().collect();
    let duplicated = mmd_distance(&[dyadic_batch(0, &doubled), dyadic_batch(1, &b), dyadic_batch(2, &c)]).unwrap();

    let features: Vec<f64> = a.iter().chain(&b).chain(&c).flatten().copied().collect();
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![16, 3], features).unwrap()).unwrap();
    let groups = [(0..4).collect(), (4..8).collect(), (8..16).collect::<Vec<_>>()];
    let node = g.mmd(x, &groups).unwrap();
    let graph_value = g.value(node).data()[0];

    let pass = identical < 1e-12
        && (k2 - 2.0).abs() < 1e-9
        && (k3 - 2.0).abs() < 1e-9
        && translated == base
        && permuted == base
        && duplicated == base
        && (graph_value - base).abs() < 1e-12
        && base > 0.0;
    verdict(
        "4",
        pass,
        format!(
            "identical {identical:e}, K=2 {k2}, K=3 {k3}, base {base}, translated {translated}, permuted {permuted}, duplicated {duplicated}, graph {graph_value}"
        ),
    );
}

#[test]
fn criterion_05_fusion_invariants() {
    let mut r = rng(60);
    let (mut worst_sum, mut zero_ok, mut swap_ok) = (0.0f64, true, true);
    for _ in 0..10_000 {
        let d = r.random_range(1..17);
        let scale: f32 = r.random_range(0.1..5.0);
        let mut v = || (0..d).map(|_| scale * r.random_range(-1.0f32..1.0)).collect::<Vec<f32>>();
        let (a, b, q) = (v(), v(), v());
        let (_, (wa, wb)) = attention_fuse(&a, &b, &q).unwrap();
        worst_sum = worst_sum.max((wa as f64 + wb as f64 - 1.0).abs());
        let (_, swapped) = attention_fuse(&b, &a, &q).unwrap();
        swap_ok &= swapped == (wb, wa);
        let (_, half) = attention_fuse(&a, &b, &vec![0.0; d]).unwrap();
        zero_ok &= half == (0.5, 0.5);
    }
    let pass = worst_sum < 1e-6 && zero_ok && swap_ok;
    verdict("5", pass, format!("max |w_cdi + w_si - 1| {worst_sum:.2e}, q=0 exact {zero_ok}, swap exact {swap_ok}"));
}

/// Best accuracy of `fake iff hf > t` over all cut points.
fn threshold_accuracy(real: &[f64], fake: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = real.iter().map(|&v| (v, false)).chain(fake.iter().map(|&v| (v, true))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let total = all.len();
    // Cut below index i: everything from i on is called fake.
    let mut correct = fake.len();
    let mut best = correct;
    for &(_, is_fake) in &all {
        if is_fake {
            correct -= 1;
        } else {
            correct += 1;
        }
        best = best.max(correct);
    }
    best as f64 / total as f64
}

/// Value at `(r, c)` against the median of its 9x9 periodic neighborhood.
fn peak_ratio(si: &[f32], n: usize, r: usize, c: usize) -> (f64, bool) {
    let at = |dr: isize, dc: isize| {
        let rr = (r as isize + dr).rem_euclid(n as isize) as usize;
        let cc = (c as isize + dc).rem_euclid(n as isize) as usize;
        si[rr * n + cc] as f64
    };
    let mut hood: Vec<f64> = (-4..=4).flat_map(|dr| (-4..=4).map(move |dc| (dr, dc))).map(|(dr, dc)| at(dr, dc)).collect();
    let centre = at(0, 0);
    let local_max = hood.iter().all(|&v| v <= centre);
    hood.sort_by(f64::total_cmp);
    let median = hood[hood.len() / 2];
    (centre / median, local_max)
}

#[test]
fn criterion_06_intrinsic_clues() {
    let _lock = heavy();
    let start = Instant::now();
    let seed = 6;
    let n = 200;
    let hf = |samples: &[Sample]| samples.iter().map(|s| cdi_hf_energy(&s.image).unwrap()).collect::<Vec<f64>>();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let reals = gen_real(seed, n);
    let real_hf = hf(&reals);
    let mut part_a = true;
    let mut notes = Vec::new();
    let mut nearest = Vec::new();
    for family in Family::ALL {
        let fakes = gen_fake(family.as_str(), seed, n).unwrap();
        let fake_hf = hf(&fakes);
        let acc = threshold_accuracy(&real_hf, &fake_hf);
        part_a &= mean(&fake_hf) > mean(&real_hf) && acc >= 0.8;
        notes.push(format!("{} hf {:.4} vs {:.4} acc {:.3}", family.as_str(), mean(&fake_hf), mean(&real_hf), acc));
        if family == Family::Nearest {
            nearest = fakes;
        }
    }

    let size = 128;
    let images = |s: &[Sample]| s.iter().map(|x| x.image.clone()).collect::<Vec<_>>();
    let fake_si = average_spectrum(&images(&nearest), n).unwrap();
    let real_si = average_spectrum(&images(&reals), n).unwrap();
    let centre = size / 2;
    let positions = [(centre, (centre + 64) % size), ((centre + 64) % size, centre)];
    let mut part_b = true;
    for (r, c) in positions {
        let (fr, fmax) = peak_ratio(fake_si.tensor().data(), size, r, c);
        let (rr, rmax) = peak_ratio(real_si.tensor().data(), size, r, c);
        let fake_peak = fr >= 2.0 && fmax;
        let real_peak = rr >= 2.0 && rmax;
        part_b &= fake_peak && !real_peak;
        notes.push(format!("({r},{c}) fake ratio {fr:.3} local max {fmax}, real ratio {rr:.3} local max {rmax}"));
    }
    let elapsed = start.elapsed();
    let pass = part_a && part_b && elapsed < Duration::from_secs(120);
    verdict(
        "6",
        pass,
        format!("(a) {} (b) {} [{}], {elapsed:.1?}", pf(part_a), pf(part_b), notes.join("; ")),
    );
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Splits in-memory samples and returns (train, val, test) images.
fn split_images(samples: &[Sample], seed: u64) -> [Vec<LabeledImage>; 3] {
    let by_path: HashMap<&Path, &Sample> = samples.iter().map(|s| (s.record.path.as_path(), s)).collect();
    let records: Vec<ManifestRecord> = samples.iter().map(|s| s.record.clone()).collect();
    let split = split_dataset(&records, SplitRatio::default(), seed).unwrap();
    let load = |rs: &[ManifestRecord]| -> Vec<LabeledImage> {
        rs.iter()
            .map(|r| {
                let s = by_path[r.path.as_path()];
                LabeledImage::new(&s.image, r.label, r.domain.clone()).unwrap()
            })
            .collect()
    };
    [load(&split.train), load(&split.val), load(&split.test)]
}

fn two_family_corpus(seed: u64, n: usize) -> Vec<Sample> {
    let mut samples = gen_real(seed, n);
    samples.extend(gen_fake("nearest", seed, n).unwrap());
    samples.extend(gen_fake("bilinear", seed, n).unwrap());
    samples
}

const E2E_STAGE1_EPOCHS: usize = 4;
const E2E_STAGE2_EPOCHS: usize = 4;
const E2E_PROBE_EPOCHS: usize = 2;

#[test]
fn criterion_07_end_to_end_learning() {
    let _lock = heavy();
    let mut accs = Vec::new();
    let mut notes = Vec::new();
    let mut epochs_ok = true;
    let mut slowest = Duration::ZERO;
    for seed in 1..=5u64 {
        let start = Instant::now();
        let [train, val, test] = split_images(&two_family_corpus(seed, 200), seed);
        let cfg = TrainConfig {
            seed,
            stage1_max_epochs: E2E_STAGE1_EPOCHS,
            stage2_max_epochs: E2E_STAGE2_EPOCHS,
            probe_epochs: E2E_PROBE_EPOCHS,
            ..Default::default()
        };
        let (det, state) = TrainState::fresh(ModelConfig::default(), &cfg).unwrap();
        let data = Splits { train: &train, val: &val };
        let out = train_pipeline(&det, state, data, &cfg, LambdaChoice::Auto, Stages::All, None).unwrap();
        let acc = evaluate_images(&det, &out.model.params, &test, cfg.eval_batch).unwrap();
        let used = out.stage1.as_ref().map_or(0, |r| r.epochs.len()) + out.stage2.as_ref().map_or(0, |r| r.epochs.len());
        epochs_ok &= used <= 30;
        let took = start.elapsed();
        slowest = slowest.max(took);
        notes.push(format!("seed {seed}: {acc:.1}% lambda {} epochs {used} {took:.0?}", out.model.lambda));
        accs.push(acc);
        eprintln!("{}", notes.last().expect("just pushed"));
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let pass = mean >= 90.0 && epochs_ok && slowest < Duration::from_secs(30 * 60);
    verdict("7", pass, format!("mean seen-domain test acc {mean:.2}% [{}]", notes.join("; ")));
}

#[test]
fn criterion_08_alignment_efficacy() {
    let _lock = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("align.toml");
    std::fs::write(&config, "[train]\nstage1_max_epochs = 4\nstage2_max_epochs = 10\n").unwrap();
    let run = |lambda: f64, manifest: Option<PathBuf>, out: &str| {
        let args = ProtocolArgs {
            spec: "n1-synth".into(),
            manifest,
            count: 200,
            config: Some(config.clone()),
            seed: Some(8),
            repeats: 1,
            lambda: LambdaArg(LambdaChoice::Fixed(lambda)),
            out: tmp.path().join(out),
        };
        let report = cmd_protocol(&args).unwrap();
        let on_disk: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(args.out.join("report.json")).unwrap()).unwrap();
        assert_eq!(on_disk, report);
        report
    };
    let aligned = run(1.0, None, "lambda1");
    let plain = run(0.0, Some(tmp.path().join("lambda1/corpus/manifest.csv")), "lambda0");
    let mmd = |r: &serde_json::Value| r["train_mmd"].as_f64().expect("stage-2 mmd in report");
    let (m1, m0) = (mmd(&aligned), mmd(&plain));
    let ratio = m1 / m0;
    verdict(
        "8",
        ratio < 0.5,
        format!(
            "final-epoch train MMD lambda=1 {m1:.4} vs lambda=0 {m0:.4} (ratio {ratio:.3}); seen acc {} / {}, unseen acc {} / {}",
            aligned["seen_acc"], plain["seen_acc"], aligned["unseen_acc"], plain["unseen_acc"]
        ),
    );
}

/// Calls a crop fake when its R-G difference plane has a positive mean.
struct TintClassifier;

impl CropClassifier for TintClassifier {
    fn classify(&self, crops: &[CropInputs]) -> octforge::Result<Vec<CropPrediction>> {
        Ok(crops
            .iter()
            .map(|c| {
                let plane = &c.cdi.data()[..128 * 128];
                let fake = plane.iter().sum::<f32>() > 0.0;
                CropPrediction {
                    label: if fake { Label::Fake } else { Label::Real },
                    fake_probability: if fake { 1.0 } else { 0.0 },
                    weights: (0.5, 0.5),
                }
            })
            .collect())
    }
}

#[test]
fn criterion_09_protocol_plumbing() {
    let _lock = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus, 9, 12, &Family::ALL).unwrap();
    let records = load_manifest(&corpus.join("manifest.csv")).unwrap();
    let spec = builtin_protocol("n1-synth").unwrap();
    let source = AuditedSource::new(DiskSource::new(&corpus));
    let cfg = ProtocolConfig {
        model: ModelConfig::default(),
        train: TrainConfig { seed: 9, stage1_max_epochs: 1, stage2_max_epochs: 1, ..Default::default() },
        lambda: LambdaChoice::Fixed(0.1),
        repeats: 2,
        ratio: SplitRatio::default(),
    };
    let report = run_protocol(&spec, &records, &source, &cfg, Some(&tmp.path().join("runs"))).unwrap();
    let reads = source.reads();
    let leaked = source.reads_of(&spec.test_domain, Phase::Training);
    let held_out_reads = source.reads_of(&spec.test_domain, Phase::Evaluation);
    let last_training = reads.iter().rposition(|a| a.phase == Phase::Training).expect("training reads");
    let first_held_out = reads.iter().position(|a| a.domain == spec.test_domain).expect("held-out reads");
    let audit = leaked == 0 && held_out_reads > 0 && first_held_out > last_training && report.runs.len() == 2;

    let quadrants = |mask: u8| {
        RgbImage::from_fn(256, 256, |r, c| {
            let q = (r / 128) * 2 + c / 128;
            if mask & (1 << q) != 0 {
                [160, 100, 100]
            } else {
                [100, 100, 100]
            }
        })
    };
    let any_crop = (0u8..16).all(|mask| {
        let v = predict_image(&quadrants(mask), &TintClassifier).unwrap();
        v.crops.len() == 4 && (v.label == Label::Fake) == (mask != 0)
    });

    let mut cells = Vec::new();
    for (domain, label) in [("camera", Label::Real), ("a", Label::Fake), ("b", Label::Fake), ("c", Label::Fake)] {
        for i in 0..100 {
            cells.push(ManifestRecord { path: format!("{domain}/{i:03}.png").into(), label, domain: domain.into() });
        }
    }
    let split = split_dataset(&cells, SplitRatio::default(), 9).unwrap();
    let count = |rs: &[ManifestRecord], d: &str| rs.iter().filter(|r| r.domain == d).count();
    let mut exact = true;
    for d in ["camera", "a", "b", "c"] {
        exact &= (count(&split.train, d), count(&split.val, d), count(&split.test, d)) == (60, 20, 20);
    }
    let mut all: Vec<&PathBuf> = split.train.iter().chain(&split.val).chain(&split.test).map(|r| &r.path).collect();
    all.sort();
    all.dedup();
    exact &= all.len() == cells.len();

    verdict(
        "9",
        audit && any_crop && exact,
        format!(
            "audit {} ({leaked} training reads of {}, {held_out_reads} evaluation reads, all after the last training read), any-crop rule {}, split 60/20/20 {}",
            pf(audit),
            spec.test_domain,
            pf(any_crop),
            pf(exact)
        ),
    );
}

#[test]
fn criterion_10_plateau_schedule() {
    let fresh = |lr| Plateau::new(lr, 5, 0.1, 1e-7);
    let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() <= 1e-12 * b);
    let flat = |n| vec![80.0; n];
    let mut checks = Vec::new();
    checks.push(("5 flat epochs decay", close(lr_after(&flat(5), fresh(1e-3)), 1e-4)));
    checks.push(("4 flat epochs keep", close(lr_after(&flat(4), fresh(1e-3)), 1e-3)));
    checks.push((
        "0.09-point gains are not improvements",
        close(lr_after(&[80.0, 80.09, 80.18, 80.17, 80.18], fresh(1e-3)), 1e-4),
    ));
    checks.push((
        "0.1-point gain resets",
        close(lr_after(&[80.0, 80.0, 80.0, 80.0, 80.1, 80.1, 80.1, 80.1, 80.1], fresh(1e-3)), 1e-3),
    ));
    checks.push(("decays compound", close(lr_after(&flat(15), fresh(1e-4)), 1e-7)));
    checks.push(("floor reached keeps training", close(lr_after(&flat(19), fresh(1e-4)), 1e-7)));
    checks.push(("below floor stops", lr_after(&flat(20), fresh(1e-4)).is_none()));
    checks.push(("stage-1 rate stops after 25 flat epochs", lr_after(&flat(25), fresh(1e-3)).is_none()));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict("10", failed.is_empty(), format!("{} histories, failing: {failed:?}", checks.len()));
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    std::fs::read(dir.join(file)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(file).display()))
}

#[test]
fn criterion_11_determinism_and_resume() {
    let _lock = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let [train, val, _] = split_images(&two_family_corpus(11, 12), 11);
    let data = Splits { train: &train, val: &val };
    let cfg = |s1: usize, s2: usize| TrainConfig {
        seed: 11,
        stage1_max_epochs: s1,
        stage2_max_epochs: s2,
        probe_epochs: 1,
        lambda_grid: vec![0.01, 1.0],
        ..Default::default()
    };
    let full = |dir: &Path| {
        let c = cfg(2, 2);
        let (det, state) = TrainState::fresh(ModelConfig::default(), &c).unwrap();
        train_pipeline(&det, state, data, &c, LambdaChoice::Auto, Stages::All, Some(dir)).unwrap();
    };
    let (a, b, resumed) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("resumed"));
    full(&a);
    full(&b);
    let files = ["stage1.last.ckpt", "stage1.best.ckpt", "stage2.last.ckpt", "stage2.best.ckpt", MODEL_FILE, "train_log.csv"];
    let identical = files.iter().all(|f| read(&a, f) == read(&b, f));

    let c1 = cfg(1, 1);
    let (det, state) = TrainState::fresh(ModelConfig::default(), &c1).unwrap();
    train_pipeline(&det, state, data, &c1, LambdaChoice::Auto, Stages::One, Some(&resumed)).unwrap();
    let (det, state) = TrainState::load(&resumed.join("stage1.last.ckpt")).unwrap();
    let c2 = cfg(2, 1);
    train_pipeline(&det, state, data, &c2, LambdaChoice::Auto, Stages::All, Some(&resumed)).unwrap();
    let (det, state) = TrainState::load(&resumed.join("stage2.last.ckpt")).unwrap();
    let c3 = cfg(2, 2);
    train_pipeline(&det, state, data, &c3, LambdaChoice::Auto, Stages::All, Some(&resumed)).unwrap();
    let trace_equal = read(&a, "train_log.csv") == read(&resumed, "train_log.csv");
    let model_equal = read(&a, MODEL_FILE) == read(&resumed, MODEL_FILE);
    let rows = String::from_utf8(read(&a, "train_log.csv")).unwrap().lines().count() - 1;

    verdict(
        "11",
        identical && trace_equal && model_equal && rows > 0,
        format!(
            "repeat run byte-identical {}, resumed loss trace equal {} ({rows} rows), resumed model equal {}",
            pf(identical),
            pf(trace_equal),
            pf(model_equal)
        ),
    );
}
