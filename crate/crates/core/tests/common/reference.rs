//! Plain-loop f64 model written straight from the layer definitions. It
//! shares no code with the library and serves as the oracle for forward
//! values and, through f64 finite differences, for gradients.

/// Per-image activation of one tapped layer: `units × channels`, where conv
/// layers have one unit per spatial position and dense layers one channel
/// per unit.
#[derive(Clone, Debug)]
pub struct Activation {
    pub dense: bool,
    pub units: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Activation {
    fn at(&self, u: usize, c: usize) -> f64 {
        self.data[u * self.channels + c]
    }
}

#[derive(Clone, Debug)]
pub struct RefNet {
    pub image_size: usize,
    pub input_channels: usize,
    /// `(kernel [3,3,in,out], bias, in, out)`
    pub conv: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
    /// `(weight [in,out], bias, in, out)`
    pub dense: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct RefLayer {
    pub key_weight: Vec<f64>,
    pub key_bias: Vec<f64>,
    pub query_weight: Vec<f64>,
    pub query_bias: Vec<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct RefAttention {
    pub dim: usize,
    pub layers: Vec<RefLayer>,
}

/// Branch record of a forward pass: ReLU signs, pooling winners and clamp
/// states. Equal records mean the same piecewise-smooth region.
pub type Branches = Vec<u32>;

#[derive(Clone, Debug)]
pub struct RefState {
    pub keys: Vec<Vec<Vec<f64>>>,
    pub queries: Vec<Vec<Vec<f64>>>,
    pub global_query: Vec<f64>,
    pub gatta: Vec<Vec<f64>>,
}

fn widen(t: &[f32]) -> Vec<f64> {
    t.iter().map(|&v| v as f64).collect()
}

impl RefNet {
    /// `tensors` in library order: kernel and bias per conv stage, then
    /// weight and bias per dense layer.
    pub fn new(image_size: usize, input_channels: usize, conv_channels: &[usize], tensors: &[Vec<f64>]) -> Self {
        let mut it = tensors.iter();
        let mut c_in = input_channels;
        let mut conv = Vec::new();
        for &c in conv_channels {
            conv.push((it.next().unwrap().clone(), it.next().unwrap().clone(), c_in, c));
            c_in = c;
        }
        let mut dense = Vec::new();
        for _ in 0..2 {
            let w = it.next().unwrap().clone();
            let b = it.next().unwrap().clone();
            let out = b.len();
            dense.push((w.clone(), b, w.len() / out, out));
        }
        RefNet {
            image_size,
            input_channels,
            conv,
            dense,
        }
    }

    pub fn from_model(model: &gattanet::BackboneModel) -> Self {
        let cfg = model.config();
        let tensors: Vec<Vec<f64>> = model.tensors().iter().map(|t| widen(t.data())).collect();
        Self::new(cfg.image_size, cfg.input_channels, &cfg.conv_channels, &tensors)
    }

    /// One image `[h,w,c]` through the network. `gains[l]` holds one gain per
    /// unit of layer `l`; the factor applied is `1 + gain`, floored at zero
    /// when `clamp` is set.
    pub fn forward(
        &self,
        image: &[f64],
        gains: &[Option<Vec<f64>>],
        clamp: bool,
        branches: &mut Branches,
    ) -> (Vec<f64>, Vec<Activation>) {
        let mut acts = Vec::new();
        let modulate = |layer: usize, act: &mut Activation, branches: &mut Branches| {
            if let Some(Some(g)) = gains.get(layer) {
                for u in 0..act.units {
                    let mut factor = 1.0 + g[u];
                    if clamp {
                        branches.push((factor > 0.0) as u32);
                        factor = factor.max(0.0);
                    }
                    for c in 0..act.channels {
                        act.data[u * act.channels + c] *= factor;
                    }
                }
            }
        };

        let mut side = self.image_size;
        let mut x = image.to_vec();
        let mut c_in = self.input_channels;
        for (layer, (kernel, bias, ci, co)) in self.conv.iter().enumerate() {
            assert_eq!(*ci, c_in);
            let mut a = Activation {
                dense: false,
                units: side * side,
                channels: *co,
                data: vec![0.0; side * side * co],
            };
            for y in 0..side {
                for xx in 0..side {
                    for o in 0..*co {
                        let mut z = bias[o];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize {
                                    continue;
                                }
                                for i in 0..*ci {
                                    let v = x[(sy as usize * side + sx as usize) * ci + i];
                                    z += v * kernel[((ky * 3 + kx) * ci + i) * co + o];
                                }
                            }
                        }
                        branches.push((z > 0.0) as u32);
                        a.data[(y * side + xx) * co + o] = z.max(0.0);
                    }
                }
            }
            modulate(layer, &mut a, branches);
            let half = side / 2;
            let mut pooled = vec![0.0; half * half * co];
            for y in 0..half {
                for xx in 0..half {
                    for o in 0..*co {
                        let window = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| a.at((2 * y + dy) * side + 2 * xx + dx, o));
                        let mut best = 0;
                        for k in 1..4 {
                            if window[k] > window[best] {
                                best = k;
                            }
                        }
                        branches.push(best as u32);
                        pooled[(y * half + xx) * co + o] = window[best];
                    }
                }
            }
            acts.push(a);
            x = pooled;
            side = half;
            c_in = *co;
        }

        let n_conv = self.conv.len();
        let mut h = x;
        for (j, (w, b, n_in, n_out)) in self.dense.iter().enumerate() {
            assert_eq!(h.len(), *n_in);
            let mut z: Vec<f64> = (0..*n_out)
                .map(|o| b[o] + (0..*n_in).map(|i| h[i] * w[i * n_out + o]).sum::<f64>())
                .collect();
            if j == 0 {
                for v in &mut z {
                    branches.push((*v > 0.0) as u32);
                    *v = v.max(0.0);
                }
            }
            let mut a = Activation {
                dense: true,
                units: *n_out,
                channels: 1,
                data: z,
            };
            modulate(n_conv + j, &mut a, branches);
            h = a.data.clone();
            acts.push(a);
        }
        (h, acts)
    }
}

impl RefAttention {
    /// `tensors` in library order: key weight, key bias, query weight,
    /// query bias and gain scale per layer.
    pub fn new(dim: usize, tensors: &[Vec<f64>]) -> Self {
        let layers = tensors
            .chunks(5)
            .map(|t| RefLayer {
                key_weight: t[0].clone(),
                key_bias: t[1].clone(),
                query_weight: t[2].clone(),
                query_bias: t[3].clone(),
                alpha: t[4][0],
            })
            .collect();
        RefAttention { dim, layers }
    }

    pub fn from_params(params: &gattanet::AttentionParams) -> Self {
        let tensors: Vec<Vec<f64>> = params.tensors().iter().map(|t| widen(t.data())).collect();
        Self::new(params.dim(), &tensors)
    }

    /// Keys or queries of one layer. A conv unit projects its channel vector
    /// through the shared matrix; a dense unit scales its own matrix row.
    pub fn project(&self, act: &Activation, weight: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
        let d = self.dim;
        (0..act.units)
            .map(|u| {
                (0..d)
                    .map(|j| {
                        let s = if act.dense {
                            act.at(u, 0) * weight[u * d + j]
                        } else {
                            (0..act.channels).map(|c| act.at(u, c) * weight[c * d + j]).sum()
                        };
                        s + bias[j]
                    })
                    .collect()
            })
            .collect()
    }

    pub fn state(&self, acts: &[Activation]) -> RefState {
        let d = self.dim;
        let mut keys = Vec::new();
        let mut queries = Vec::new();
        for (act, l) in acts.iter().zip(&self.layers) {
            keys.push(self.project(act, &l.key_weight, &l.key_bias));
            queries.push(self.project(act, &l.query_weight, &l.query_bias));
        }
        let mut global_query = vec![0.0; d];
        for q in &queries {
            for j in 0..d {
                global_query[j] += q.iter().map(|row| row[j]).sum::<f64>() / q.len() as f64 / queries.len() as f64;
            }
        }
        let gatta = keys
            .iter()
            .map(|k| k.iter().map(|row| (0..d).map(|j| row[j] * global_query[j]).sum()).collect())
            .collect();
        RefState {
            keys,
            queries,
            global_query,
            gatta,
        }
    }
}

/// Logits of one image after `iterations` attention passes, with the last
/// pass's state. `modulated[l]` selects the layers that receive gains.
pub fn run(
    net: &RefNet,
    att: &RefAttention,
    image: &[f64],
    iterations: usize,
    modulated: &[bool],
    clamp: bool,
    branches: &mut Branches,
) -> (Vec<f64>, Vec<RefState>) {
    let (mut logits, mut acts) = net.forward(image, &[], clamp, branches);
    let mut states = Vec::new();
    for _ in 0..iterations {
        let state = att.state(&acts);
        let gains: Vec<Option<Vec<f64>>> = state
            .gatta
            .iter()
            .zip(&att.layers)
            .zip(modulated)
            .map(|((g, l), &m)| m.then(|| g.iter().map(|v| l.alpha * v).collect()))
            .collect();
        (logits, acts) = net.forward(image, &gains, clamp, branches);
        states.push(state);
    }
    (logits, states)
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
        })
        .sum();
    total / labels.len() as f64
}

pub fn images(batch: &gattanet::Tensor) -> Vec<Vec<f64>> {
    let n = batch.shape()[0];
    batch.data().chunks(batch.len() / n).map(widen).collect()
}

/// Steps tried, largest first; each must keep both perturbed evaluations on
/// the branch of the unperturbed one.
const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];

/// Central differences of an f64 loss. Entries are `None` where every step
/// crossed a branch boundary.
pub fn numeric_gradient<F>(f: F, params: &[Vec<f64>]) -> Vec<Vec<Option<f64>>>
where
    F: Fn(&[Vec<f64>]) -> (f64, Branches),
{
    let (_, center) = f(params);
    let mut probe = params.to_vec();
    params
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            (0..p.len())
                .map(|ei| {
                    let x = p[ei];
                    STEPS.iter().find_map(|&h| {
                        probe[pi][ei] = x + h;
                        let (plus, bp) = f(&probe);
                        probe[pi][ei] = x - h;
                        let (minus, bm) = f(&probe);
                        probe[pi][ei] = x;
                        (bp == center && bm == center).then(|| (plus - minus) / (2.0 * h))
                    })
                })
                .collect()
        })
        .collect()
}
