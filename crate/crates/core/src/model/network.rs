use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{MaskKind, ModelConfig};
use crate::error::{contract, Result};
use crate::exec::{Eager, Exec};
use crate::features::Spectrogram;
use crate::gru::Direction;
use crate::params::{BnStatsId, ParamId, ParamStore};
use crate::postproc::pad_time_axis;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: BnStatsId,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, 3, 3], cin * 9, rng);
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0));
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        let stats = store.add_bn_stats(format!("{name}.bn"), cout);
        Self { weight, gamma, beta, stats }
    }

    fn run<E: Exec>(&self, ex: &mut E, x: &E::V) -> Result<E::V> {
        let w = ex.param(self.weight);
        let y = ex.conv2d(x, &w, None)?;
        let (g, b) = (ex.param(self.gamma), ex.param(self.beta));
        ex.batchnorm2d(&y, &g, &b, self.stats)
    }
}

/// `y = ReLU(x + BN(conv(ReLU(BN(conv(x))))))`.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    first: ConvBn,
    second: ConvBn,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: ConvBn::new(store, &format!("{name}.conv1"), c, c, rng),
            second: ConvBn::new(store, &format!("{name}.conv2"), c, c, rng),
        }
    }

    fn run<E: Exec>(&self, ex: &mut E, x: &E::V) -> Result<E::V> {
        let h = self.first.run(ex, x)?;
        let h = ex.relu(&h);
        let h = self.second.run(ex, &h)?;
        let s = ex.add(x, &h)?;
        Ok(ex.relu(&s))
    }
}

/// Final `C → C` 3×3 conv of a mask branch, followed by a sigmoid.
#[derive(Debug, Clone)]
struct MaskHead {
    weight: ParamId,
    bias: ParamId,
}

impl MaskHead {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[c, c, 3, 3], c * 9, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[c], c * 9, rng),
        }
    }

    fn run<E: Exec>(&self, ex: &mut E, x: &E::V) -> Result<E::V> {
        let (w, b) = (ex.param(self.weight), ex.param(self.bias));
        let y = ex.conv2d(x, &w, Some(&b))?;
        Ok(ex.sigmoid(&y))
    }
}

#[derive(Debug, Clone)]
struct Hourglass {
    encoder: Vec<ResBlock>,
    skips: Vec<ResBlock>,
    bottleneck: ResBlock,
    decoder: Vec<ResBlock>,
    head: MaskHead,
}

#[derive(Debug, Clone)]
enum MaskBranch {
    Hourglass(Hourglass),
    SingleScale { blocks: [ResBlock; 2], head: MaskHead },
    None,
}

#[derive(Debug, Clone)]
struct GruParams {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl GruParams {
    fn new(store: &mut ParamStore, name: &str, nin: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = 3 * hidden;
        Self {
            w_ih: store.add_uniform(format!("{name}.w_ih"), &[g, nin], hidden, rng),
            w_hh: store.add_uniform(format!("{name}.w_hh"), &[g, hidden], hidden, rng),
            b_ih: store.add_uniform(format!("{name}.b_ih"), &[g], hidden, rng),
            b_hh: store.add_uniform(format!("{name}.b_hh"), &[g], hidden, rng),
        }
    }

    fn run<E: Exec>(&self, ex: &mut E, x: &E::V, dir: Direction) -> Result<E::V> {
        let w = [
            ex.param(self.w_ih),
            ex.param(self.w_hh),
            ex.param(self.b_ih),
            ex.param(self.b_hh),
        ];
        ex.gru(x, [&w[0], &w[1], &w[2], &w[3]], dir)
    }
}

#[derive(Debug, Clone)]
struct BiGru {
    forward: GruParams,
    backward: GruParams,
}

#[derive(Debug, Clone)]
struct Classifier {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-scale view of the mask branch for one forward pass.
#[derive(Debug, Clone)]
pub struct MaskTrace<V> {
    /// `(time, freq)` sizes visited, finest first.
    pub resolutions: Vec<(usize, usize)>,
    /// Decoder-side activation at each resolution, finest first (the
    /// coarsest entry is the bottleneck output).
    pub scales: Vec<V>,
}

/// Intermediate maps of the attention module.
#[derive(Debug, Clone)]
pub struct AttentionTrace<V> {
    /// Feature branch output F.
    pub features: V,
    /// Mask branch output M.
    pub mask: V,
    /// `(1 + M) ⊙ F`.
    pub attended: V,
    pub mask_scales: Option<MaskTrace<V>>,
}

pub struct ForwardOutput<V> {
    /// Frame probabilities, `[N, T]`.
    pub probs: V,
    pub attention: Option<AttentionTrace<V>>,
}

/// Frame-wise event probabilities for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub probs: Vec<f64>,
    pub hop_seconds: f64,
}

/// Whole-clip attention maps, cropped to the clip's frames.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub features: Tensor,
    pub mask: Tensor,
    pub attended: Tensor,
    /// Decoder activations per scale, finest first, each `[C, T/2^k, D/2^k]`
    /// (uncropped).
    pub scales: Vec<Tensor>,
    pub resolutions: Vec<(usize, usize)>,
}

/// The complete detector: stem, feature branch ∥ mask branch, residual
/// attention, bidirectional GRU stack and frame classifier.
#[derive(Debug, Clone)]
pub struct Mtfa {
    config: ModelConfig,
    store: ParamStore,
    stem: ConvBn,
    feature: [ResBlock; 2],
    mask: MaskBranch,
    rnn: Vec<BiGru>,
    head: Classifier,
}

impl Mtfa {
    /// Builds the architecture with seeded fan-in uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let rng = &mut rng;
        let s = &mut store;

        let stem = ConvBn::new(s, "stem", 1, c, rng);
        let feature = [
            ResBlock::new(s, "feature.0", c, rng),
            ResBlock::new(s, "feature.1", c, rng),
        ];
        let mask = match config.mask {
            MaskKind::Hourglass => {
                let depth = config.n_scales - 1;
                let encoder = (0..depth).map(|i| ResBlock::new(s, &format!("mask.enc.{i}"), c, rng)).collect();
                let skips = (0..depth).map(|i| ResBlock::new(s, &format!("mask.skip.{i}"), c, rng)).collect();
                let bottleneck = ResBlock::new(s, "mask.bottleneck", c, rng);
                let decoder = (0..depth).map(|i| ResBlock::new(s, &format!("mask.dec.{i}"), c, rng)).collect();
                let head = MaskHead::new(s, "mask.out", c, rng);
                MaskBranch::Hourglass(Hourglass {
                    encoder,
                    skips,
                    bottleneck,
                    decoder,
                    head,
                })
            }
            MaskKind::SingleScale => MaskBranch::SingleScale {
                blocks: [
                    ResBlock::new(s, "mask.res.0", c, rng),
                    ResBlock::new(s, "mask.res.1", c, rng),
                ],
                head: MaskHead::new(s, "mask.out", c, rng),
            },
            MaskKind::None => MaskBranch::None,
        };
        let u = config.gru_units;
        let rnn = (0..config.gru_layers)
            .map(|l| {
                let nin = if l == 0 { c } else { 2 * u };
                BiGru {
                    forward: GruParams::new(s, &format!("rnn.{l}.fwd"), nin, u, rng),
                    backward: GruParams::new(s, &format!("rnn.{l}.bwd"), nin, u, rng),
                }
            })
            .collect();
        let head = Classifier {
            w1: s.add_uniform("head.fc1.weight", &[u, 2 * u], 2 * u, rng),
            b1: s.add_uniform("head.fc1.bias", &[u], 2 * u, rng),
            w2: s.add_uniform("head.fc2.weight", &[1, u], u, rng),
            b2: s.add_uniform("head.fc2.bias", &[1], u, rng),
        };
        Ok(Self {
            config,
            store,
            stem,
            feature,
            mask,
            rnn,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter ids belonging to the feature branch.
    pub fn feature_branch_params(&self) -> Vec<ParamId> {
        self.feature
            .iter()
            .flat_map(|b| [&b.first, &b.second])
            .flat_map(|cb| [cb.weight, cb.gamma, cb.beta])
            .collect()
    }

    /// Parameter ids of the final classifier layer's bias.
    pub fn output_bias(&self) -> ParamId {
        self.head.b2
    }

    fn check_spatial(&self, t: usize, d: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if !t.is_multiple_of(m) || !d.is_multiple_of(m) {
            return Err(contract(
                "stem",
                format!("input {t}×{d} must be divisible by {m}; pad the time axis first"),
            ));
        }
        if d != self.config.n_mels {
            return Err(contract("stem", format!("expected {} mel bins, got {d}", self.config.n_mels)));
        }
        Ok(())
    }

    /// 1 → C lift: conv + BN + ReLU. Input `[N,1,T,D]`.
    pub fn stem<E: Exec>(&self, ex: &mut E, x: &E::V) -> Result<E::V> {
        let shape = ex.value(x).shape().to_vec();
        let (t, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        self.check_spatial(t, d)?;
        let y = self.stem.run(ex, x)?;
        Ok(ex.relu(&y))
    }

    /// Two residual blocks.
    pub fn feature_branch<E: Exec>(&self, ex: &mut E, x: &E::V) -> Result<E::V> {
        let h = self.feature[0].run(ex, x)?;
        self.feature[1].run(ex, &h)
    }

    /// Mask M in (0,1) with the same shape as `x`; `None` when the model has
    /// no mask branch.
    pub fn mask_branch<E: Exec>(&self, ex: &mut E, x: &E::V, trace: bool) -> Result<Option<(E::V, Option<MaskTrace<E::V>>)>> {
        match &self.mask {
            MaskBranch::None => Ok(None),
            MaskBranch::SingleScale { blocks, head } => {
                let h = blocks[0].run(ex, x)?;
                let h = blocks[1].run(ex, &h)?;
                Ok(Some((head.run(ex, &h)?, None)))
            }
            MaskBranch::Hourglass(hg) => {
                let dims = |ex: &E, v: &E::V| {
                    let s = ex.value(v).shape();
                    (s[s.len() - 2], s[s.len() - 1])
                };
                let mut resolutions = vec![dims(ex, x)];
                let mut skips = Vec::with_capacity(hg.encoder.len());
                let mut cur = x.clone();
                for (enc, skip) in hg.encoder.iter().zip(&hg.skips) {
                    let e = enc.run(ex, &cur)?;
                    skips.push(skip.run(ex, &e)?);
                    cur = ex.maxpool2d(&e)?;
                    resolutions.push(dims(ex, &cur));
                }
                cur = hg.bottleneck.run(ex, &cur)?;
                let mut scales = Vec::new();
                if trace {
                    scales.push(cur.clone());
                }
                for (dec, skip) in hg.decoder.iter().zip(skips.into_iter().rev()) {
                    let up = ex.upsample_nearest2(&cur)?;
                    let merged = ex.add(&up, &skip)?;
                    cur = dec.run(ex, &merged)?;
                    if trace {
                        scales.push(cur.clone());
                    }
                }
                scales.reverse();
                let m = hg.head.run(ex, &cur)?;
                let tr = trace.then_some(MaskTrace { resolutions, scales });
                Ok(Some((m, tr)))
            }
        }
    }

    /// Two stacked bidirectional GRU layers over `[N,T,C]`; output `[N,T,2U]`.
    pub fn rnn_head<E: Exec>(&self, ex: &mut E, seq: &E::V) -> Result<E::V> {
        let mut cur = seq.clone();
        for (l, layer) in self.rnn.iter().enumerate() {
            if l > 0 {
                cur = ex.dropout(&cur, self.config.dropout)?;
            }
            let f = layer.forward.run(ex, &cur, Direction::Forward)?;
            let b = layer.backward.run(ex, &cur, Direction::Backward)?;
            cur = ex.concat_last(&f, &b)?;
        }
        Ok(cur)
    }

    /// `linear(2U→U) → ReLU → dropout → linear(U→1) → sigmoid`; `[N,T,2U] → [N,T]`.
    pub fn classify<E: Exec>(&self, ex: &mut E, h: &E::V) -> Result<E::V> {
        let (w1, b1) = (ex.param(self.head.w1), ex.param(self.head.b1));
        let y = ex.linear(h, &w1, &b1)?;
        let y = ex.relu(&y);
        let y = ex.dropout(&y, self.config.dropout)?;
        let (w2, b2) = (ex.param(self.head.w2), ex.param(self.head.b2));
        let y = ex.linear(&y, &w2, &b2)?;
        let p = ex.sigmoid(&y);
        let mut shape = ex.value(&p).shape().to_vec();
        shape.pop();
        ex.reshape(&p, &shape)
    }

    /// Full network on a batch of spectrogram chunks `[N,T,D]`.
    pub fn forward<E: Exec>(&self, ex: &mut E, input: Tensor, trace: bool) -> Result<ForwardOutput<E::V>> {
        let (n, t, d) = match *input.shape() {
            [n, t, d] => (n, t, d),
            ref s => return Err(contract("forward", format!("expected [N,T,D], got {s:?}"))),
        };
        let x = ex.input(input.reshape(&[n, 1, t, d])?);
        let x = self.stem(ex, &x)?;
        let f = self.feature_branch(ex, &x)?;
        let (a, attention) = match self.mask_branch(ex, &x, trace)? {
            Some((m, scales)) => {
                let a = ex.attend(&f, &m)?;
                let tr = trace.then(|| AttentionTrace {
                    features: f.clone(),
                    mask: m.clone(),
                    attended: a.clone(),
                    mask_scales: scales,
                });
                (a, tr)
            }
            None => {
                let tr = trace.then(|| AttentionTrace {
                    features: f.clone(),
                    mask: f.clone(),
                    attended: f.clone(),
                    mask_scales: None,
                });
                (f, tr)
            }
        };
        drop(x);
        let seq = ex.temporal_collapse(&a)?;
        drop(a);
        let h = self.rnn_head(ex, &seq)?;
        let probs = self.classify(ex, &h)?;
        Ok(ForwardOutput { probs, attention })
    }

    /// Whole-clip inference: pads the time axis by repeating the last frame,
    /// runs the network in eval mode and crops back to the clip's length.
    pub fn predict(&self, spec: &Spectrogram) -> Result<FramePrediction> {
        Ok(self.predict_impl(spec, false)?.0)
    }

    pub fn predict_with_attention(&self, spec: &Spectrogram) -> Result<(FramePrediction, AttentionMaps)> {
        let (p, maps) = self.predict_impl(spec, true)?;
        Ok((p, maps.expect("trace requested")))
    }

    fn predict_impl(&self, spec: &Spectrogram, trace: bool) -> Result<(FramePrediction, Option<AttentionMaps>)> {
        let (padded, original) = pad_time_axis(spec, self.config.size_multiple());
        let input = Tensor::new(&[1, padded.n_frames(), padded.n_mels()], padded.data().to_vec())?;
        let mut ex = Eager::new(&self.store);
        let out = self.forward(&mut ex, input, trace)?;
        let mut probs = out.probs.into_owned().into_data();
        probs.truncate(original);
        let maps = out.attention.map(|a| {
            let crop = |t: Tensor| crop_time(&t, original);
            let (resolutions, scales) = match a.mask_scales {
                Some(ms) => (ms.resolutions, ms.scales.into_iter().map(|s| squeeze(s.into_owned())).collect()),
                None => (Vec::new(), Vec::new()),
            };
            AttentionMaps {
                features: crop(squeeze(a.features.into_owned())),
                mask: crop(squeeze(a.mask.into_owned())),
                attended: crop(squeeze(a.attended.into_owned())),
                scales,
                resolutions,
            }
        });
        Ok((
            FramePrediction {
                probs,
                hop_seconds: spec.hop_seconds,
            },
            maps,
        ))
    }
}

/// Drops a leading batch dimension of size one.
fn squeeze(t: Tensor) -> Tensor {
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape).expect("squeeze")
}

/// Keeps the first `frames` time steps of a `[C,T,D]` tensor.
fn crop_time(t: &Tensor, frames: usize) -> Tensor {
    let (c, tt, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let frames = frames.min(tt);
    let mut out = Vec::with_capacity(c * frames * d);
    for ch in 0..c {
        out.extend_from_slice(&t.data()[ch * tt * d..ch * tt * d + frames * d]);
    }
    Tensor::from_parts(vec![c, frames, d], out)
}
