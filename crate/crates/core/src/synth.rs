//! Waveform decoder, discriminators, emotion classifier and the synthesis
//! losses.

use rand::Rng;

use crate::apm::{EmotionEmbedding, SpeakerEmbedding};
use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv1d, ConvTranspose1d, Init, Linear};
use crate::signal::{FrameConfig, MelBank, LOG_MEL_FLOOR};
use crate::tensor::Tensor;
use crate::tpp::EmotionLabel;

const LEAKY: f64 = 0.1;

#[derive(Debug, Clone)]
struct ResBlock {
    convs: Vec<Conv1d>,
}

impl ResBlock {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, ch: usize, dilations: &[usize]) -> Self {
        init.scope(name, |i| Self {
            convs: dilations
                .iter()
                .enumerate()
                .map(|(k, &dil)| {
                    Conv1d::new(i, &format!("conv{k}"), ch, ch, 3, ConvSpec::same(3, dil))
                })
                .collect(),
        })
    }

    fn forward<'g>(&self, p: &Binding<'g, '_>, mut x: Var<'g>) -> Var<'g> {
        for c in &self.convs {
            x = x.add(c.forward(p, x.leaky_relu(LEAKY)));
        }
        x
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput<'g> {
    /// `[1, T_frames * hop]`, bounded by tanh.
    pub waveform: Var<'g>,
    pub speaker: Var<'g>,
    pub emotion: Var<'g>,
}

/// Conditioned latent to waveform through transposed-conv upsampling.
#[derive(Debug, Clone)]
pub struct Decoder {
    spk_proj: Linear,
    emo_proj: Linear,
    conv_pre: Conv1d,
    ups: Vec<(ConvTranspose1d, ResBlock)>,
    conv_post: Conv1d,
    d_latent: usize,
    hop: usize,
}

impl Decoder {
    /// `rates` must multiply to the hop size.
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        d_latent: usize,
        d_cond: usize,
        channels: usize,
        rates: &[usize],
    ) -> Self {
        init.scope("decoder", |i| {
            let spk_proj = Linear::new(i, "spk_proj", d_cond, d_latent);
            let emo_proj = Linear::new(i, "emo_proj", d_cond, d_latent);
            let conv_pre = Conv1d::same(i, "conv_pre", d_latent, channels, 7);
            let mut ch = channels;
            let mut ups = Vec::new();
            for (k, &r) in rates.iter().enumerate() {
                let out = (ch / 2).max(8);
                let up = ConvTranspose1d::upsampler(
                    i,
                    &format!("up{k}"),
                    ch,
                    out,
                    r,
                    0.1 / (r as f64).sqrt(),
                );
                let rb = ResBlock::new(i, &format!("res{k}"), out, &[1, 3]);
                ups.push((up, rb));
                ch = out;
            }
            let conv_post = Conv1d::same(i, "conv_post", ch, 1, 7);
            Self {
                spk_proj,
                emo_proj,
                conv_pre,
                ups,
                conv_post,
                d_latent,
                hop: rates.iter().product(),
            }
        })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn decode<'g>(
        &self,
        p: &Binding<'g, '_>,
        z: Var<'g>,
        spk: &SpeakerEmbedding<'g>,
        emo: &EmotionEmbedding<'g>,
    ) -> Result<GeneratorOutput<'g>> {
        if z.rows() != self.d_latent {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {}",
                self.d_latent,
                z.rows()
            )));
        }
        if z.cols() == 0 {
            return Err(Error::Shape("empty latent".into()));
        }
        let x = z
            .add_col(self.spk_proj.forward(p, spk.vector))
            .add_col(self.emo_proj.forward(p, emo.vector));
        let mut x = self.conv_pre.forward(p, x);
        for (up, rb) in &self.ups {
            x = up.forward(p, x.leaky_relu(LEAKY));
            x = rb.forward(p, x);
        }
        let waveform = self.conv_post.forward(p, x.leaky_relu(LEAKY)).tanh();
        Ok(GeneratorOutput {
            waveform,
            speaker: spk.vector,
            emotion: emo.vector,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SubReadout<'g> {
    pub logits: Var<'g>,
    pub feature_maps: Vec<Var<'g>>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorReadout<'g> {
    pub subs: Vec<SubReadout<'g>>,
}

#[derive(Debug, Clone)]
struct ConvStack {
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl ConvStack {
    fn forward<'g>(
        &self,
        p: &Binding<'g, '_>,
        mut x: Var<'g>,
        fmaps: &mut Vec<Var<'g>>,
    ) -> Var<'g> {
        for c in &self.convs {
            x = c.forward(p, x).leaky_relu(LEAKY);
            fmaps.push(x);
        }
        self.post.forward(p, x)
    }
}

fn strided<R: Rng>(
    init: &mut Init<'_, R>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> Conv1d {
    let pad = (k - 1) / 2;
    let spec = ConvSpec {
        stride,
        dilation: 1,
        pad_left: pad,
        pad_right: pad,
    };
    Conv1d::new(init, name, cin, cout, k, spec)
}

/// Raw-scale stack plus a period-2 stack whose convolutions run over each
/// phase of the waveform with shared weights.
#[derive(Debug, Clone)]
pub struct Discriminator {
    scale: ConvStack,
    period: ConvStack,
}

impl Discriminator {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, ch: usize) -> Self {
        init.scope("disc", |i| {
            let scale = i.scope("scale", |i| ConvStack {
                convs: vec![
                    strided(i, "c0", 1, ch / 4, 15, 1),
                    strided(i, "c1", ch / 4, ch / 2, 11, 4),
                    strided(i, "c2", ch / 2, ch, 11, 4),
                    strided(i, "c3", ch, ch, 5, 1),
                ],
                post: Conv1d::same(i, "post", ch, 1, 3),
            });
            let period = i.scope("period2", |i| ConvStack {
                convs: vec![
                    strided(i, "c0", 1, ch / 4, 5, 3),
                    strided(i, "c1", ch / 4, ch / 2, 5, 3),
                    strided(i, "c2", ch / 2, ch, 5, 3),
                    strided(i, "c3", ch, ch, 5, 1),
                ],
                post: Conv1d::same(i, "post", ch, 1, 3),
            });
            Self { scale, period }
        })
    }

    pub fn discriminate<'g>(
        &self,
        p: &Binding<'g, '_>,
        w: Var<'g>,
    ) -> Result<DiscriminatorReadout<'g>> {
        if w.rows() != 1 || w.cols() < 2 {
            return Err(Error::Shape(format!("discriminator input {:?}", w.shape())));
        }
        let mut fm = Vec::new();
        let logits = self.scale.forward(p, w, &mut fm);
        let scale = SubReadout {
            logits,
            feature_maps: fm,
        };

        let half = w.cols() / 2;
        let phases: Vec<Var<'g>> = (0..2)
            .map(|ph| w.gather_cols(&(0..half).map(|t| 2 * t + ph).collect::<Vec<_>>()))
            .collect();
        let mut per_phase = Vec::new();
        let mut phase_logits = Vec::new();
        for x in phases {
            let mut fm = Vec::new();
            phase_logits.push(self.period.forward(p, x, &mut fm));
            per_phase.push(fm);
        }
        let feature_maps = (0..per_phase[0].len())
            .map(|l| Var::concat_cols(&[per_phase[0][l], per_phase[1][l]]))
            .collect();
        let period = SubReadout {
            logits: Var::concat_cols(&phase_logits),
            feature_maps,
        };
        Ok(DiscriminatorReadout {
            subs: vec![scale, period],
        })
    }
}

/// Differentiable log-mel of a `[1, L]` waveform node.
#[derive(Debug, Clone)]
pub struct MelFrontEnd {
    bank: Tensor,
    cfg: FrameConfig,
}

impl MelFrontEnd {
    pub fn new(sample_rate: u32, cfg: FrameConfig) -> Self {
        Self {
            bank: MelBank::standard(sample_rate, cfg.fft_size).weights,
            cfg,
        }
    }

    pub fn log_mel<'g>(&self, g: &'g Graph, w: Var<'g>) -> Var<'g> {
        g.constant(self.bank.clone())
            .matmul(w.stft_magnitude(self.cfg))
            .log_clamp(LOG_MEL_FLOOR)
    }
}

#[derive(Debug, Clone)]
pub struct EmotionReadout<'g> {
    /// `[5, 1]`
    pub logits: Var<'g>,
    pub feature_maps: Vec<Var<'g>>,
}

/// Log-mel front end, two convolutions, mean pool, five-way head.
#[derive(Debug, Clone)]
pub struct EmotionClassifier {
    front: MelFrontEnd,
    conv1: Conv1d,
    conv2: Conv1d,
    head: Linear,
}

impl EmotionClassifier {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, front: MelFrontEnd, ch: usize) -> Self {
        let n_mels = front.bank.rows();
        init.scope("emotion_classifier", |i| Self {
            front,
            conv1: Conv1d::same(i, "conv1", n_mels, ch, 3),
            conv2: strided(i, "conv2", ch, ch, 3, 2),
            head: Linear::new(i, "head", ch, EmotionLabel::ALL.len()),
        })
    }

    pub fn classify<'g>(&self, p: &Binding<'g, '_>, w: Var<'g>) -> Result<EmotionReadout<'g>> {
        if w.rows() != 1 || w.cols() == 0 {
            return Err(Error::Shape(format!("classifier input {:?}", w.shape())));
        }
        self.classify_mel(p, self.front.log_mel(p.g, w))
    }

    /// Same network applied to an already computed log-mel.
    pub fn classify_mel<'g>(
        &self,
        p: &Binding<'g, '_>,
        mel: Var<'g>,
    ) -> Result<EmotionReadout<'g>> {
        // centre the log-mel roughly so the first layer sees unit-scale input
        let x = mel.add_scalar(5.0).scale(0.2);
        let h1 = self.conv1.forward(p, x).leaky_relu(LEAKY);
        let h2 = self.conv2.forward(p, h1).leaky_relu(LEAKY);
        Ok(EmotionReadout {
            logits: self.head.forward(p, h2.mean_cols()),
            feature_maps: vec![h1, h2],
        })
    }
}

fn check_structure(real: &[Var<'_>], fake: &[Var<'_>]) -> Result<()> {
    if real.len() != fake.len() || real.iter().zip(fake).any(|(r, f)| r.shape() != f.shape()) {
        return Err(Error::Shape("readout structure mismatch".into()));
    }
    Ok(())
}

/// Least-squares objectives summed over sub-discriminators:
/// `(adv_G, adv_D)`.
pub fn adversarial_losses<'g>(
    real: &DiscriminatorReadout<'g>,
    fake: &DiscriminatorReadout<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    if real.subs.is_empty() || real.subs.len() != fake.subs.len() {
        return Err(Error::Shape("readout structure mismatch".into()));
    }
    let mut adv_g: Option<Var<'g>> = None;
    let mut adv_d: Option<Var<'g>> = None;
    for (r, f) in real.subs.iter().zip(&fake.subs) {
        check_structure(&[r.logits], &[f.logits])?;
        let g = f.logits.add_scalar(-1.0).square().mean();
        let d = r
            .logits
            .add_scalar(-1.0)
            .square()
            .mean()
            .add(f.logits.square().mean());
        adv_g = Some(adv_g.map_or(g, |a| a.add(g)));
        adv_d = Some(adv_d.map_or(d, |a| a.add(d)));
    }
    Ok((adv_g.unwrap(), adv_d.unwrap()))
}

/// Generator-side adversarial loss alone.
pub fn generator_adversarial_loss<'g>(fake: &DiscriminatorReadout<'g>) -> Var<'g> {
    fake.subs
        .iter()
        .map(|f| f.logits.add_scalar(-1.0).square().mean())
        .reduce(|a, b| a.add(b))
        .expect("nonempty readout")
}

/// Sum over layers of the mean absolute difference.
pub fn feature_matching<'g>(real: &[Var<'g>], fake: &[Var<'g>]) -> Result<Var<'g>> {
    check_structure(real, fake)?;
    real.iter()
        .zip(fake)
        .map(|(r, f)| r.sub(*f).abs().mean())
        .reduce(|a, b| a.add(b))
        .ok_or_else(|| Error::Shape("no feature maps".into()))
}

fn flatten_fmaps<'g>(r: &DiscriminatorReadout<'g>) -> Vec<Var<'g>> {
    r.subs
        .iter()
        .flat_map(|s| s.feature_maps.iter().copied())
        .collect()
}

/// `(recon_cls, recon_fm)`: mel mean-L1 and discriminator feature matching.
pub fn reconstruction_losses<'g>(
    real_mel: Var<'g>,
    fake_mel: Var<'g>,
    real: &DiscriminatorReadout<'g>,
    fake: &DiscriminatorReadout<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    if real_mel.shape() != fake_mel.shape() {
        return Err(Error::Shape(format!(
            "mel {:?} vs {:?}",
            real_mel.shape(),
            fake_mel.shape()
        )));
    }
    let cls = real_mel.sub(fake_mel).abs().mean();
    let fm = feature_matching(&flatten_fmaps(real), &flatten_fmaps(fake))?;
    Ok((cls, fm))
}

/// `(emo_cls, emo_fm)`: cross-entropy of the generated audio towards the
/// target label and feature matching against the real recording.
pub fn emotion_losses<'g>(
    fake: &EmotionReadout<'g>,
    real: &EmotionReadout<'g>,
    target: EmotionLabel,
) -> Result<(Var<'g>, Var<'g>)> {
    let cls = fake.logits.cross_entropy(target.index());
    let fm = feature_matching(&real.feature_maps, &fake.feature_maps)?;
    Ok((cls, fm))
}
