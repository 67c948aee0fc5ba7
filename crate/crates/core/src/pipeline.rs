//! End-to-end relay system: module groups, forward graphs, and parameter partition.
//!
//! Forward graph (MTML-RSC): the source encodes `x_s` and broadcasts it over
//! the SR and SD links. The relay decodes `ŝ_r`, classifies it, re-encodes it
//! with the class-aided encoder, and forwards it over the RD link. The
//! destination fuses the SD and RD signals for its classifier and decodes
//! the RD signal with the class-aided decoder.
//!
//! The baseline drops the SD link, the relay classifier, the fusion, and the
//! label gates; its destination classifier reads the RD signal.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{transmit_tensor, LinkConfig, LinkRealization, RelayLinks};
use crate::class_codec::{ClassAidedDecoder, ClassAidedEncoder};
use crate::classifier::{predict, ImageClassifier, SignalClassifier};
use crate::codec::{CodecSpec, JsccDecoder, JsccEncoder};
use crate::config::{DecoderInput, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionSpec, MutualAttention};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    MtmlRsc,
    Baseline,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::MtmlRsc, Scheme::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::MtmlRsc => "mtml_rsc",
            Scheme::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mtml_rsc" | "mtml" => Ok(Scheme::MtmlRsc),
            "baseline" => Ok(Scheme::Baseline),
            other => Err(Error::invalid("scheme", format!("unknown scheme `{other}`"))),
        }
    }

    /// Stage-3 parameter group of this scheme.
    pub fn group(self) -> ModuleGroup {
        match self {
            Scheme::MtmlRsc => ModuleGroup::MtmlDestination,
            Scheme::Baseline => ModuleGroup::BaselineRelay,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Disjoint parameter groups; each is trained in exactly one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleGroup {
    /// Source JSCC encoder and relay JSCC decoder.
    SourceRelayCodec,
    RelayClassifier,
    /// Class-aided relay encoder, class-aided destination decoder, destination classifier, fusion.
    MtmlDestination,
    /// Plain relay encoder, plain destination decoder, destination classifier.
    BaselineRelay,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 4] = [
        ModuleGroup::SourceRelayCodec,
        ModuleGroup::RelayClassifier,
        ModuleGroup::MtmlDestination,
        ModuleGroup::BaselineRelay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleGroup::SourceRelayCodec => "source_relay_codec",
            ModuleGroup::RelayClassifier => "relay_classifier",
            ModuleGroup::MtmlDestination => "mtml_destination",
            ModuleGroup::BaselineRelay => "baseline_relay",
        }
    }

    pub fn stage(self) -> u8 {
        match self {
            ModuleGroup::SourceRelayCodec => 1,
            ModuleGroup::RelayClassifier => 2,
            ModuleGroup::MtmlDestination | ModuleGroup::BaselineRelay => 3,
        }
    }

    pub fn checkpoint_file(self) -> String {
        format!("stage{}_{}.safetensors", self.stage(), self.name())
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone)]
pub struct LinkTrace {
    pub link: LinkConfig,
    pub realization: LinkRealization,
    /// Equalized packed signal `(batch, n, l)`.
    pub equalized: Tensor,
}

#[derive(Debug, Clone)]
pub struct ReceivedSignals {
    pub source_relay: LinkTrace,
    /// Absent in the baseline, which has no direct link.
    pub source_dest: Option<LinkTrace>,
    pub relay_dest: LinkTrace,
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub source_signal: Tensor,
    pub relay_recon: Tensor,
    /// Absent in the baseline.
    pub relay_logits: Option<Tensor>,
    pub dest_logits: Tensor,
    pub dest_recon: Tensor,
    pub received: ReceivedSignals,
    /// Labels fed to the class-aided relay encoder, when one ran.
    pub relay_labels_used: Option<Vec<u32>>,
    /// Labels fed to the class-aided destination decoder, when one ran.
    pub dest_labels_used: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Stage1Outputs {
    pub source_signal: Tensor,
    pub received: LinkTrace,
    pub relay_recon: Tensor,
}

/// Where class labels for the codecs come from.
enum Conditioning<'a> {
    GroundTruth(&'a [u32]),
    Predicted,
}

/// Independent per-link noise streams drawn from one caller RNG, so both
/// schemes see identical SR and RD realizations for the same seed.
struct LinkRngs {
    sr: ChaCha8Rng,
    sd: ChaCha8Rng,
    rd: ChaCha8Rng,
}

impl LinkRngs {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            sr: ChaCha8Rng::seed_from_u64(rng.gen()),
            sd: ChaCha8Rng::seed_from_u64(rng.gen()),
            rd: ChaCha8Rng::seed_from_u64(rng.gen()),
        }
    }
}

#[derive(Debug, Clone)]
struct MtmlModules {
    relay_encoder: ClassAidedEncoder,
    dest_decoder: ClassAidedDecoder,
    dest_classifier: SignalClassifier,
    fusion: MutualAttention,
}

#[derive(Debug, Clone)]
struct BaselineModules {
    relay_encoder: JsccEncoder,
    dest_decoder: JsccDecoder,
    dest_classifier: SignalClassifier,
}

#[derive(Debug)]
pub struct RelaySystem {
    cfg: ExperimentConfig,
    spec: CodecSpec,
    links: RelayLinks,
    stores: [ParamStore; 4],
    ready: [bool; 4],
    source_encoder: JsccEncoder,
    relay_decoder: JsccDecoder,
    relay_classifier: ImageClassifier,
    mtml: MtmlModules,
    baseline: BaselineModules,
}

fn group_seed(seed: u64, group: ModuleGroup) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (group.index() as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

impl RelaySystem {
    pub fn new(cfg: &ExperimentConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let spec = CodecSpec::from_config(cfg)?;
        let stores = ModuleGroup::ALL.map(|g| ParamStore::new(group_seed(cfg.seed, g), dtype, device));
        let [s1, s2, s3, sb] = &stores;
        let fusion_spec = FusionSpec {
            n_groups: spec.n_patches(),
            patch_len: spec.patch_len,
            heads: cfg.fusion_heads,
            head_dim: cfg.fusion_head_dim,
            proj_len: cfg.fusion_proj_len,
        };

        let source_encoder = JsccEncoder::new(&spec, &s1.root().pp("source_encoder"))?;
        let relay_decoder = JsccDecoder::new(&spec, &s1.root().pp("relay_decoder"))?;
        let relay_classifier = ImageClassifier::new(&spec, &s2.root().pp("classifier"))?;
        let baseline = BaselineModules {
            relay_encoder: JsccEncoder::new(&spec, &sb.root().pp("relay_encoder"))?,
            dest_decoder: JsccDecoder::new(&spec, &sb.root().pp("dest_decoder"))?,
            dest_classifier: SignalClassifier::new(&spec, &sb.root().pp("dest_classifier"))?,
        };
        let m = s3.root();
        let mtml = MtmlModules {
            relay_encoder: ClassAidedEncoder::new(&spec, &m.pp("relay_encoder"))?,
            dest_decoder: ClassAidedDecoder::new(&spec, &m.pp("dest_decoder"))?,
            dest_classifier: SignalClassifier::new(&spec, &m.pp("dest_classifier"))?,
            fusion: MutualAttention::new(&fusion_spec, &m.pp("fusion"))?,
        };
        // Both schemes start stage 3 from the same codec and classifier weights.
        let mut shared = std::collections::BTreeMap::new();
        for (name, var) in sb.named_vars() {
            let target = match name.split_once('.') {
                Some((head @ ("relay_encoder" | "dest_decoder"), rest)) => format!("{head}.backbone.{rest}"),
                _ => name.clone(),
            };
            shared.insert(target, var.as_tensor().clone());
        }
        s3.assign_all(&shared)?;

        Ok(Self {
            cfg: cfg.clone(),
            links: RelayLinks::from_config(cfg),
            spec,
            stores,
            ready: [false; 4],
            source_encoder,
            relay_decoder,
            relay_classifier,
            mtml,
            baseline,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn links(&self) -> &RelayLinks {
        &self.links
    }

    pub fn store(&self, group: ModuleGroup) -> &ParamStore {
        &self.stores[group.index()]
    }

    pub fn dtype(&self) -> DType {
        self.stores[0].dtype()
    }

    pub fn device(&self) -> &Device {
        self.stores[0].device()
    }

    /// True once the group was trained or loaded from a checkpoint.
    pub fn is_ready(&self, group: ModuleGroup) -> bool {
        self.ready[group.index()]
    }

    pub fn mark_ready(&mut self, group: ModuleGroup) {
        self.ready[group.index()] = true;
    }

    /// Errors unless every listed group is ready.
    pub fn require_ready(&self, groups: &[ModuleGroup], for_what: &str) -> Result<()> {
        let missing: Vec<&str> = groups
            .iter()
            .filter(|g| !self.is_ready(**g))
            .map(|g| g.name())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::StageOrder(format!(
                "{for_what} needs trained {}",
                missing.join(", ")
            )))
        }
    }

    fn send<R: Rng + ?Sized>(&self, x: &Tensor, link: &LinkConfig, rng: &mut R) -> Result<LinkTrace> {
        let (equalized, realization) = transmit_tensor(x, link, self.links.equalizer, self.links.power, rng)?;
        Ok(LinkTrace {
            link: *link,
            realization,
            equalized,
        })
    }

    /// Source encoder, SR link, relay decoder.
    pub fn forward_stage1<R: Rng + ?Sized>(&self, images: &Tensor, rng: &mut R) -> Result<Stage1Outputs> {
        let mut rngs = LinkRngs::draw(rng);
        let x_s = self.source_encoder.encode(images)?;
        let received = self.send(&x_s, &self.links.source_relay, &mut rngs.sr)?;
        let relay_recon = self.relay_decoder.decode(&received.equalized)?;
        Ok(Stage1Outputs {
            source_signal: x_s,
            received,
            relay_recon,
        })
    }

    /// Relay classifier logits on detached relay reconstructions.
    pub fn forward_stage2<R: Rng + ?Sized>(&self, images: &Tensor, rng: &mut R) -> Result<(Tensor, Tensor)> {
        let s1 = self.forward_stage1(images, rng)?;
        let recon = s1.relay_recon.detach();
        let logits = self.relay_classifier.classify_image(&recon)?;
        Ok((recon, logits))
    }

    /// Stage-1 front end with its outputs cut from the graph.
    fn front_end(&self, images: &Tensor, rngs: &mut LinkRngs, direct: bool) -> Result<(Tensor, LinkTrace, Option<LinkTrace>, Tensor)> {
        let x_s = self.source_encoder.encode(images)?.detach();
        let sr = self.send(&x_s, &self.links.source_relay, &mut rngs.sr)?;
        let sd = if direct {
            Some(self.send(&x_s, &self.links.source_dest, &mut rngs.sd)?)
        } else {
            None
        };
        let relay_recon = self.relay_decoder.decode(&sr.equalized)?.detach();
        Ok((x_s, sr, sd, relay_recon))
    }

    fn forward_mtml<R: Rng + ?Sized>(&self, images: &Tensor, cond: Conditioning, rng: &mut R) -> Result<ForwardOutputs> {
        let mut rngs = LinkRngs::draw(rng);
        let (x_s, sr, sd, relay_recon) = self.front_end(images, &mut rngs, true)?;
        let sd = sd.expect("direct link requested");
        let relay_logits = self.relay_classifier.classify_image(&relay_recon)?.detach();
        let relay_labels = match cond {
            Conditioning::GroundTruth(z) => z.to_vec(),
            Conditioning::Predicted => predict(&relay_logits)?,
        };
        let x_r = self.mtml.relay_encoder.encode_with_class(&relay_recon, &relay_labels)?;
        let rd = self.send(&x_r, &self.links.relay_dest, &mut rngs.rd)?;
        let fused = self.mtml.fusion.fuse(&sd.equalized, &rd.equalized)?;
        let dest_logits = self.mtml.dest_classifier.classify_signal(&fused)?;
        let dest_labels = match cond {
            Conditioning::GroundTruth(z) => z.to_vec(),
            Conditioning::Predicted => predict(&dest_logits)?,
        };
        let decoder_in = match self.cfg.decoder_input {
            DecoderInput::RdLink => &rd.equalized,
            DecoderInput::Fused => &fused,
        };
        let dest_recon = self.mtml.dest_decoder.decode_with_class(decoder_in, &dest_labels)?;
        Ok(ForwardOutputs {
            source_signal: x_s,
            relay_recon,
            relay_logits: Some(relay_logits),
            dest_logits,
            dest_recon,
            received: ReceivedSignals {
                source_relay: sr,
                source_dest: Some(sd),
                relay_dest: rd,
            },
            relay_labels_used: Some(relay_labels),
            dest_labels_used: Some(dest_labels),
        })
    }

    /// Training-mode forward: both class-aided codecs are conditioned on `labels`.
    pub fn forward_mtml_train<R: Rng + ?Sized>(&self, images: &Tensor, labels: &[u32], rng: &mut R) -> Result<ForwardOutputs> {
        if labels.len() != images.dim(0)? {
            return Err(Error::LengthMismatch {
                left: images.dim(0)?,
                right: labels.len(),
            });
        }
        self.forward_mtml(images, Conditioning::GroundTruth(labels), rng)
    }

    /// Inference-mode forward: the relay encoder uses the relay's prediction and
    /// the destination decoder uses the destination's prediction.
    pub fn forward_mtml_infer<R: Rng + ?Sized>(&self, images: &Tensor, rng: &mut R) -> Result<ForwardOutputs> {
        self.forward_mtml(images, Conditioning::Predicted, rng)
    }

    pub fn forward_baseline<R: Rng + ?Sized>(&self, images: &Tensor, rng: &mut R) -> Result<ForwardOutputs> {
        let mut rngs = LinkRngs::draw(rng);
        let (x_s, sr, _, relay_recon) = self.front_end(images, &mut rngs, false)?;
        let x_r = self.baseline.relay_encoder.encode(&relay_recon)?;
        let rd = self.send(&x_r, &self.links.relay_dest, &mut rngs.rd)?;
        let dest_logits = self.baseline.dest_classifier.classify_signal(&rd.equalized)?;
        let dest_recon = self.baseline.dest_decoder.decode(&rd.equalized)?;
        Ok(ForwardOutputs {
            source_signal: x_s,
            relay_recon,
            relay_logits: None,
            dest_logits,
            dest_recon,
            received: ReceivedSignals {
                source_relay: sr,
                source_dest: None,
                relay_dest: rd,
            },
            relay_labels_used: None,
            dest_labels_used: None,
        })
    }

    /// Class-aided destination decoder alone, for label-sensitivity probes.
    pub fn decode_with_class(&self, y: &Tensor, labels: &[u32]) -> Result<Tensor> {
        self.mtml.dest_decoder.decode_with_class(y, labels)
    }

    pub fn class_aided_encoder(&self) -> &ClassAidedEncoder {
        &self.mtml.relay_encoder
    }

    pub fn class_aided_decoder(&self) -> &ClassAidedDecoder {
        &self.mtml.dest_decoder
    }

    pub fn source_encoder(&self) -> &JsccEncoder {
        &self.source_encoder
    }

    pub fn relay_decoder(&self) -> &JsccDecoder {
        &self.relay_decoder
    }

    pub fn fusion(&self) -> &MutualAttention {
        &self.mtml.fusion
    }

    /// Plain relay encoder of the baseline.
    pub fn baseline_encoder(&self) -> &JsccEncoder {
        &self.baseline.relay_encoder
    }

    pub fn baseline_decoder(&self) -> &JsccDecoder {
        &self.baseline.dest_decoder
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            image_size: 16,
            widths: [8, 16],
            blocks: [1, 1],
            ..Default::default()
        }
    }

    #[test]
    fn stores_are_disjoint_and_group_names_unique() {
        let sys = RelaySystem::new(&cfg(), DType::F32, &Device::Cpu).unwrap();
        let mut names = std::collections::BTreeSet::new();
        for g in ModuleGroup::ALL {
            assert!(!sys.store(g).is_empty(), "{}", g.name());
            for (n, _) in sys.store(g).named_vars() {
                assert!(names.insert(format!("{}:{n}", g.name())));
            }
        }
    }

    #[test]
    fn schemes_share_initial_backbones() {
        let sys = RelaySystem::new(&cfg(), DType::F32, &Device::Cpu).unwrap();
        let m = sys.store(ModuleGroup::MtmlDestination);
        let b = sys.store(ModuleGroup::BaselineRelay);
        let a: Vec<f32> = m.get("relay_encoder.backbone.head.weight").unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let c: Vec<f32> = b.get("relay_encoder.head.weight").unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn baseline_and_mtml_shapes_agree() {
        let sys = RelaySystem::new(&cfg(), DType::F32, &Device::Cpu).unwrap();
        let img = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sys.forward_mtml_infer(&img, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sys.forward_baseline(&img, &mut rng).unwrap();
        assert!(b.relay_logits.is_none());
        assert_eq!(m.dest_recon.dims(), b.dest_recon.dims());
        assert_eq!(m.dest_logits.dims(), b.dest_logits.dims());
        assert_eq!(m.relay_recon.dims(), &[2, 3, 16, 16]);
        // Same seed: identical SR link realizations and relay reconstructions.
        assert_eq!(m.received.source_relay.realization, b.received.source_relay.realization);
        assert_eq!(m.received.relay_dest.realization, b.received.relay_dest.realization);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let sys = RelaySystem::new(&cfg(), DType::F32, &Device::Cpu).unwrap();
        let img = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let out = sys.forward_mtml_train(&img, &[0, 1], &mut rng).unwrap();
            out.dest_recon.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(), run());
    }
}
