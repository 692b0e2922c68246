//! The two-stream re-identification network and its checkpoint.

use std::path::Path;

use agm_autograd::{ParamId, ParamStore, Sgd, Tensor, Var};

use super::config::{BranchMode, TrainConfig};
use crate::backbone::{BranchNet, BranchTag, EmbeddingBatch, GemPooler};
use crate::ckpt::{self, Container};
use crate::error::{AgmError, Result};
use crate::ganstyle::GanModel;
use crate::imaging::{self, Image};
use crate::losses::{self, LossConfig, ReidTerms};
use crate::nn::{Ctx, Linear};
use crate::seed;

/// Encoder, pooler and classifier of one specific branch.
#[derive(Clone, Debug)]
pub struct Branch {
    pub net: BranchNet,
    pub gem: GemPooler,
    pub head: Linear,
}

fn init_rng(seed_value: u64, part: &str) -> rand_chacha::ChaCha8Rng {
    seed::rng(seed_value, &[seed::tag("init"), seed::tag(part)])
}

impl Branch {
    fn new(
        store: &mut ParamStore,
        tag: BranchTag,
        (h, w): (usize, usize),
        cfg: &TrainConfig,
        num_classes: usize,
    ) -> Result<Self> {
        let c = cfg.channels;
        let net = BranchNet::new(store, tag, h, w, c, &mut init_rng(cfg.seed, tag.as_str()))?;
        let gem = GemPooler::new(store, tag.as_str(), cfg.per_channel_gem.then_some(c));
        let name = format!("{tag}.classifier");
        let head = Linear::new(store, &name, c, num_classes, &mut init_rng(cfg.seed, &name));
        Ok(Branch { net, gem, head })
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.net.param_ids();
        ids.push(self.gem.p);
        ids.push(self.head.weight);
        ids
    }
}

/// Global branch, optional head-shoulder branch and, when both exist, the
/// joint classifier over their concatenated embeddings.
pub struct ReidModel {
    pub store: ParamStore,
    pub global: Branch,
    pub head_shoulder: Option<Branch>,
    pub joint_head: Option<Linear>,
    pub num_classes: usize,
}

/// Tape handles for one forward pass of the objective.
pub struct ObjectiveVars {
    pub terms: [(&'static str, Option<Var>); 6],
    pub kl_g: Option<Var>,
    pub kl_h: Option<Var>,
    /// Pooled global, head-shoulder and joint embeddings.
    pub v_g: Var,
    pub v_h: Option<Var>,
    pub v_joint: Option<Var>,
    /// Joint posterior used as the KL teacher, held constant on the tape.
    pub teacher: Option<Tensor>,
    /// Sum of every present term.
    pub total: Var,
}

impl ObjectiveVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.terms.iter().find(|(n, _)| *n == name).and_then(|(_, v)| *v)
    }

    /// Values of every term; absent terms report zero.
    pub fn values(&self, cx: &Ctx) -> ReidTerms {
        let v = |x: Option<Var>| x.map_or(0.0, |x| cx.value(x).item());
        ReidTerms {
            id_g: v(self.get("l_id_g")),
            id_h: v(self.get("l_id_h")),
            id_joint: v(self.get("l_id_joint")),
            t_g: v(self.get("l_t_g")),
            t_h: v(self.get("l_t_h")),
            t_joint: v(self.get("l_t_joint")),
            kl_g: v(self.kl_g),
            kl_h: v(self.kl_h),
        }
    }
}

impl ReidModel {
    /// Every component draws its initial weights from its own stream, so a
    /// global-only model and a two-stream model with the same seed share
    /// their global branch exactly.
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(AgmError::Data(format!("need at least 2 identities, got {num_classes}")));
        }
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let global = Branch::new(&mut store, BranchTag::Global, cfg.global_size, cfg, num_classes)?;
        let (head_shoulder, joint_head) = match cfg.branches {
            BranchMode::GlobalOnly => (None, None),
            BranchMode::TwoStream => {
                let hs = Branch::new(&mut store, BranchTag::HeadShoulder, cfg.head_size, cfg, num_classes)?;
                let mut rng = init_rng(cfg.seed, "joint.classifier");
                let joint = Linear::new(&mut store, "joint.classifier", 2 * c, num_classes, &mut rng);
                (Some(hs), Some(joint))
            }
        };
        Ok(ReidModel {
            store,
            global,
            head_shoulder,
            joint_head,
            num_classes,
        })
    }

    pub fn global_param_ids(&self) -> Vec<ParamId> {
        self.global.param_ids()
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        self.head_shoulder.as_ref().map(Branch::param_ids).unwrap_or_default()
    }

    pub fn joint_param_ids(&self) -> Vec<ParamId> {
        self.joint_head.iter().map(|j| j.weight).collect()
    }

    pub fn clamp_gem(&mut self) {
        self.global.gem.clamp(&mut self.store);
        if let Some(h) = &self.head_shoulder {
            h.gem.clamp(&mut self.store);
        }
    }

    /// Pooled embeddings `(v_g, v_h)` for NCHW inputs. The head-shoulder
    /// branch runs frozen when `freeze_head` is set.
    pub fn embed_vars(&self, cx: &mut Ctx, xg: Var, xh: Option<Var>, freeze_head: bool) -> Result<(Var, Option<Var>)> {
        let fg = self.global.net.forward(cx, xg)?;
        let vg = self.global.gem.forward(cx, fg);
        let vh = match (&self.head_shoulder, xh) {
            (Some(h), Some(xh)) => {
                let was = cx.is_frozen();
                cx.set_frozen(was || freeze_head);
                let fh = h.net.forward(cx, xh);
                let out = fh.map(|fh| h.gem.forward(cx, fh));
                cx.set_frozen(was);
                Some(out?)
            }
            (Some(_), None) => {
                return Err(AgmError::Precondition("two-stream model needs head-shoulder inputs".into()));
            }
            (None, _) => None,
        };
        Ok((vg, vh))
    }

    /// Records the full objective on the tape. Each specific branch's
    /// identity loss carries the KL feedback from the joint posterior, which
    /// enters as a constant teacher.
    pub fn objective(
        &self,
        cx: &mut Ctx,
        xg: Var,
        xh: Option<Var>,
        labels: &[u32],
        cfg: &TrainConfig,
    ) -> Result<ObjectiveVars> {
        self.objective_with_teacher(cx, xg, xh, labels, cfg, None)
    }

    /// [`ReidModel::objective`] with the KL teacher pinned to `teacher`
    /// instead of the current joint posterior. Finite-difference checks use
    /// this to hold the stop-gradient target fixed.
    pub fn objective_with_teacher(
        &self,
        cx: &mut Ctx,
        xg: Var,
        xh: Option<Var>,
        labels: &[u32],
        cfg: &TrainConfig,
        teacher: Option<&Tensor>,
    ) -> Result<ObjectiveVars> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(AgmError::Data(format!(
                "label {bad} exceeds the classifier's {} identities",
                self.num_classes
            )));
        }
        let loss: &LossConfig = &cfg.loss;
        let (vg, vh) = self.embed_vars(cx, xg, xh, cfg.freeze_head_shoulder)?;
        let posterior = |cx: &mut Ctx, head: &Linear, v: Var| {
            let logits = head.forward(cx, v);
            cx.graph.softmax_rows(logits)
        };
        let pg = posterior(cx, &self.global.head, vg);
        let t_g = losses::hard_triplet_var(&mut cx.graph, vg, labels, loss.xi)?;
        let ce_g = losses::identity_ce_var(&mut cx.graph, pg, labels);

        let (Some(h), Some(vh), Some(joint)) = (&self.head_shoulder, vh, &self.joint_head) else {
            let total = cx.graph.add(ce_g, t_g);
            return Ok(ObjectiveVars {
                terms: [
                    ("l_id_g", Some(ce_g)),
                    ("l_id_h", None),
                    ("l_id_joint", None),
                    ("l_t_g", Some(t_g)),
                    ("l_t_h", None),
                    ("l_t_joint", None),
                ],
                kl_g: None,
                kl_h: None,
                v_g: vg,
                v_h: None,
                v_joint: None,
                teacher: None,
                total,
            });
        };

        let was = cx.is_frozen();
        cx.set_frozen(was || cfg.freeze_head_shoulder);
        let ph = posterior(cx, &h.head, vh);
        cx.set_frozen(was);
        let t_h = losses::hard_triplet_var(&mut cx.graph, vh, labels, loss.xi)?;
        let ce_h = losses::identity_ce_var(&mut cx.graph, ph, labels);

        let vj = cx.graph.concat_cols(vg, vh);
        let pj = posterior(cx, joint, vj);
        let teacher = match teacher {
            Some(t) => t.clone(),
            None => cx.value(pj).clone(),
        };
        let kl_g = losses::kl_feedback_var(&mut cx.graph, &teacher, pg);
        let kl_h = losses::kl_feedback_var(&mut cx.graph, &teacher, ph);
        let id_g = {
            let w = cx.graph.scale(kl_g, loss.lambda3);
            cx.graph.add(ce_g, w)
        };
        let id_h = {
            let w = cx.graph.scale(kl_h, loss.lambda4);
            cx.graph.add(ce_h, w)
        };
        let (id_j, t_j) = if cfg.joint_losses {
            let id_j = losses::joint_hybrid_var(&mut cx.graph, pj, labels, loss)?;
            let t_j = losses::hard_triplet_var(&mut cx.graph, vj, labels, loss.xi)?;
            (Some(id_j), Some(t_j))
        } else {
            (None, None)
        };
        let terms = [
            ("l_id_g", Some(id_g)),
            ("l_id_h", Some(id_h)),
            ("l_id_joint", id_j),
            ("l_t_g", Some(t_g)),
            ("l_t_h", Some(t_h)),
            ("l_t_joint", t_j),
        ];
        let total = sum_present(cx, terms.iter().filter_map(|(_, v)| *v));
        Ok(ObjectiveVars {
            terms,
            kl_g: Some(kl_g),
            kl_h: Some(kl_h),
            v_g: vg,
            v_h: Some(vh),
            v_joint: Some(vj),
            teacher: Some(teacher),
            total,
        })
    }

    /// Retrieval embeddings in evaluation mode: the joint vector for a
    /// two-stream model, the global vector otherwise. Labels are copied from
    /// the images.
    pub fn embed_images(&self, images: &[Image]) -> Result<EmbeddingBatch> {
        const CHUNK: usize = 32;
        let mut rows: Vec<f64> = Vec::new();
        let mut dim = 0;
        for chunk in images.chunks(CHUNK) {
            let globals: Vec<&Image> = chunk.iter().collect();
            let xg_t = imaging::to_tensor(&globals)?;
            let xh_t = match &self.head_shoulder {
                Some(h) => Some(head_tensor(chunk, h.net.input_h, h.net.input_w)?),
                None => None,
            };
            let mut cx = Ctx::eval(&self.store);
            let xg = cx.graph.constant(xg_t);
            let xh = xh_t.map(|t| cx.graph.constant(t));
            let (vg, vh) = self.embed_vars(&mut cx, xg, xh, false)?;
            let v = match vh {
                Some(vh) => cx.graph.concat_cols(vg, vh),
                None => vg,
            };
            let t = cx.value(v);
            dim = t.shape()[1];
            rows.extend_from_slice(t.data());
        }
        let labels = images.iter().map(|i| i.identity).collect();
        let tag = if self.head_shoulder.is_some() {
            BranchTag::Joint
        } else {
            BranchTag::Global
        };
        EmbeddingBatch::new(Tensor::new(&[images.len(), dim], rows), labels, tag)
    }
}

fn sum_present(cx: &mut Ctx, mut vars: impl Iterator<Item = Var>) -> Var {
    let first = vars.next().expect("objective has at least one term");
    vars.fold(first, |acc, v| cx.graph.add(acc, v))
}

/// Head-shoulder inputs: upper-third crop of each global image resized to
/// the branch resolution.
pub fn head_shoulder_images(images: &[Image], h: usize, w: usize) -> Result<Vec<Image>> {
    images
        .iter()
        .map(|img| imaging::resize(&imaging::crop_head_shoulder(img)?, h, w))
        .collect()
}

fn head_tensor(images: &[Image], h: usize, w: usize) -> Result<Tensor> {
    let hs = head_shoulder_images(images, h, w)?;
    imaging::to_tensor(&hs.iter().collect::<Vec<_>>())
}

/// A trained network plus everything needed to reproduce its inputs: the
/// configuration (including the image-space mode) and, for translated
/// modes, the embedded translator.
pub struct ReidCheckpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub model: ReidModel,
    pub gn: Option<GanModel>,
    /// Original dataset identity for each classifier index.
    pub original_ids: Vec<u32>,
    /// Momentum buffers keyed by parameter name.
    pub velocity: Vec<(String, Tensor)>,
}

pub const REID_KIND: &str = "reid";
const GN_PREFIX: &str = "gn.";
const MODEL_PREFIX: &str = "model.";
const VELOCITY_PREFIX: &str = "velocity.";

impl ReidCheckpoint {
    pub fn capture(
        config: &TrainConfig,
        epoch: usize,
        model: &ReidModel,
        gn: Option<&GanModel>,
        original_ids: &[u32],
        opt: Option<&Sgd>,
    ) -> Container {
        let mut c = Container::new(serde_json::json!({
            "kind": REID_KIND,
            "format_version": ckpt::FORMAT_VERSION,
            "epoch": epoch,
            "seed": config.seed,
            "config_hash": config.hash(),
            "config": config,
            "num_classes": model.num_classes,
            "original_ids": original_ids,
            "has_gn": gn.is_some(),
        }));
        c.push_store(&model.store, MODEL_PREFIX);
        if let Some(opt) = opt {
            for id in model.store.ids() {
                if let Some(v) = opt.velocity(id) {
                    c.blocks.push((format!("{VELOCITY_PREFIX}{}", model.store.name(id)), v.clone()));
                }
            }
        }
        if let Some(gn) = gn {
            gn.write_into(&mut c, GN_PREFIX);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind = c.header.get("kind").and_then(|k| k.as_str());
        if kind != Some(REID_KIND) {
            return Err(AgmError::Checkpoint(format!("expected a re-identification checkpoint, found kind {kind:?}")));
        }
        fn field<T: serde::de::DeserializeOwned>(c: &Container, name: &str) -> Result<T> {
            let v = c
                .header
                .get(name)
                .ok_or_else(|| AgmError::Checkpoint(format!("header lacks {name}")))?;
            serde_json::from_value(v.clone()).map_err(|e| AgmError::Checkpoint(format!("bad header field {name}: {e}")))
        }
        let config: TrainConfig = field(c, "config")?;
        let epoch: usize = field(c, "epoch")?;
        let num_classes: usize = field(c, "num_classes")?;
        let original_ids: Vec<u32> = field(c, "original_ids")?;
        let has_gn: bool = field(c, "has_gn")?;
        let hash: String = field(c, "config_hash")?;
        if hash != config.hash() {
            return Err(AgmError::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut model = ReidModel::new(&config, num_classes)?;
        c.fill_store(&mut model.store, MODEL_PREFIX)?;
        let gn = if has_gn {
            Some(GanModel::read_from(c, GN_PREFIX)?)
        } else {
            None
        };
        let velocity = c
            .blocks
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(VELOCITY_PREFIX).map(|n| (n.to_string(), t.clone())))
            .collect();
        Ok(ReidCheckpoint {
            config,
            epoch,
            model,
            gn,
            original_ids,
            velocity,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
