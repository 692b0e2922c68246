//! Grayscale normalization: an unpaired two-generator, two-discriminator
//! translation system between the grayscale domain and the infrared domain.
//!
//! `G` maps grayscale to infrared and `F` maps infrared to grayscale. `D_A`
//! scores grayscale realness and `D_B` infrared realness. Pixels enter the
//! networks scaled to `[-1, 1]`; 8-bit rasters appear only at the boundary.

mod nets;

use std::path::Path;

use agm_autograd::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ckpt::{self, Container};
use crate::error::{AgmError, Result};
use crate::imaging::{self, GrayscaleCoeffs, Image, Modality};
use crate::kv::KeyValues;
use crate::losses::LossBundle;
use crate::nn::Ctx;
use crate::seed;

pub use nets::{Discriminator, GanArch, Generator, GeneratorInit};

/// Clamp applied to discriminator scores inside logarithms.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// `−ln D(real) − ln(1 − D(fake))` for the discriminator and
    /// `−ln D(fake)` for the generator.
    Log,
    /// Squared distance of scores to their targets.
    LeastSquares,
}

impl std::str::FromStr for AdversarialForm {
    type Err = AgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "log" => Ok(AdversarialForm::Log),
            "least_squares" | "lsgan" => Ok(AdversarialForm::LeastSquares),
            other => Err(AgmError::Config(format!(
                "unknown adversarial form {other:?}; expected log or least_squares"
            ))),
        }
    }
}

/// Keys understood by [`GanConfig::apply`].
pub const GAN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "lambda1",
    "lambda2",
    "seed",
    "adversarial",
    "gen_channels",
    "residual_blocks",
    "disc_channels",
    "gen_init",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    /// Cycle-consistency weight.
    pub lambda1: f64,
    /// Identity-mapping weight.
    pub lambda2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adversarial: AdversarialForm,
    pub arch: GanArch,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            lambda1: 10.0,
            lambda2: 5.0,
            epochs: 10,
            batch_size: 4,
            learning_rate: 2e-4,
            seed: 0,
            adversarial: AdversarialForm::Log,
            arch: GanArch::default(),
        }
    }
}

impl GanConfig {
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set(&mut self.epochs, "epochs")?;
        kv.set(&mut self.batch_size, "batch_size")?;
        kv.set(&mut self.learning_rate, "learning_rate")?;
        kv.set(&mut self.lambda1, "lambda1")?;
        kv.set(&mut self.lambda2, "lambda2")?;
        kv.set(&mut self.seed, "seed")?;
        kv.set(&mut self.adversarial, "adversarial")?;
        kv.set(&mut self.arch.gen_channels, "gen_channels")?;
        kv.set(&mut self.arch.residual_blocks, "residual_blocks")?;
        kv.set(&mut self.arch.disc_channels, "disc_channels")?;
        kv.set(&mut self.arch.gen_init, "gen_init")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(AgmError::Config(format!(
                "cycle and identity weights must be non-negative, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AgmError::Config("GAN epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(AgmError::Config(format!("GAN learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.arch.gen_channels == 0 || self.arch.disc_channels == 0 {
            return Err(AgmError::Config("GAN channel widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct GanModel {
    pub arch: GanArch,
    pub store: ParamStore,
    pub g: Generator,
    pub f: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
}

impl GanModel {
    pub fn new(arch: GanArch, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, &[seed::tag("gan_init")]);
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, "g", &arch, &mut rng);
        let f = Generator::new(&mut store, "f", &arch, &mut rng);
        let d_a = Discriminator::new(&mut store, "d_a", &arch, &mut rng);
        let d_b = Discriminator::new(&mut store, "d_b", &arch, &mut rng);
        GanModel {
            arch,
            store,
            g,
            f,
            d_a,
            d_b,
        }
    }

    fn generator_ids(&self) -> Vec<ParamId> {
        let mut ids = self.g.param_ids();
        ids.extend(self.f.param_ids());
        ids
    }

    fn discriminator_ids(&self) -> Vec<ParamId> {
        let mut ids = self.d_a.param_ids();
        ids.extend(self.d_b.param_ids());
        ids
    }

    /// Appends the architecture header entry and all parameters under
    /// `prefix` to a container.
    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        if let serde_json::Value::Object(m) = &mut c.header {
            m.insert(format!("{prefix}arch"), serde_json::to_value(self.arch).expect("arch serializes"));
        }
        c.push_store(&self.store, prefix);
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let arch_value = c
            .header
            .get(format!("{prefix}arch"))
            .ok_or_else(|| AgmError::Checkpoint(format!("header lacks {prefix}arch")))?;
        let arch: GanArch = serde_json::from_value(arch_value.clone())
            .map_err(|e| AgmError::Checkpoint(format!("bad GAN architecture: {e}")))?;
        let mut model = GanModel::new(arch, 0);
        c.fill_store(&mut model.store, prefix)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, cfg: &GanConfig) -> Result<()> {
        let mut c = Container::new(serde_json::json!({
            "kind": "gan",
            "format_version": ckpt::FORMAT_VERSION,
            "seed": cfg.seed,
            "config": cfg,
        }));
        self.write_into(&mut c, "");
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        match c.header.get("kind").and_then(|k| k.as_str()) {
            Some("gan") => Self::read_from(&c, ""),
            other => Err(AgmError::Checkpoint(format!("expected a GAN checkpoint, found kind {other:?}"))),
        }
    }
}

fn check_batch(images: &[&Image], modality: Modality) -> Result<()> {
    if images.is_empty() {
        return Err(AgmError::Precondition(format!("empty {modality} batch")));
    }
    if let Some(bad) = images.iter().find(|i| i.modality != modality) {
        return Err(AgmError::ModalityMismatch {
            expected: modality,
            actual: bad.modality,
        });
    }
    Ok(())
}

fn batch_tensors(batch_g: &[&Image], batch_t: &[&Image]) -> Result<(Tensor, Tensor)> {
    check_batch(batch_g, Modality::Grayscale)?;
    check_batch(batch_t, Modality::Infrared)?;
    Ok((imaging::to_tensor(batch_g)?, imaging::to_tensor(batch_t)?))
}

/// Mean absolute difference; shapes must agree.
pub fn mean_l1_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(AgmError::ShapeMismatch(format!(
            "reconstruction {:?} vs input {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn ln_clamped(g: &mut Graph, s: Var) -> Var {
    g.clamp_log(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

/// Discriminator loss from scores on real and on (detached) fake samples.
pub fn discriminator_loss_var(g: &mut Graph, real: Var, fake: Var, form: AdversarialForm) -> Var {
    match form {
        AdversarialForm::Log => {
            let lr = ln_clamped(g, real);
            let lr = g.mean(lr);
            let one_minus = g.scale(fake, -1.0);
            let one_minus = g.add_scalar(one_minus, 1.0);
            let lf = ln_clamped(g, one_minus);
            let lf = g.mean(lf);
            let s = g.add(lr, lf);
            g.scale(s, -1.0)
        }
        AdversarialForm::LeastSquares => {
            let r = g.add_scalar(real, -1.0);
            let r = g.square(r);
            let r = g.mean(r);
            let f = g.square(fake);
            let f = g.mean(f);
            g.add(r, f)
        }
    }
}

/// Generator-side adversarial loss from discriminator scores on fakes.
pub fn generator_adversarial_var(g: &mut Graph, fake: Var, form: AdversarialForm) -> Var {
    match form {
        AdversarialForm::Log => {
            let l = ln_clamped(g, fake);
            let l = g.mean(l);
            g.scale(l, -1.0)
        }
        AdversarialForm::LeastSquares => {
            let f = g.add_scalar(fake, -1.0);
            let f = g.square(f);
            g.mean(f)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    /// Generator-side term for `G` (grayscale → infrared), judged by `D_B`.
    pub g_to_t: f64,
    /// Generator-side term for `F` (infrared → grayscale), judged by `D_A`.
    pub t_to_g: f64,
    pub disc_a: f64,
    pub disc_b: f64,
}

struct GenTerms {
    adv_g2t: Var,
    adv_t2g: Var,
    cycle: Var,
    identity: Var,
}

impl GanModel {
    /// Generator objective pieces; discriminators enter frozen.
    fn generator_terms(&self, cx: &mut Ctx, xg: Var, xt: Var, form: AdversarialForm) -> Result<GenTerms> {
        let fake_t = self.g.forward(cx, xg);
        let fake_g = self.f.forward(cx, xt);
        let rec_g = self.f.forward(cx, fake_t);
        let rec_t = self.g.forward(cx, fake_g);
        let c1 = mean_l1_var(&mut cx.graph, rec_g, xg)?;
        let c2 = mean_l1_var(&mut cx.graph, rec_t, xt)?;
        let cycle = cx.graph.add(c1, c2);
        let idt_t = self.g.forward(cx, xt);
        let idt_g = self.f.forward(cx, xg);
        let i1 = mean_l1_var(&mut cx.graph, idt_t, xt)?;
        let i2 = mean_l1_var(&mut cx.graph, idt_g, xg)?;
        let identity = cx.graph.add(i1, i2);
        let was_frozen = cx.is_frozen();
        cx.set_frozen(true);
        let sb = self.d_b.forward(cx, fake_t);
        let sa = self.d_a.forward(cx, fake_g);
        cx.set_frozen(was_frozen);
        let adv_g2t = generator_adversarial_var(&mut cx.graph, sb, form);
        let adv_t2g = generator_adversarial_var(&mut cx.graph, sa, form);
        Ok(GenTerms {
            adv_g2t,
            adv_t2g,
            cycle,
            identity,
        })
    }

    /// Discriminator losses with translated samples computed by frozen
    /// generators and entering as constants.
    fn discriminator_terms(&self, cx: &mut Ctx, xg: Var, xt: Var, form: AdversarialForm) -> (Var, Var) {
        let was_frozen = cx.is_frozen();
        cx.set_frozen(true);
        let fake_t = self.g.forward(cx, xg);
        let fake_g = self.f.forward(cx, xt);
        cx.set_frozen(was_frozen);
        let fake_t = cx.graph.detach(fake_t);
        let fake_g = cx.graph.detach(fake_g);
        let real_b = self.d_b.forward(cx, xt);
        let fake_b = self.d_b.forward(cx, fake_t);
        let real_a = self.d_a.forward(cx, xg);
        let fake_a = self.d_a.forward(cx, fake_g);
        let disc_b = discriminator_loss_var(&mut cx.graph, real_b, fake_b, form);
        let disc_a = discriminator_loss_var(&mut cx.graph, real_a, fake_a, form);
        (disc_a, disc_b)
    }
}

pub fn adversarial_losses(
    model: &GanModel,
    batch_g: &[&Image],
    batch_t: &[&Image],
    form: AdversarialForm,
) -> Result<AdversarialLosses> {
    let (tg, tt) = batch_tensors(batch_g, batch_t)?;
    let mut cx = Ctx::eval(&model.store);
    let xg = cx.graph.constant(tg);
    let xt = cx.graph.constant(tt);
    let terms = model.generator_terms(&mut cx, xg, xt, form)?;
    let (disc_a, disc_b) = model.discriminator_terms(&mut cx, xg, xt, form);
    let v = |x| cx.value(x).item();
    Ok(AdversarialLosses {
        g_to_t: v(terms.adv_g2t),
        t_to_g: v(terms.adv_t2g),
        disc_a: v(disc_a),
        disc_b: v(disc_b),
    })
}

/// `mean|F(G(x_g)) − x_g| + mean|G(F(x_t)) − x_t|`.
pub fn cycle_consistency_loss(model: &GanModel, batch_g: &[&Image], batch_t: &[&Image]) -> Result<f64> {
    let (tg, tt) = batch_tensors(batch_g, batch_t)?;
    let mut cx = Ctx::eval(&model.store);
    let xg = cx.graph.constant(tg);
    let xt = cx.graph.constant(tt);
    let t = model.generator_terms(&mut cx, xg, xt, AdversarialForm::Log)?;
    Ok(cx.value(t.cycle).item())
}

/// `mean|G(x_t) − x_t| + mean|F(x_g) − x_g|`.
pub fn identity_mapping_loss(model: &GanModel, batch_g: &[&Image], batch_t: &[&Image]) -> Result<f64> {
    let (tg, tt) = batch_tensors(batch_g, batch_t)?;
    let mut cx = Ctx::eval(&model.store);
    let xg = cx.graph.constant(tg);
    let xt = cx.graph.constant(tt);
    let t = model.generator_terms(&mut cx, xg, xt, AdversarialForm::Log)?;
    Ok(cx.value(t.identity).item())
}

/// Bundles the generator objective `adv + λ1·cycle + λ2·identity`; the raw
/// cycle and identity values and both discriminator losses are reported as
/// diagnostics.
pub fn combine_objective(adv: &AdversarialLosses, cycle: f64, identity: f64, cfg: &GanConfig) -> Result<LossBundle> {
    cfg.validate()?;
    let named = |v: &[(&str, f64)]| v.iter().map(|&(k, x)| (k.to_string(), x)).collect();
    LossBundle::new(
        named(&[
            ("adv_g2t", adv.g_to_t),
            ("adv_t2g", adv.t_to_g),
            ("cycle_weighted", cfg.lambda1 * cycle),
            ("identity_weighted", cfg.lambda2 * identity),
        ]),
        named(&[
            ("cycle", cycle),
            ("identity", identity),
            ("disc_a", adv.disc_a),
            ("disc_b", adv.disc_b),
        ]),
    )
}

pub fn total_gan_objective(model: &GanModel, batch_g: &[&Image], batch_t: &[&Image], cfg: &GanConfig) -> Result<LossBundle> {
    cfg.validate()?;
    let adv = adversarial_losses(model, batch_g, batch_t, cfg.adversarial)?;
    let cycle = cycle_consistency_loss(model, batch_g, batch_t)?;
    let identity = identity_mapping_loss(model, batch_g, batch_t)?;
    combine_objective(&adv, cycle, identity, cfg)
}

fn stack(samples: &[Tensor], picks: &[usize]) -> Tensor {
    let shape = samples[picks[0]].shape();
    let mut data = Vec::with_capacity(picks.len() * samples[picks[0]].len());
    for &i in picks {
        data.extend_from_slice(samples[i].data());
    }
    Tensor::new(&[picks.len(), shape[1], shape[2], shape[3]], data)
}

fn ensure_finite(bundle: &LossBundle) -> Result<()> {
    match bundle.terms().iter().chain(bundle.diagnostics()).find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(AgmError::NonFinite { term: name.clone() }),
        None => Ok(()),
    }
}

pub struct GanRun {
    pub model: GanModel,
    /// Per-epoch mean of every objective term.
    pub history: Vec<LossBundle>,
}

/// Alternating optimization: each step first updates both discriminators
/// with the generators frozen, then both generators with the
/// discriminators frozen. Batches draw from independently shuffled
/// passes over each domain.
pub fn train_gn(gray: &[Image], infrared: &[Image], cfg: &GanConfig) -> Result<GanRun> {
    cfg.validate()?;
    let gray_refs: Vec<&Image> = gray.iter().collect();
    let ir_refs: Vec<&Image> = infrared.iter().collect();
    check_batch(&gray_refs, Modality::Grayscale)?;
    check_batch(&ir_refs, Modality::Infrared)?;
    let per_image = |imgs: &[&Image]| imgs.iter().map(|i| imaging::to_tensor(&[*i])).collect::<Result<Vec<_>>>();
    let tg = per_image(&gray_refs)?;
    let tt = per_image(&ir_refs)?;

    let mut model = GanModel::new(cfg.arch, cfg.seed);
    let gen_ids = model.generator_ids();
    let disc_ids = model.discriminator_ids();
    let adam = AdamConfig::default();
    let mut opt_g = Adam::new(adam);
    let mut opt_d = Adam::new(adam);
    let bs = cfg.batch_size;
    let steps = gray.len().max(infrared.len()).div_ceil(bs);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs as u64 {
        let order = |n: usize, domain: &str| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut seed::rng(cfg.seed, &[seed::tag("gan_order"), seed::tag(domain), epoch]));
            p
        };
        let (pg, pt) = (order(gray.len(), "gray"), order(infrared.len(), "infrared"));
        let mut bundles = Vec::with_capacity(steps);
        for s in 0..steps {
            let pick = |perm: &[usize]| (0..bs).map(|j| perm[(s * bs + j) % perm.len()]).collect::<Vec<_>>();
            let xg_t = stack(&tg, &pick(&pg));
            let xt_t = stack(&tt, &pick(&pt));

            let (disc_a, disc_b, grads) = {
                let mut cx = Ctx::train(&model.store);
                let xg = cx.graph.constant(xg_t.clone());
                let xt = cx.graph.constant(xt_t.clone());
                let (da, db) = model.discriminator_terms(&mut cx, xg, xt, cfg.adversarial);
                let total = cx.graph.add(da, db);
                let grads = cx.graph.backward(total);
                (cx.value(da).item(), cx.value(db).item(), grads)
            };
            opt_d.step(&mut model.store, &grads, cfg.learning_rate, |id| disc_ids.contains(&id));

            let (adv, cycle, identity, grads) = {
                let mut cx = Ctx::train(&model.store);
                let xg = cx.graph.constant(xg_t);
                let xt = cx.graph.constant(xt_t);
                let t = model.generator_terms(&mut cx, xg, xt, cfg.adversarial)?;
                let c = cx.graph.scale(t.cycle, cfg.lambda1);
                let i = cx.graph.scale(t.identity, cfg.lambda2);
                let a = cx.graph.add(t.adv_g2t, t.adv_t2g);
                let ci = cx.graph.add(c, i);
                let total = cx.graph.add(a, ci);
                let grads = cx.graph.backward(total);
                let v = |x| cx.value(x).item();
                let adv = AdversarialLosses {
                    g_to_t: v(t.adv_g2t),
                    t_to_g: v(t.adv_t2g),
                    disc_a,
                    disc_b,
                };
                (adv, v(t.cycle), v(t.identity), grads)
            };
            let bundle = combine_objective(&adv, cycle, identity, cfg)?;
            ensure_finite(&bundle)?;
            opt_g.step(&mut model.store, &grads, cfg.learning_rate, |id| gen_ids.contains(&id));
            bundles.push(bundle);
        }
        let mean = LossBundle::mean(&bundles).expect("at least one step per epoch");
        log::info!(
            "gan epoch {} total {:.4} cycle {:.4} identity {:.4}",
            epoch + 1,
            mean.total(),
            mean.get("cycle").unwrap_or(f64::NAN),
            mean.get("identity").unwrap_or(f64::NAN)
        );
        history.push(mean);
    }
    Ok(GanRun { model, history })
}

/// Infrared-to-grayscale translation in `[-1, 1]` space, before any
/// projection, as an `N × 3 × H × W` tensor.
pub fn translate_tensor(model: &GanModel, imgs: &[&Image]) -> Result<Tensor> {
    check_batch(imgs, Modality::Infrared)?;
    let x = imaging::to_tensor(imgs)?;
    let mut cx = Ctx::eval(&model.store);
    let xv = cx.graph.constant(x);
    let y = model.f.forward(&mut cx, xv);
    Ok(cx.value(y).clone())
}

/// Maps infrared images into the grayscale domain with `F`. The translated
/// raster is projected onto luminance so every output carries equal
/// channels; order and sizes are preserved.
pub fn apply_gn(model: &GanModel, imgs: &[Image]) -> Result<Vec<Image>> {
    const CHUNK: usize = 16;
    let coeffs = GrayscaleCoeffs::default();
    let mut out = Vec::with_capacity(imgs.len());
    for chunk in imgs.chunks(CHUNK) {
        // Translation needs equal sizes within a batch; fall back to one at
        // a time otherwise.
        let same = chunk.iter().all(|i| (i.height(), i.width()) == (chunk[0].height(), chunk[0].width()));
        let groups: Vec<Vec<&Image>> = if same {
            vec![chunk.iter().collect()]
        } else {
            chunk.iter().map(|i| vec![i]).collect()
        };
        for group in groups {
            let t = translate_tensor(model, &group)?;
            for (n, img) in group.iter().enumerate() {
                let raw = imaging::from_tensor(&t, n, img, Modality::Infrared)?;
                out.push(imaging::luminance_replicated(&raw, &coeffs));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: u8) -> Image {
        Image::filled(8, 6, [v, v, v], Modality::Grayscale).unwrap()
    }

    fn ir(rgb: [u8; 3]) -> Image {
        Image::filled(8, 6, rgb, Modality::Infrared).unwrap()
    }

    /// Zeroes both discriminators' output layers so every score is 0.5.
    fn neutral_discriminators(model: &mut GanModel) {
        for d in [model.d_a.clone(), model.d_b.clone()] {
            let out = d.output_layer();
            let shape = model.store.get(out.weight).shape().to_vec();
            model.store.set(out.weight, Tensor::zeros(&shape));
            model.store.set(out.bias.unwrap(), Tensor::zeros(&[1]));
        }
    }

    #[test]
    fn scalar_adversarial_forms() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::full(&[2, 1, 2, 2], 0.5));
        let d = discriminator_loss_var(&mut g, half, half, AdversarialForm::Log);
        assert!((g.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let gen = generator_adversarial_var(&mut g, half, AdversarialForm::Log);
        assert!((g.value(gen).item() - 2f64.ln()).abs() < 1e-12);

        // Perfect discriminator: real scores 1, fake scores 0, both clamped.
        let ones = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let zeros = g.constant(Tensor::full(&[1, 1, 1, 1], 0.0));
        let d = discriminator_loss_var(&mut g, ones, zeros, AdversarialForm::Log);
        let gen = generator_adversarial_var(&mut g, zeros, AdversarialForm::Log);
        assert!(g.value(d).item() < 1e-6 && g.value(d).item() >= 0.0);
        assert!((g.value(gen).item() + SCORE_CLAMP.ln()).abs() < 1e-9);

        let ls = discriminator_loss_var(&mut g, ones, zeros, AdversarialForm::LeastSquares);
        assert_eq!(g.value(ls).item(), 0.0);
    }

    #[test]
    fn neutral_discriminators_give_two_ln_two() {
        let mut model = GanModel::new(GanArch::default(), 1);
        neutral_discriminators(&mut model);
        let (a, b) = (gray(40), ir([90, 80, 70]));
        let l = adversarial_losses(&model, &[&a], &[&b], AdversarialForm::Log).unwrap();
        for d in [l.disc_a, l.disc_b] {
            assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        }
        // At D ≡ 0.5 each expectation term, real or fake, is ln 2.
        assert!((l.g_to_t - 2f64.ln()).abs() < 1e-12);
        assert!((l.t_to_g - l.disc_a / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_generators_have_zero_cycle_and_identity_losses() {
        let model = GanModel::new(GanArch::default(), 2);
        let g = [gray(10), gray(200)];
        let t = [ir([30, 60, 90]), ir([255, 0, 128])];
        let gr: Vec<&Image> = g.iter().collect();
        let tr: Vec<&Image> = t.iter().collect();
        assert_eq!(cycle_consistency_loss(&model, &gr, &tr).unwrap(), 0.0);
        assert_eq!(identity_mapping_loss(&model, &gr, &tr).unwrap(), 0.0);
    }

    #[test]
    fn l1_arithmetic() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 * 0.1 - 0.5));
        let shifted = g.add_scalar(x, 0.25);
        // both directions off by c → 2c
        let a = mean_l1_var(&mut g, shifted, x).unwrap();
        let b = mean_l1_var(&mut g, shifted, x).unwrap();
        let both = g.add(a, b);
        assert!((g.value(both).item() - 0.5).abs() < 1e-12);
        // one direction exact → c
        let exact = mean_l1_var(&mut g, x, x).unwrap();
        let one = g.add(a, exact);
        assert!((g.value(one).item() - 0.25).abs() < 1e-12);
        // zero images, generators emitting constant 1, two terms → 2
        let z = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let o = g.constant(Tensor::full(&[1, 3, 2, 2], 1.0));
        let i1 = mean_l1_var(&mut g, o, z).unwrap();
        let i2 = mean_l1_var(&mut g, o, z).unwrap();
        let s = g.add(i1, i2);
        assert_eq!(g.value(s).item(), 2.0);
        let small = g.constant(Tensor::zeros(&[1, 3, 1, 2]));
        assert!(mean_l1_var(&mut g, small, z).is_err());
    }

    #[test]
    fn objective_weighting() {
        let zero = AdversarialLosses {
            g_to_t: 0.0,
            t_to_g: 0.0,
            disc_a: 0.0,
            disc_b: 0.0,
        };
        let cfg = GanConfig::default();
        assert_eq!(combine_objective(&zero, 0.0, 0.0, &cfg).unwrap().total(), 0.0);
        assert_eq!(combine_objective(&zero, 1.0, 1.0, &cfg).unwrap().total(), 15.0);
        let adv = AdversarialLosses {
            g_to_t: 0.4,
            t_to_g: 0.9,
            ..zero
        };
        let off = GanConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..cfg.clone()
        };
        assert_eq!(combine_objective(&adv, 3.0, 2.0, &off).unwrap().total(), 1.3);
        let negative = GanConfig {
            lambda1: -1.0,
            ..cfg
        };
        assert!(matches!(combine_objective(&adv, 1.0, 1.0, &negative), Err(AgmError::Config(_))));
    }

    #[test]
    fn wrong_modalities_and_empty_batches_are_rejected() {
        let model = GanModel::new(GanArch::default(), 0);
        let v = Image::filled(8, 6, [1, 2, 3], Modality::Visible).unwrap();
        assert!(matches!(apply_gn(&model, &[v.clone()]), Err(AgmError::ModalityMismatch { .. })));
        assert!(adversarial_losses(&model, &[], &[&ir([1, 1, 1])], AdversarialForm::Log).is_err());
        assert!(cycle_consistency_loss(&model, &[&v], &[&ir([1, 1, 1])]).is_err());
    }
}
