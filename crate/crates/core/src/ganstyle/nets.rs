use agm_autograd::{ParamId, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AgmError, Result};
use crate::nn::{Conv, Ctx, Init};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorInit {
    /// Zero output head: the generator starts as the identity map.
    Identity,
    Random,
}

impl std::str::FromStr for GeneratorInit {
    type Err = AgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(GeneratorInit::Identity),
            "random" => Ok(GeneratorInit::Random),
            other => Err(AgmError::Config(format!("unknown generator init {other:?}; expected identity or random"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanArch {
    pub gen_channels: usize,
    pub residual_blocks: usize,
    pub disc_channels: usize,
    pub gen_init: GeneratorInit,
}

impl Default for GanArch {
    fn default() -> Self {
        GanArch {
            gen_channels: 8,
            residual_blocks: 3,
            disc_channels: 8,
            gen_init: GeneratorInit::Identity,
        }
    }
}

/// Residual encoder–decoder: stem, three stride-2 downsampling convolutions,
/// `k` residual blocks, three nearest-upsampling stages with additive skips,
/// and a 3-channel head added onto the input.
#[derive(Clone, Debug)]
pub struct Generator {
    stem: Conv,
    down: Vec<Conv>,
    blocks: Vec<(Conv, Conv)>,
    up: Vec<Conv>,
    head: Conv,
}

impl Generator {
    pub fn new(store: &mut ParamStore, name: &str, arch: &GanArch, rng: &mut impl Rng) -> Self {
        let c = arch.gen_channels;
        let widths = [c, 2 * c, 4 * c, 4 * c];
        let conv = |store: &mut ParamStore, n: String, i, o, s, init, rng: &mut _| {
            Conv::new(store, &n, i, o, 3, s, true, init, rng)
        };
        let stem = conv(store, format!("{name}.stem"), 3, c, 1, Init::Kaiming, rng);
        let down = (0..3)
            .map(|i| conv(store, format!("{name}.down{i}"), widths[i], widths[i + 1], 2, Init::Kaiming, rng))
            .collect();
        let blocks = (0..arch.residual_blocks)
            .map(|i| {
                let a = conv(store, format!("{name}.res{i}.a"), 4 * c, 4 * c, 1, Init::Kaiming, rng);
                let b = conv(store, format!("{name}.res{i}.b"), 4 * c, 4 * c, 1, Init::Kaiming, rng);
                (a, b)
            })
            .collect();
        let up = (0..3)
            .rev()
            .map(|i| conv(store, format!("{name}.up{i}"), widths[i + 1], widths[i], 1, Init::Kaiming, rng))
            .collect();
        let head_init = match arch.gen_init {
            GeneratorInit::Identity => Init::Zero,
            GeneratorInit::Random => Init::Kaiming,
        };
        let head = conv(store, format!("{name}.head"), c, 3, 1, head_init, rng);
        let g = Generator {
            stem,
            down,
            blocks,
            up,
            head,
        };
        if arch.gen_init == GeneratorInit::Random {
            // Small head so the random map stays near the input scale.
            let w = store.get(g.head.weight).scale(0.1);
            store.set(g.head.weight, w);
        }
        g
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let s = self.stem.forward(cx, x);
        let mut skips = vec![cx.graph.relu(s)];
        for d in &self.down {
            let y = d.forward(cx, *skips.last().expect("stem output"));
            skips.push(cx.graph.relu(y));
        }
        let mut y = skips.pop().expect("bottleneck");
        for (a, b) in &self.blocks {
            let h = a.forward(cx, y);
            let h = cx.graph.relu(h);
            let h = b.forward(cx, h);
            y = cx.graph.add(y, h);
        }
        for u in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            let (_, _, h, w) = cx.value(skip).dims4();
            let z = cx.graph.upsample2x(y);
            let z = cx.graph.crop(z, h, w);
            let z = u.forward(cx, z);
            let z = cx.graph.relu(z);
            y = cx.graph.add(z, skip);
        }
        let delta = self.head.forward(cx, y);
        cx.graph.add(x, delta)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut convs: Vec<&Conv> = vec![&self.stem];
        convs.extend(&self.down);
        for (a, b) in &self.blocks {
            convs.push(a);
            convs.push(b);
        }
        convs.extend(&self.up);
        convs.push(&self.head);
        convs.iter().flat_map(|c| std::iter::once(c.weight).chain(c.bias)).collect()
    }
}

/// Patch discriminator: two stride-2 convolutions with leaky ReLU, then a
/// one-channel score map squashed into `(0, 1)`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv>,
    out: Conv,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, name: &str, arch: &GanArch, rng: &mut impl Rng) -> Self {
        let c = arch.disc_channels;
        let convs = vec![
            Conv::new(store, &format!("{name}.conv0"), 3, c, 3, 2, true, Init::Kaiming, rng),
            Conv::new(store, &format!("{name}.conv1"), c, 2 * c, 3, 2, true, Init::Kaiming, rng),
        ];
        let out = Conv::new(store, &format!("{name}.out"), 2 * c, 1, 3, 1, true, Init::Kaiming, rng);
        Discriminator { convs, out }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(cx, y);
            y = cx.graph.leaky_relu(y, 0.2);
        }
        let s = self.out.forward(cx, y);
        cx.graph.sigmoid(s)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .chain(std::iter::once(&self.out))
            .flat_map(|c| std::iter::once(c.weight).chain(c.bias))
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn output_layer(&self) -> &Conv {
        &self.out
    }
}
