use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

use super::ModelConfig;

/// Coarse grouping of parameters, used by gradient checks and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Value MLP of the point tokenizer.
    Tokenizer,
    /// `W_q` projections of positional queries (LR and HR grids).
    Query,
    /// Attention projections and their layer norms.
    Attention,
    Ffn,
    /// Per-layer prediction heads.
    Head,
    /// Image-domain convolution stacks.
    Refine,
    /// Re-embedding MLPs of refined spectrograms.
    Embed,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Tokenizer,
        ParamGroup::Query,
        ParamGroup::Attention,
        ParamGroup::Ffn,
        ParamGroup::Head,
        ParamGroup::Refine,
        ParamGroup::Embed,
    ];
}

pub fn param_group(name: &str) -> ParamGroup {
    let has = |seg: &str| name.split('.').any(|s| s == seg);
    if name.starts_with("tok.") {
        ParamGroup::Tokenizer
    } else if has("query") {
        ParamGroup::Query
    } else if has("head") {
        ParamGroup::Head
    } else if has("refine") {
        ParamGroup::Refine
    } else if has("embed") {
        ParamGroup::Embed
    } else if has("ffn") {
        ParamGroup::Ffn
    } else {
        ParamGroup::Attention
    }
}

enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Zeros,
    Ones,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.specs.push((format!("{prefix}.w"), vec![fan_in, fan_out], Init::FanIn(fan_in)));
        self.specs.push((format!("{prefix}.b"), vec![fan_out], Init::Zeros));
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.specs.push((format!("{prefix}.g"), vec![d], Init::Ones));
        self.specs.push((format!("{prefix}.b"), vec![d], Init::Zeros));
    }

    fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, output: usize) {
        self.linear(&format!("{prefix}.fc1"), input, hidden);
        self.linear(&format!("{prefix}.fc2"), hidden, output);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        self.norm(&format!("{prefix}.ln"), d);
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{proj}"), d, d);
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, width: usize) {
        self.norm(&format!("{prefix}.ln"), d);
        self.mlp(prefix, d, width, d);
    }

    fn head(&mut self, prefix: &str, d: usize) {
        self.norm(&format!("{prefix}.ln"), d);
        self.linear(prefix, d, 2);
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.specs.push((format!("{prefix}.w"), vec![c_out, c_in, 3, 3], Init::FanIn(c_in * 9)));
        self.specs.push((format!("{prefix}.b"), vec![c_out], Init::Zeros));
    }
}

/// Deterministic initialization of every parameter for `cfg`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let d = cfg.d;
    let ffn = cfg.ffn_width();
    let hidden = cfg.mlp_hidden();
    let mut b = Builder { specs: Vec::new() };

    b.mlp("tok", 2, hidden, d);
    for i in 0..cfg.n_enc {
        b.attention(&format!("enc.{i}.attn"), d);
        b.ffn(&format!("enc.{i}.ffn"), d, ffn);
    }
    b.norm("enc.norm", d);

    if cfg.use_lr_decoder {
        b.linear("lr.query", d, d);
        for i in 0..cfg.n_lr {
            b.attention(&format!("lr.{i}.self"), d);
            b.attention(&format!("lr.{i}.cross"), d);
            b.ffn(&format!("lr.{i}.ffn"), d, ffn);
            b.head(&format!("lr.{i}.head"), d);
        }
        b.norm("lr.norm", d);
    }

    b.linear("hr.query", d, d);
    for i in 0..cfg.n_hr {
        if cfg.hr_self_attention {
            b.attention(&format!("hr.{i}.self"), d);
        }
        b.attention(&format!("hr.{i}.cross"), d);
        b.ffn(&format!("hr.{i}.ffn"), d, ffn);
        b.head(&format!("hr.{i}.head"), d);
        if cfg.use_refinement {
            let c = cfg.refine_channels;
            for j in 0..cfg.refine_depth {
                let c_in = if j == 0 { 2 } else { c };
                let c_out = if j + 1 == cfg.refine_depth { 2 } else { c };
                b.conv(&format!("hr.{i}.refine.{j}"), c_in, c_out);
            }
        }
        if i + 1 < cfg.n_hr {
            b.mlp(&format!("hr.{i}.embed"), 2, hidden, d);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in b.specs {
        let t = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
        };
        store.insert(name, t);
    }
    Ok(store)
}
