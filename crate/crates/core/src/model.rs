//! Full tagger: representation, context, relation and CRF layers wired
//! together over canonically named parameters.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{self, Branch};
use crate::corpus::{Batch, PAD_ID};
use crate::crf::{self, LatticeScores};
use crate::embed::{self, EmbedParams};
use crate::error::{GrnError, Result};
use crate::numcore::{kaiming_uniform, Graph, NodeId, Real, SeqLayout, Tensor};
use crate::relation::{self, FusionKind, RelationOutput};

/// Context-layer variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// All configured kernel widths, fused by max.
    Full,
    /// A single width-3 branch.
    Branch3,
    /// No convolution; a linear projection to the hidden width.
    Off,
}

impl FromStr for ContextMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "branch3" => Ok(Self::Branch3),
            "off" => Ok(Self::Off),
            _ => Err(format!("unknown context mode `{s}` (expected full, branch3 or off)")),
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Branch3 => "branch3",
            Self::Off => "off",
        })
    }
}

/// Default `B * T^2 * D` element budget for one relation score tensor.
pub const DEFAULT_RELATION_BUDGET: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_channels: usize,
    pub char_kernel: usize,
    pub hidden: usize,
    pub kernels: Vec<usize>,
    pub context: ContextMode,
    pub fusion: FusionKind,
    pub dropout: f64,
    /// Forbid transitions that would produce an invalid BIOES sequence.
    pub constrain_transitions: bool,
    pub relation_budget: usize,
    pub num_words: usize,
    pub num_chars: usize,
    pub labels: Vec<String>,
}

impl ModelConfig {
    pub fn new(num_words: usize, num_chars: usize, labels: Vec<String>) -> Self {
        Self {
            word_dim: 100,
            char_dim: 30,
            char_channels: 30,
            char_kernel: 3,
            hidden: 400,
            kernels: vec![1, 3, 5],
            context: ContextMode::Full,
            fusion: FusionKind::Grn,
            dropout: 0.5,
            constrain_transitions: false,
            relation_budget: DEFAULT_RELATION_BUDGET,
            num_words,
            num_chars,
            labels,
        }
    }

    /// Word 8, character 8, hidden 16.
    pub fn reduced(num_words: usize, num_chars: usize, labels: Vec<String>) -> Self {
        Self {
            word_dim: 8,
            char_dim: 8,
            char_channels: 8,
            hidden: 16,
            ..Self::new(num_words, num_chars, labels)
        }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Width of the concatenated token representation.
    pub fn repr_dim(&self) -> usize {
        self.char_channels + self.word_dim
    }

    pub fn context_kernels(&self) -> Vec<usize> {
        match self.context {
            ContextMode::Full => self.kernels.clone(),
            ContextMode::Branch3 => vec![3],
            ContextMode::Off => vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GrnError::Config(m));
        if self.char_kernel % 2 == 0 {
            return bad(format!("char_kernel must be odd, got {}", self.char_kernel));
        }
        if let Some(k) = self.context_kernels().iter().find(|&&k| k % 2 == 0) {
            return bad(format!("context kernels must be odd, got {k}"));
        }
        if self.context == ContextMode::Full && self.kernels.is_empty() {
            return bad("full context needs at least one kernel".into());
        }
        if [self.word_dim, self.char_dim, self.char_channels, self.hidden].contains(&0) {
            return bad("dimensions must be positive".into());
        }
        if self.labels.is_empty() {
            return bad("label set is empty".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

enum Init {
    /// Uniform with the given fan-in; the PAD row, if flagged, is zero.
    Uniform { fan_in: usize, zero_pad_row: bool },
    Zero,
}

fn layout_of(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (w, c, ch, h, l) = (
        config.word_dim,
        config.char_dim,
        config.char_channels,
        config.hidden,
        config.num_labels(),
    );
    let z = config.repr_dim();
    let k = config.char_kernel;
    let mut out = vec![
        (
            "embed.word".to_string(),
            vec![config.num_words, w],
            Init::Uniform {
                fan_in: w,
                zero_pad_row: true,
            },
        ),
        (
            "embed.char".to_string(),
            vec![config.num_chars, c],
            Init::Uniform {
                fan_in: c,
                zero_pad_row: true,
            },
        ),
        (
            "embed.char_conv.weight".to_string(),
            vec![ch, k, c],
            Init::Uniform {
                fan_in: k * c,
                zero_pad_row: false,
            },
        ),
        ("embed.char_conv.bias".to_string(), vec![ch], Init::Zero),
    ];
    if config.context == ContextMode::Off {
        out.push((
            "context.proj.weight".into(),
            vec![h, z],
            Init::Uniform {
                fan_in: z,
                zero_pad_row: false,
            },
        ));
        out.push(("context.proj.bias".into(), vec![h], Init::Zero));
    }
    for kk in config.context_kernels() {
        out.push((
            format!("context.conv{kk}.weight"),
            vec![h, kk, z],
            Init::Uniform {
                fan_in: kk * z,
                zero_pad_row: false,
            },
        ));
        out.push((format!("context.conv{kk}.bias"), vec![h], Init::Zero));
    }
    let uniform = |fan_in| Init::Uniform {
        fan_in,
        zero_pad_row: false,
    };
    match config.fusion {
        FusionKind::Grn | FusionKind::Dfn => {
            out.push(("relation.weight".into(), vec![h, 2 * h], uniform(2 * h)));
            out.push(("relation.bias".into(), vec![h], Init::Zero));
        }
        FusionKind::Gattn => {
            out.push(("relation.gate.weight".into(), vec![1, 2 * h], uniform(2 * h)));
            out.push(("relation.gate.bias".into(), vec![1], Init::Zero));
        }
        FusionKind::None => {}
    }
    out.push(("crf.emission.weight".into(), vec![l, h], uniform(h)));
    out.push(("crf.transitions".into(), vec![l + 1, l + 1], Init::Zero));
    out
}

/// Parameter count from the closed-form expressions documented in the README.
pub fn param_count(config: &ModelConfig) -> usize {
    let (v, cn, w, c, ch, k, h, l) = (
        config.num_words,
        config.num_chars,
        config.word_dim,
        config.char_dim,
        config.char_channels,
        config.char_kernel,
        config.hidden,
        config.num_labels(),
    );
    let z = ch + w;
    let base = v * w + cn * c + ch * k * c + ch;
    let context = match config.context {
        ContextMode::Full => h * config.kernels.iter().sum::<usize>() * z + config.kernels.len() * h,
        ContextMode::Branch3 => 3 * h * z + h,
        ContextMode::Off => h * z + h,
    };
    let relation = match config.fusion {
        FusionKind::Grn | FusionKind::Dfn => 2 * h * h + h,
        FusionKind::Gattn => 2 * h + 1,
        FusionKind::None => 0,
    };
    base + context + relation + l * h + (l + 1) * (l + 1)
}

/// Learnable arrays keyed by canonical name, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T>(IndexMap<String, Tensor<T>>);

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self(IndexMap::new())
    }
}

impl<T: Real> ModelParams<T> {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.0.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalars.
    pub fn num_values(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams(
            self.0
                .iter()
                .map(|(n, t)| {
                    let data = t.data().iter().map(|v| U::lit(v.as_f64())).collect();
                    (n.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
                })
                .collect(),
        )
    }

    /// Registers every parameter as a borrowed trainable leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Result<BoundParams> {
        let mut ids = IndexMap::with_capacity(self.0.len());
        for (name, t) in &self.0 {
            ids.insert(name.clone(), g.param(t.shape(), t.data())?);
        }
        Ok(BoundParams(ids))
    }

    /// Euclidean norm of each parameter, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.0
            .iter()
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()))
            .collect()
    }
}

/// Graph handles of bound parameters.
#[derive(Clone, Debug)]
pub struct BoundParams(IndexMap<String, NodeId>);

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| GrnError::InvalidArgument(format!("missing parameter `{name}`")))
    }

    /// Gradient of every parameter after `backward`; zeros where none flowed.
    pub fn grads<T: Real>(&self, g: &Graph<'_, T>) -> IndexMap<String, Vec<T>> {
        self.0
            .iter()
            .map(|(n, &id)| {
                let grad = g
                    .grad(id)
                    .map_or_else(|| vec![T::zero(); g.value(id).len()], <[T]>::to_vec);
                (n.clone(), grad)
            })
            .collect()
    }
}

/// Draws fresh parameters: weights uniform in `+-sqrt(6 / fan_in)`, biases and
/// transitions zero, PAD embedding rows zero.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::default();
    for (name, shape, init) in layout_of(config) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![T::zero(); n],
            Init::Uniform { fan_in, zero_pad_row } => {
                let mut d = kaiming_uniform(&mut rng, n, fan_in);
                if zero_pad_row {
                    let cols = shape[1];
                    d[PAD_ID * cols..(PAD_ID + 1) * cols].fill(T::zero());
                }
                d
            }
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

/// Checks that `params` has exactly the names and shapes `config` requires.
pub fn check_params<T: Real>(config: &ModelConfig, params: &ModelParams<T>) -> Result<()> {
    let want = layout_of(config);
    if want.len() != params.len() {
        return Err(GrnError::InvalidArgument(format!(
            "expected {} parameter arrays, found {}",
            want.len(),
            params.len()
        )));
    }
    for (name, shape, _) in want {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(GrnError::Shape {
                    op: "parameter",
                    left: shape,
                    right: t.shape().to_vec(),
                })
            }
            None => return Err(GrnError::InvalidArgument(format!("missing parameter `{name}`"))),
        }
    }
    Ok(())
}

/// Nodes produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B*T x L]`.
    pub emissions: NodeId,
    pub relation: Option<RelationOutput>,
    pub layout: SeqLayout,
}

pub fn forward<T: Real>(
    g: &mut Graph<'_, T>,
    config: &ModelConfig,
    p: &BoundParams,
    batch: &Batch,
    training: bool,
) -> Result<ForwardOutput> {
    let layout = batch.layout();
    let ep = EmbedParams {
        word: p.id("embed.word")?,
        chars: p.id("embed.char")?,
        char_kernel: p.id("embed.char_conv.weight")?,
        char_bias: p.id("embed.char_conv.bias")?,
    };
    let z = embed::represent(g, &ep, batch, config.dropout, training)?;
    let x = match config.context {
        ContextMode::Off => context::projection(g, z, p.id("context.proj.weight")?, p.id("context.proj.bias")?, &layout)?,
        mode => {
            let branches = config
                .context_kernels()
                .into_iter()
                .map(|k| {
                    Ok(Branch {
                        kernel: p.id(&format!("context.conv{k}.weight"))?,
                        bias: p.id(&format!("context.conv{k}.bias"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if mode == ContextMode::Branch3 {
                context::context_branch_only(g, z, branches[0], &layout)?
            } else {
                context::context_layer(g, z, &branches, &layout)?
            }
        }
    };
    let (features, rel) = match config.fusion {
        FusionKind::None => (g.dropout(x, config.dropout, training)?, None),
        kind => {
            let (w, b) = if kind == FusionKind::Gattn {
                (p.id("relation.gate.weight")?, p.id("relation.gate.bias")?)
            } else {
                (p.id("relation.weight")?, p.id("relation.bias")?)
            };
            let out = relation::relation_layer(g, kind, x, w, b, &layout, config.relation_budget)?;
            let pf = relation::predict_features(g, out.fused, config.dropout, training)?;
            (pf, Some(out))
        }
    };
    let emissions = crf::potentials(g, features, p.id("crf.emission.weight")?)?;
    Ok(ForwardOutput {
        emissions,
        relation: rel,
        layout,
    })
}

fn transition_mask(config: &ModelConfig) -> Result<Option<Vec<bool>>> {
    if config.constrain_transitions {
        crf::bioes_transition_mask(&config.labels).map(Some)
    } else {
        Ok(None)
    }
}

/// Summed CRF negative log-likelihood of the batch's gold labels.
pub fn loss<T: Real>(
    g: &mut Graph<'_, T>,
    config: &ModelConfig,
    p: &BoundParams,
    batch: &Batch,
    training: bool,
) -> Result<NodeId> {
    let gold = batch
        .label_ids
        .as_ref()
        .ok_or_else(|| GrnError::InvalidArgument("batch has no gold labels".into()))?;
    let out = forward(g, config, p, batch, training)?;
    let mask = transition_mask(config)?;
    crf::nll_loss(
        g,
        out.emissions,
        p.id("crf.transitions")?,
        &out.layout,
        gold,
        mask.as_deref(),
    )
}

/// Emission and transition scores of `batch` in evaluation mode.
pub fn lattice<T: Real>(config: &ModelConfig, params: &ModelParams<T>, batch: &Batch) -> Result<LatticeScores> {
    let mut g = Graph::new(0);
    let p = params.bind(&mut g)?;
    let out = forward(&mut g, config, &p, batch, false)?;
    let lat = crf::lattice_from_graph(&g, out.emissions, p.id("crf.transitions")?, &out.layout)?;
    Ok(match transition_mask(config)? {
        Some(m) => lat.with_mask(&m),
        None => lat,
    })
}

/// Viterbi label ids of every sentence, in evaluation mode.
pub fn decode<T: Real>(config: &ModelConfig, params: &ModelParams<T>, batch: &Batch) -> Result<Vec<Vec<usize>>> {
    let lat = lattice(config, params, batch)?;
    Ok(crf::viterbi(&lat).into_iter().map(|(path, _)| path).collect())
}

/// Evaluation-mode loss value of a labeled batch.
pub fn eval_loss<T: Real>(config: &ModelConfig, params: &ModelParams<T>, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new(0);
    let p = params.bind(&mut g)?;
    let l = loss(&mut g, config, &p, batch, false)?;
    Ok(g.value(l)[0].as_f64())
}

/// Raw relation scores `[T x T x D]` of each sentence of `batch`, in evaluation
/// mode, with each sentence's padding stripped. Fails when the relation layer is off.
pub fn relation_scores<T: Real>(config: &ModelConfig, params: &ModelParams<T>, batch: &Batch) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut g = Graph::new(0);
    let p = params.bind(&mut g)?;
    let out = forward(&mut g, config, &p, batch, false)?;
    let rel = out
        .relation
        .ok_or_else(|| GrnError::InvalidArgument("the model has no relation layer (fusion = none)".into()))?;
    let t_max = out.layout.t_max();
    let mut result = Vec::new();
    for (node, range) in rel.scores {
        let d = g.shape(node)[3];
        let v = g.value(node);
        for (k, b) in range.enumerate() {
            let len = out.layout.lengths()[b];
            let mut s = Vec::with_capacity(len * len * d);
            for i in 0..len {
                let at = ((k * t_max + i) * t_max) * d;
                s.extend(v[at..at + len * d].iter().map(|x| x.as_f64()));
            }
            result.push((s, d));
        }
    }
    Ok(result)
}
