//! Multi-channel fully-connected layers, their low-rank factorizations, and
//! the LordNet assembly built from them.
//!
//! Notation: a factored layer maps `X ∈ R^{C×I₁×…×I_d}` to `Y ∈ R^{C×O₁×…×O_d}`
//! through per-channel weights `W_c = Σ_r η_{c,r} A_{c,r,1} ⊗ … ⊗ A_{c,r,d}`.
//! It is evaluated without ever forming `W_c`: each rank term is a chain of
//! axis contractions, first along rows, then columns (then depth).

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::tensor::{Tape, Var};

/// Named parameters in a fixed insertion order.
pub type ParamSet = IndexMap<String, Field>;

/// Parameters placed on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("Bound::get", format!("no parameter named `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Places every parameter on `tape`, as differentiable leaves or as constants.
pub fn bind(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Bound {
    let vars = params
        .iter()
        .map(|(k, f)| {
            let v = if trainable {
                tape.leaf(f.clone())
            } else {
                tape.constant(f.clone())
            };
            (k.clone(), v)
        })
        .collect();
    Bound { vars }
}

/// Dense reference weight `W ∈ R^{C×M×N}`.
#[derive(Debug, Clone, PartialEq)]
pub struct McfcWeights {
    pub w: Field,
}

/// `W_c = Σ_r σ_{c,r} a_{c,r} ⊗ b_{c,r}` with `σ: C×R`, `a: C×R×M`, `b: C×R×N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankVecWeights {
    pub sigma: Field,
    pub a: Field,
    pub b: Field,
}

/// `W_c = Σ_r η_{c,r} ⊗_i A_{c,r,i}` with `η: C×R` and `A_i: C×R×I_i×O_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LordFactorWeights {
    pub eta: Field,
    pub factors: Vec<Field>,
}

impl LordFactorWeights {
    pub fn channels(&self) -> usize {
        self.eta.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.eta.shape()[1]
    }

    pub fn in_dims(&self) -> Vec<usize> {
        self.factors.iter().map(|a| a.shape()[2]).collect()
    }

    pub fn out_dims(&self) -> Vec<usize> {
        self.factors.iter().map(|a| a.shape()[3]).collect()
    }

    /// `C·R·Σ_i I_i·O_i`, the factor entries (η excluded).
    pub fn factor_count(&self) -> usize {
        self.factors.iter().map(Field::len).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.eta.ndim() != 2 || self.factors.is_empty() {
            return Err(Error::shape("lord_factors", "η must be C×R with at least one factor"));
        }
        let (c, r) = (self.eta.shape()[0], self.eta.shape()[1]);
        for a in &self.factors {
            if a.ndim() != 4 || a.shape()[0] != c || a.shape()[1] != r {
                return Err(Error::shape(
                    "lord_factors",
                    format!("factor {:?} does not match η {:?}", a.shape(), self.eta.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Per-axis identity factors with `η = 1`.
    pub fn identity(channels: usize, rank: usize, dims: &[usize]) -> Self {
        LordFactorWeights {
            eta: Field::filled(&[channels, rank], 1.0),
            factors: dims
                .iter()
                .map(|&d| Field::from_fn(&[channels, rank, d, d], |ix| (ix[2] == ix[3]) as u8 as f64))
                .collect(),
        }
    }
}

/// Dense multi-channel layer `Y_{c,m} = Σ_n W_{c,m,n} X_{c,n}`; spatial axes of `x` are flattened.
pub fn mcfc_dense_forward(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    tape.channel_dense(x, w)
}

/// Vector low-rank layer on a `[C, N]` input, giving `[C, M]`.
pub fn lowrank_vec_forward(tape: &mut Tape, x: Var, sigma: Var, a: Var, b: Var) -> Result<Var> {
    let (sa, sb, ss) = (
        tape.value(a).shape().to_vec(),
        tape.value(b).shape().to_vec(),
        tape.value(sigma).shape().to_vec(),
    );
    if sa.len() != 3 || sb.len() != 3 || ss.len() != 2 || sa[..2] != sb[..2] || sa[..2] != ss[..] {
        return Err(Error::shape(
            "lowrank_vec_forward",
            format!("σ {ss:?}, a {sa:?}, b {sb:?} are inconsistent"),
        ));
    }
    let (c, r, m, n) = (sa[0], sa[1], sa[2], sb[2]);
    let mut acc: Option<Var> = None;
    for k in 0..r {
        let br = tape.select_rank(b, k)?;
        let br = tape.reshape(br, &[c, 1, n])?;
        let proj = tape.channel_dense(x, br)?;
        let ar = tape.select_rank(a, k)?;
        let ar = tape.reshape(ar, &[c, m, 1])?;
        let term = tape.channel_dense(proj, ar)?;
        let term = tape.channel_scale(term, sigma, k)?;
        acc = Some(match acc {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    acc.ok_or_else(|| Error::shape("lowrank_vec_forward", "rank must be ≥ 1"))
}

/// Matrix-factored layer over every spatial axis of `x` (2D or 3D).
pub fn lord_forward(tape: &mut Tape, x: Var, eta: Var, factors: &[Var]) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != factors.len() + 1 {
        return Err(Error::shape(
            "lord_forward",
            format!("{} factors for input {:?}", factors.len(), xs),
        ));
    }
    let es = tape.value(eta).shape().to_vec();
    if es.len() != 2 || es[0] != xs[0] {
        return Err(Error::shape("lord_forward", format!("η {es:?} for input {xs:?}")));
    }
    let mut acc: Option<Var> = None;
    for r in 0..es[1] {
        let mut y = x;
        for (axis, &a) in factors.iter().enumerate() {
            let ar = tape.select_rank(a, r)?;
            y = tape.axis_matmul(y, ar, axis)?;
        }
        let term = tape.channel_scale(y, eta, r)?;
        acc = Some(match acc {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    acc.ok_or_else(|| Error::shape("lord_forward", "rank must be ≥ 1"))
}

pub fn lord2d_forward(tape: &mut Tape, x: Var, eta: Var, a1: Var, a2: Var) -> Result<Var> {
    if tape.value(x).ndim() != 3 {
        return Err(Error::shape("lord2d_forward", "expected a [C, I1, I2] input"));
    }
    lord_forward(tape, x, eta, &[a1, a2])
}

pub fn lord3d_forward(tape: &mut Tape, x: Var, eta: Var, a1: Var, a2: Var, a3: Var) -> Result<Var> {
    if tape.value(x).ndim() != 4 {
        return Err(Error::shape("lord3d_forward", "expected a [C, I1, I2, I3] input"));
    }
    lord_forward(tape, x, eta, &[a1, a2, a3])
}

/// Evaluates factored weights on a plain field.
pub fn apply_factors(x: &Field, p: &LordFactorWeights) -> Result<Field> {
    p.validate()?;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let eta = t.constant(p.eta.clone());
    let fs: Vec<Var> = p.factors.iter().map(|f| t.constant(f.clone())).collect();
    let y = lord_forward(&mut t, xv, eta, &fs)?;
    Ok(t.value(y).clone())
}

/// Largest dense weight [`materialize_dense`] will build.
pub const MAX_DENSE_ENTRIES: usize = 1 << 26;

/// Explicit Kronecker-sum weight `W_c[(o…), (i…)] = Σ_r η_{c,r} Π_k A_{c,r,k}[i_k, o_k]`.
pub fn materialize_dense(p: &LordFactorWeights) -> Result<McfcWeights> {
    p.validate()?;
    let (c, r) = (p.channels(), p.rank());
    let ins = p.in_dims();
    let outs = p.out_dims();
    let n: usize = ins.iter().product();
    let m: usize = outs.iter().product();
    let total = c.checked_mul(m).and_then(|v| v.checked_mul(n));
    if total.map_or(true, |t| t > MAX_DENSE_ENTRIES) {
        return Err(Error::size(
            "materialize_dense",
            format!("dense weight {c}×{m}×{n} exceeds {MAX_DENSE_ENTRIES} entries"),
        ));
    }
    let d = ins.len();
    let w = Field::from_fn(&[c, m, n], |ix| {
        let (ch, mut mo, mut ni) = (ix[0], ix[1], ix[2]);
        let mut o_idx = vec![0; d];
        let mut i_idx = vec![0; d];
        for k in (0..d).rev() {
            o_idx[k] = mo % outs[k];
            mo /= outs[k];
            i_idx[k] = ni % ins[k];
            ni /= ins[k];
        }
        (0..r)
            .map(|rr| {
                let mut prod = p.eta.get(&[ch, rr]);
                for k in 0..d {
                    prod *= p.factors[k].get(&[ch, rr, i_idx[k], o_idx[k]]);
                }
                prod
            })
            .sum()
    });
    Ok(McfcWeights { w })
}

/// Rank-1 vector pairs per axis: `A_{c,r,i} = a_{c,r,i} ⊗ b_{c,r,i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    pub sigma: Field,
    /// `a_i: C×R×I_i`
    pub a: Vec<Field>,
    /// `b_i: C×R×O_i`
    pub b: Vec<Field>,
}

impl CpFactors {
    /// The matrix-factored weights whose factors are the outer products `a ⊗ b`.
    pub fn to_matrix_factors(&self) -> LordFactorWeights {
        let factors = self
            .a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| {
                let (c, r, i, o) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
                Field::from_fn(&[c, r, i, o], |ix| {
                    a.get(&[ix[0], ix[1], ix[2]]) * b.get(&[ix[0], ix[1], ix[3]])
                })
            })
            .collect();
        LordFactorWeights {
            eta: self.sigma.clone(),
            factors,
        }
    }

    /// Direct evaluation of the CP form on a 2D input by explicit sums.
    pub fn eval_direct_2d(&self, x: &Field) -> Result<Field> {
        if self.a.len() != 2 || x.ndim() != 3 {
            return Err(Error::shape("cp_eval", "two-axis factors and a [C, I1, I2] input required"));
        }
        let (c, r) = (self.sigma.shape()[0], self.sigma.shape()[1]);
        let (i1, i2) = (self.a[0].shape()[2], self.a[1].shape()[2]);
        let (o1, o2) = (self.b[0].shape()[2], self.b[1].shape()[2]);
        if x.shape() != [c, i1, i2] {
            return Err(Error::shape("cp_eval", format!("input {:?}", x.shape())));
        }
        Ok(Field::from_fn(&[c, o1, o2], |ix| {
            let ch = ix[0];
            let mut s = 0.0;
            for rr in 0..r {
                let mut inner = 0.0;
                for p in 0..i1 {
                    for q in 0..i2 {
                        inner += self.a[0].get(&[ch, rr, p])
                            * self.a[1].get(&[ch, rr, q])
                            * x.get(&[ch, p, q]);
                    }
                }
                s += self.sigma.get(&[ch, rr])
                    * inner
                    * self.b[0].get(&[ch, rr, ix[1]])
                    * self.b[1].get(&[ch, rr, ix[2]]);
            }
            s
        }))
    }

    /// `C·R·Σ_i (I_i + O_i)`.
    pub fn vector_count(&self) -> usize {
        self.a.iter().chain(&self.b).map(Field::len).sum()
    }
}

/// Max deviation between the matrix-factored evaluation of rank-1 factors and
/// the direct CP evaluation, on input `x`.
pub fn cp_specialization_check(p: &CpFactors, x: &Field) -> Result<f64> {
    let direct = p.eval_direct_2d(x)?;
    let factored = apply_factors(x, &p.to_matrix_factors())?;
    direct.max_abs_diff(&factored)
}

/// Parameter counts of one multi-channel layer in its three forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCounts {
    /// `C·M·N`
    pub dense: usize,
    /// `C·R·Σ_i (I_i + O_i)`
    pub cp: usize,
    /// `C·R·Σ_i I_i·O_i`
    pub matrix_factored: usize,
}

pub fn layer_counts(channels: usize, rank: usize, ins: &[usize], outs: &[usize]) -> LayerCounts {
    let n: usize = ins.iter().product();
    let m: usize = outs.iter().product();
    LayerCounts {
        dense: channels * m * n,
        cp: channels * rank * ins.iter().zip(outs).map(|(i, o)| i + o).sum::<usize>(),
        matrix_factored: channels * rank * ins.iter().zip(outs).map(|(i, o)| i * o).sum::<usize>(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkVariant {
    /// Activation-free: lift, stacked factored layers, head.
    PoissonLinear,
    /// Lift, Lord modules with GELU embeddings, head.
    NsLord,
}

/// Where the factored layer sits inside a Lord module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorPlacement {
    /// embed → factored (on the second embedding width) → mixer
    AfterEmbed,
    /// embed → mixer → factored (on the module width)
    AfterMixer,
}

fn default_placement() -> FactorPlacement {
    FactorPlacement::AfterMixer
}

fn default_embed() -> [usize; 2] {
    [256, 128]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: NetworkVariant,
    pub channels: usize,
    /// Factored layers (linear variant) or Lord modules (NS variant).
    pub layers: usize,
    #[serde(default = "one")]
    pub rank: usize,
    /// Side of the square spatial input.
    pub side: usize,
    /// 1×1 channel mixers between consecutive factored layers (linear variant).
    #[serde(default)]
    pub mixers: bool,
    #[serde(default = "default_embed")]
    pub embed_hidden: [usize; 2],
    #[serde(default = "default_placement")]
    pub factor_placement: FactorPlacement,
    /// Start the output projection at zero, so the untrained network predicts 0.
    #[serde(default)]
    pub zero_head: bool,
}

fn one() -> usize {
    1
}

impl NetworkConfig {
    /// Linear factored network for Poisson problems.
    pub fn poisson_linear(side: usize, channels: usize, layers: usize) -> Self {
        NetworkConfig {
            variant: NetworkVariant::PoissonLinear,
            channels,
            layers,
            rank: 1,
            side,
            mixers: false,
            embed_hidden: default_embed(),
            factor_placement: default_placement(),
            zero_head: false,
        }
    }

    /// Two Lord modules at 64 channels with 256/128 embeddings.
    pub fn ns_lord(side: usize) -> Self {
        NetworkConfig {
            variant: NetworkVariant::NsLord,
            channels: 64,
            layers: 2,
            rank: 1,
            side,
            mixers: false,
            embed_hidden: default_embed(),
            factor_placement: default_placement(),
            zero_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, d: &str| Err(Error::config(format!("network.{k}"), d.to_string()));
        if self.channels == 0 {
            return bad("channels", "must be ≥ 1");
        }
        if self.layers == 0 {
            return bad("layers", "must be ≥ 1");
        }
        if self.rank == 0 {
            return bad("rank", "must be ≥ 1");
        }
        if self.side == 0 {
            return bad("side", "must be ≥ 1");
        }
        if self.embed_hidden.contains(&0) {
            return bad("embed_hidden", "widths must be ≥ 1");
        }
        Ok(())
    }

    fn factor_width(&self) -> usize {
        match (self.variant, self.factor_placement) {
            (NetworkVariant::NsLord, FactorPlacement::AfterEmbed) => self.embed_hidden[1],
            _ => self.channels,
        }
    }

    /// Parameter names and shapes in initialization order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let (r, s) = (self.rank, self.side);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let factors = |out: &mut Vec<(String, Vec<usize>)>, p: &str, w: usize| {
            out.push((format!("{p}.eta"), vec![w, r]));
            out.push((format!("{p}.a1"), vec![w, r, s, s]));
            out.push((format!("{p}.a2"), vec![w, r, s, s]));
        };
        match self.variant {
            NetworkVariant::PoissonLinear => {
                out.push(("lift.w".into(), vec![c, 1]));
                for l in 0..self.layers {
                    factors(&mut out, &format!("layer{l}"), c);
                    if self.mixers && l + 1 < self.layers {
                        out.push((format!("mix{l}.w"), vec![c, c]));
                    }
                }
                out.push(("head.w".into(), vec![1, c]));
            }
            NetworkVariant::NsLord => {
                let [h1, h2] = self.embed_hidden;
                out.push(("lift.w".into(), vec![c, 1]));
                out.push(("lift.b".into(), vec![c]));
                for l in 0..self.layers {
                    let p = format!("module{l}");
                    out.push((format!("{p}.embed1.w"), vec![h1, c]));
                    out.push((format!("{p}.embed1.b"), vec![h1]));
                    out.push((format!("{p}.embed2.w"), vec![h2, h1]));
                    out.push((format!("{p}.embed2.b"), vec![h2]));
                    factors(&mut out, &format!("{p}.lord"), self.factor_width());
                    out.push((format!("{p}.mixer.w"), vec![c, h2]));
                    out.push((format!("{p}.mixer.b"), vec![c]));
                    out.push((format!("{p}.shortcut.w"), vec![c, c]));
                    out.push((format!("{p}.shortcut.b"), vec![c]));
                }
                out.push(("head.w".into(), vec![1, c]));
                out.push(("head.b".into(), vec![1]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Seeded initialization: η = 1, biases 0, factor matrices and 1×1
    /// weights normal with variance `1 / fan_in` (the head is zero under `zero_head`).
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in self.layout() {
            let f = if name.ends_with(".eta") {
                Field::filled(&shape, 1.0)
            } else if name.ends_with(".b") || (self.zero_head && name == "head.w") {
                Field::zeros(&shape)
            } else {
                let fan_in = if shape.len() == 4 { shape[2] } else { shape[1] };
                let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::Numerical(e.to_string()))?;
                Field::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            params.insert(name, f);
        }
        Ok(params)
    }

    /// Forward pass on a `[1, side, side]` input.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xs = tape.value(x).shape();
        if xs != [1, self.side, self.side] {
            return Err(Error::shape(
                "network",
                format!("input {xs:?} for a {0}×{0} network", self.side),
            ));
        }
        let factored = |tape: &mut Tape, h: Var, prefix: &str| -> Result<Var> {
            let eta = p.get(&format!("{prefix}.eta"))?;
            let a1 = p.get(&format!("{prefix}.a1"))?;
            let a2 = p.get(&format!("{prefix}.a2"))?;
            lord2d_forward(tape, h, eta, a1, a2)
        };
        match self.variant {
            NetworkVariant::PoissonLinear => {
                let mut h = tape.conv1x1(x, p.get("lift.w")?, None)?;
                for l in 0..self.layers {
                    h = factored(tape, h, &format!("layer{l}"))?;
                    if self.mixers && l + 1 < self.layers {
                        h = tape.conv1x1(h, p.get(&format!("mix{l}.w"))?, None)?;
                    }
                }
                tape.conv1x1(h, p.get("head.w")?, None)
            }
            NetworkVariant::NsLord => {
                let mut h = tape.conv1x1(x, p.get("lift.w")?, Some(p.get("lift.b")?))?;
                for l in 0..self.layers {
                    let pre = format!("module{l}");
                    let w = |k: &str| p.get(&format!("{pre}.{k}"));
                    let e = tape.conv1x1(h, w("embed1.w")?, Some(w("embed1.b")?))?;
                    let e = tape.gelu(e);
                    let e = tape.conv1x1(e, w("embed2.w")?, Some(w("embed2.b")?))?;
                    let body = match self.factor_placement {
                        FactorPlacement::AfterEmbed => {
                            let f = factored(tape, e, &format!("{pre}.lord"))?;
                            tape.conv1x1(f, w("mixer.w")?, Some(w("mixer.b")?))?
                        }
                        FactorPlacement::AfterMixer => {
                            let m = tape.conv1x1(e, w("mixer.w")?, Some(w("mixer.b")?))?;
                            factored(tape, m, &format!("{pre}.lord"))?
                        }
                    };
                    let short = tape.conv1x1(h, w("shortcut.w")?, Some(w("shortcut.b")?))?;
                    h = tape.add(short, body)?;
                }
                tape.conv1x1(h, p.get("head.w")?, Some(p.get("head.b")?))
            }
        }
    }
}

/// One Lord module with explicit parameter names (`embed1.w`, …, `shortcut.b`).
pub fn lord_module_forward(tape: &mut Tape, x: Var, p: &Bound, placement: FactorPlacement) -> Result<Var> {
    let e = tape.conv1x1(x, p.get("embed1.w")?, Some(p.get("embed1.b")?))?;
    let e = tape.gelu(e);
    let e = tape.conv1x1(e, p.get("embed2.w")?, Some(p.get("embed2.b")?))?;
    let (eta, a1, a2) = (p.get("lord.eta")?, p.get("lord.a1")?, p.get("lord.a2")?);
    let body = match placement {
        FactorPlacement::AfterEmbed => {
            let f = lord2d_forward(tape, e, eta, a1, a2)?;
            tape.conv1x1(f, p.get("mixer.w")?, Some(p.get("mixer.b")?))?
        }
        FactorPlacement::AfterMixer => {
            let m = tape.conv1x1(e, p.get("mixer.w")?, Some(p.get("mixer.b")?))?;
            lord2d_forward(tape, m, eta, a1, a2)?
        }
    };
    let short = tape.conv1x1(x, p.get("shortcut.w")?, Some(p.get("shortcut.b")?))?;
    tape.add(short, body)
}
