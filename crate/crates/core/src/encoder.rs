//! Small bidirectional transformer encoder with optional bottleneck
//! adapters.
//!
//! Layers are post-norm: `x ← LN(x + A(Attn(x)))`, `x ← LN(x + A(FFN(x)))`,
//! where `A` is an adapter or the identity depending on placement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamRole, ParamSpec};
use crate::tensor::{Graph, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Number of segment ids the encoder accepts (single input or pair).
pub const SEGMENTS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    #[default]
    AfterFfnOnly,
    AfterAttnAndFfn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    /// Std of the down-projection initializer.
    pub init_scale: f64,
    pub up_projection_zero_init: bool,
}

impl AdapterConfig {
    pub fn new(bottleneck: usize) -> Self {
        Self {
            bottleneck,
            init_scale: 0.02,
            up_projection_zero_init: true,
        }
    }
}

/// Fields missing from a serialized config take their [`EncoderConfig::toy`]
/// values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub adapter: Option<AdapterConfig>,
    pub adapter_placement: AdapterPlacement,
    /// Std of the normal initializer for backbone weight matrices.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Desk-scale default: vocab 512, H=64, 2 layers, 4 heads, FFN 4·H,
    /// 64 positions, FFN-side adapters with bottleneck 16.
    pub fn toy() -> Self {
        Self {
            vocab_size: 512,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_seq: 64,
            adapter: Some(AdapterConfig::new(16)),
            adapter_placement: AdapterPlacement::AfterFfnOnly,
            init_std: 0.125,
        }
    }

    /// RoBERTa-large dimensions with 64-wide adapters, for parameter
    /// accounting only.
    pub fn roberta_large_shape() -> Self {
        Self {
            vocab_size: 50265,
            hidden: 1024,
            layers: 24,
            heads: 16,
            ffn_mult: 4,
            max_seq: 514,
            adapter: Some(AdapterConfig::new(64)),
            adapter_placement: AdapterPlacement::AfterFfnOnly,
            init_std: 0.02,
        }
    }

    pub fn ffn_inner(&self) -> usize {
        self.ffn_mult * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("hidden, layers, heads and ffn_mult must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return bad("vocab_size and max_seq must be positive".into());
        }
        if let Some(a) = &self.adapter {
            if a.bottleneck == 0 {
                return bad("adapter bottleneck must be at least 1".into());
            }
            if a.bottleneck >= self.hidden {
                return bad(format!(
                    "adapter bottleneck {} must be below hidden {}",
                    a.bottleneck, self.hidden
                ));
            }
        }
        Ok(())
    }

    /// Adapter sites per layer under the current placement.
    pub fn adapter_sites(&self) -> &'static [&'static str] {
        match (&self.adapter, self.adapter_placement) {
            (None, _) => &[],
            (Some(_), AdapterPlacement::AfterFfnOnly) => &["ffn_adapter"],
            (Some(_), AdapterPlacement::AfterAttnAndFfn) => &["attention_adapter", "ffn_adapter"],
        }
    }

    /// Every encoder tensor, in allocation order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let h = self.hidden;
        let f = self.ffn_inner();
        let w = Init::Normal(self.init_std);
        let mut specs = vec![
            ParamSpec::new(
                "embeddings.token",
                vec![self.vocab_size, h],
                ParamRole::Embedding,
                Init::Normal(1.0),
            ),
            ParamSpec::new(
                "embeddings.position",
                vec![self.max_seq, h],
                ParamRole::Embedding,
                Init::Normal(0.1),
            ),
            ParamSpec::new(
                "embeddings.segment",
                vec![SEGMENTS, h],
                ParamRole::Embedding,
                Init::Normal(0.1),
            ),
        ];
        norm_specs(&mut specs, "embeddings.norm", h);
        for l in 0..self.layers {
            let p = format!("layers.{l}");
            for proj in ["query", "key", "value", "output"] {
                linear_specs(&mut specs, &format!("{p}.attention.{proj}"), h, h, w, false);
            }
            if let (Some(a), AdapterPlacement::AfterAttnAndFfn) =
                (&self.adapter, self.adapter_placement)
            {
                adapter_specs(&mut specs, &format!("{p}.attention_adapter"), h, a);
            }
            norm_specs(&mut specs, &format!("{p}.attention_norm"), h);
            linear_specs(&mut specs, &format!("{p}.ffn.inner"), h, f, w, false);
            linear_specs(&mut specs, &format!("{p}.ffn.outer"), f, h, w, false);
            if let Some(a) = &self.adapter {
                adapter_specs(&mut specs, &format!("{p}.ffn_adapter"), h, a);
            }
            norm_specs(&mut specs, &format!("{p}.ffn_norm"), h);
        }
        specs
    }
}

fn norm_specs(specs: &mut Vec<ParamSpec>, prefix: &str, h: usize) {
    specs.push(ParamSpec::new(
        format!("{prefix}.gain"),
        vec![h],
        ParamRole::NormGain,
        Init::Ones,
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.bias"),
        vec![h],
        ParamRole::NormBias,
        Init::Zeros,
    ));
}

fn linear_specs(
    specs: &mut Vec<ParamSpec>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    init: Init,
    adapter: bool,
) {
    let (wr, br) = if adapter {
        (ParamRole::AdapterWeight, ParamRole::AdapterBias)
    } else {
        (ParamRole::Weight, ParamRole::Bias)
    };
    specs.push(ParamSpec::new(
        format!("{prefix}.weight"),
        vec![fan_in, fan_out],
        wr,
        init,
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.bias"),
        vec![fan_out],
        br,
        Init::Zeros,
    ));
}

fn adapter_specs(specs: &mut Vec<ParamSpec>, prefix: &str, h: usize, a: &AdapterConfig) {
    let up = if a.up_projection_zero_init {
        Init::Zeros
    } else {
        Init::Normal(a.init_scale)
    };
    linear_specs(
        specs,
        &format!("{prefix}.down"),
        h,
        a.bottleneck,
        Init::Normal(a.init_scale),
        true,
    );
    linear_specs(specs, &format!("{prefix}.up"), a.bottleneck, h, up, true);
}

/// Graph handles of one adapter.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub down_weight: Var,
    pub down_bias: Var,
    pub up_weight: Var,
    pub up_bias: Var,
}

impl AdapterVars {
    pub fn bind(params: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            down_weight: params.get(&format!("{prefix}.down.weight"))?,
            down_bias: params.get(&format!("{prefix}.down.bias"))?,
            up_weight: params.get(&format!("{prefix}.up.weight"))?,
            up_bias: params.get(&format!("{prefix}.up.bias"))?,
        })
    }
}

/// `x·W + b`
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    g.add_bias(y, bias)
}

fn linear_named(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    linear(
        g,
        x,
        p.get(&format!("{prefix}.weight"))?,
        p.get(&format!("{prefix}.bias"))?,
    )
}

fn norm_named(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    g.layer_norm(
        x,
        p.get(&format!("{prefix}.gain"))?,
        p.get(&format!("{prefix}.bias"))?,
        LAYER_NORM_EPS,
    )
}

/// `A(x) = U(GeLU(D(x))) + x`, residual included.
pub fn apply_adapter(g: &mut Graph, x: Var, a: &AdapterVars) -> Result<Var> {
    let down = linear(g, x, a.down_weight, a.down_bias)?;
    let act = g.gelu(down);
    let up = linear(g, act, a.up_weight, a.up_bias)?;
    g.add(up, x)
}

/// Hidden states for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[T + n] × H`, where `T` is the soft-prompt length.
    pub hidden: Var,
    /// Input tokens dropped from the right to fit `max_seq`.
    pub truncated: usize,
    /// Rows occupied by the soft prompt (hidden row of token `j` is
    /// `prompt_len + j`).
    pub prompt_len: usize,
}

/// Prepends soft-prompt rows to token embeddings.
pub fn soft_prompt_prepend(
    g: &mut Graph,
    prompt: Var,
    token_embeddings: Var,
    max_seq: usize,
) -> Result<Var> {
    let t = g.value(prompt).rows();
    let n = g.value(token_embeddings).rows();
    if t + n > max_seq {
        return Err(Error::Contract(format!(
            "soft prompt of {t} plus {n} tokens exceeds max_seq {max_seq}"
        )));
    }
    if t == 0 {
        return Ok(token_embeddings);
    }
    g.concat_rows(&[prompt, token_embeddings])
}

/// Runs the encoder over one sequence.
///
/// Ids must be below `vocab_size`. Without a soft prompt, sequences
/// longer than `max_seq` are cut from the right and the cut is reported
/// in [`Encoded::truncated`]; with a prompt, overflow is an error.
pub fn encode(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &EncoderConfig,
    ids: &[usize],
    segments: Option<&[usize]>,
    prompt: Option<Var>,
) -> Result<Encoded> {
    if ids.is_empty() {
        return Err(Error::Input("cannot encode an empty sequence".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    if let Some(seg) = segments {
        if seg.len() != ids.len() {
            return Err(Error::Input(format!(
                "{} segment ids for {} tokens",
                seg.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= SEGMENTS) {
            return Err(Error::Input(format!("segment id {bad} out of range")));
        }
    }

    let mut truncated = 0;
    let mut ids = ids;
    let mut segments = segments;
    if prompt.is_none() && ids.len() > cfg.max_seq {
        truncated = ids.len() - cfg.max_seq;
        ids = &ids[..cfg.max_seq];
        segments = segments.map(|s| &s[..cfg.max_seq]);
    }

    let tok = g.gather_rows(params.get("embeddings.token")?, ids)?;
    let (x, prompt_len) = match prompt {
        Some(p) => {
            let t = g.value(p).rows();
            (soft_prompt_prepend(g, p, tok, cfg.max_seq)?, t)
        }
        None => (tok, 0),
    };
    let len = prompt_len + ids.len();
    let positions: Vec<usize> = (0..len).collect();
    let pos = g.gather_rows(params.get("embeddings.position")?, &positions)?;
    let seg_ids: Vec<usize> = std::iter::repeat_n(0, prompt_len)
        .chain(match segments {
            Some(s) => s.to_vec(),
            None => vec![0; ids.len()],
        })
        .collect();
    let seg = g.gather_rows(params.get("embeddings.segment")?, &seg_ids)?;
    let x = g.add(x, pos)?;
    let x = g.add(x, seg)?;
    let mut x = norm_named(g, params, "embeddings.norm", x)?;

    let dh = cfg.hidden / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let p = format!("layers.{l}");
        let q = linear_named(g, params, &format!("{p}.attention.query"), x)?;
        let k = linear_named(g, params, &format!("{p}.attention.key"), x)?;
        let v = linear_named(g, params, &format!("{p}.attention.value"), x)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vh)?);
        }
        let merged = g.concat_cols(&heads)?;
        let mut attn = linear_named(g, params, &format!("{p}.attention.output"), merged)?;
        if cfg.adapter.is_some() && cfg.adapter_placement == AdapterPlacement::AfterAttnAndFfn {
            let a = AdapterVars::bind(params, &format!("{p}.attention_adapter"))?;
            attn = apply_adapter(g, attn, &a)?;
        }
        let res = g.add(x, attn)?;
        x = norm_named(g, params, &format!("{p}.attention_norm"), res)?;

        let inner = linear_named(g, params, &format!("{p}.ffn.inner"), x)?;
        let act = g.gelu(inner);
        let mut ffn = linear_named(g, params, &format!("{p}.ffn.outer"), act)?;
        if cfg.adapter.is_some() {
            let a = AdapterVars::bind(params, &format!("{p}.ffn_adapter"))?;
            ffn = apply_adapter(g, ffn, &a)?;
        }
        let res = g.add(x, ffn)?;
        x = norm_named(g, params, &format!("{p}.ffn_norm"), res)?;
    }

    Ok(Encoded {
        hidden: x,
        truncated,
        prompt_len,
    })
}

/// Vocabulary scores `h · Wᵀ` for every row of `h[S×H]` against the
/// output embedding `W[V×H]`.
pub fn mlm_logits(g: &mut Graph, h: Var, output_embedding: Var) -> Result<Var> {
    g.matmul_t(h, output_embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{Rng, Tensor};

    fn tiny(adapter: bool) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            max_seq: 16,
            adapter: adapter.then(|| AdapterConfig::new(2)),
            adapter_placement: AdapterPlacement::AfterFfnOnly,
            init_std: 0.3,
        }
    }

    #[test]
    fn validation() {
        assert!(EncoderConfig::toy().validate().is_ok());
        let mut c = tiny(true);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(true);
        c.adapter = Some(AdapterConfig::new(0));
        assert!(c.validate().is_err());
        let mut c = tiny(true);
        c.adapter = Some(AdapterConfig::new(8));
        assert!(c.validate().is_err());
    }

    #[test]
    fn adapter_with_zero_up_projection_is_identity() {
        let mut rng = Rng::new(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let a = AdapterVars {
            down_weight: g.constant(Tensor::randn(&[8, 2], 1.0, &mut rng)),
            down_bias: g.constant(Tensor::randn(&[2], 1.0, &mut rng)),
            up_weight: g.constant(Tensor::zeros(&[2, 8])),
            up_bias: g.constant(Tensor::zeros(&[8])),
        };
        let y = apply_adapter(&mut g, x, &a).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn adapter_with_identity_projections_is_gelu_plus_input() {
        let mut rng = Rng::new(2);
        let mut g = Graph::new();
        let xt = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let x = g.constant(xt.clone());
        let a = AdapterVars {
            down_weight: g.constant(Tensor::identity(4)),
            down_bias: g.constant(Tensor::zeros(&[4])),
            up_weight: g.constant(Tensor::identity(4)),
            up_bias: g.constant(Tensor::zeros(&[4])),
        };
        let y = apply_adapter(&mut g, x, &a).unwrap();
        for (out, &xi) in g.value(y).data().iter().zip(xt.data()) {
            let want = crate::tensor::gelu(xi) + xi;
            assert!((out - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_vocab_and_truncates_overlong() {
        let cfg = tiny(false);
        let store = ParamStore::from_specs(&cfg.param_specs(), &mut Rng::new(0)).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        assert!(matches!(
            encode(&mut g, &p, &cfg, &[1, 25], None, None),
            Err(Error::Input(_))
        ));
        let ids: Vec<usize> = (0..20).map(|i| i % 20).collect();
        let out = encode(&mut g, &p, &cfg, &ids, None, None).unwrap();
        assert_eq!(out.truncated, 4);
        assert_eq!(g.value(out.hidden).shape(), &[16, 8]);
    }

    #[test]
    fn mlm_logits_one_hot_readout_and_scan() {
        let mut g = Graph::new();
        // W = identity padded to 6×4; h one-hot at index 2.
        let mut w = Tensor::zeros(&[6, 4]);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        let wv = g.constant(w);
        let h = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]).unwrap());
        let logits = mlm_logits(&mut g, h, wv).unwrap();
        assert_eq!(g.value(logits).data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn output_shape_independent_of_placement() {
        for placement in [
            AdapterPlacement::AfterFfnOnly,
            AdapterPlacement::AfterAttnAndFfn,
        ] {
            let mut cfg = tiny(true);
            cfg.adapter_placement = placement;
            let store = ParamStore::from_specs(&cfg.param_specs(), &mut Rng::new(0)).unwrap();
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let out = encode(&mut g, &p, &cfg, &[2, 5, 6, 4, 3], None, None).unwrap();
            assert_eq!(g.value(out.hidden).shape(), &[5, 8]);
        }
    }
}
