use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::event::{Addr, OpType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Variant {
    Dense,
    Moe { total_experts: u32, k: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtraOps {
    /// Softcapped attention scores, post-attention norm and a scaled embedding.
    pub gemma_style: bool,
    /// Bias ADD after each of the Q, K and V projections.
    pub qwen_style: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: u32,
    pub hidden_dim: u64,
    pub heads: u64,
    pub kv_heads: u64,
    pub ffn_dim: u64,
    pub vocab: u64,
    pub variant: Variant,
    #[serde(default)]
    pub extra_ops: ExtraOps,
}

impl ModelSpec {
    pub const PRESETS: [&'static str; 4] = ["dense2", "qwen2", "gemma2", "moe60"];

    pub fn preset(name: &str) -> Option<ModelSpec> {
        let base = ModelSpec {
            name: name.to_string(),
            layers: 2,
            hidden_dim: 256,
            heads: 4,
            kv_heads: 2,
            ffn_dim: 512,
            vocab: 1024,
            variant: Variant::Dense,
            extra_ops: ExtraOps::default(),
        };
        match name {
            "dense2" => Some(base),
            "qwen2" => Some(ModelSpec { extra_ops: ExtraOps { qwen_style: true, ..Default::default() }, ..base }),
            "gemma2" => Some(ModelSpec { extra_ops: ExtraOps { gemma_style: true, ..Default::default() }, ..base }),
            "moe60" => Some(ModelSpec { ffn_dim: 128, variant: Variant::Moe { total_experts: 60, k: 4 }, ..base }),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden_dim / self.heads
    }

    pub fn experts(&self) -> Option<(u32, u32)> {
        match self.variant {
            Variant::Dense => None,
            Variant::Moe { total_experts, k } => Some((total_experts, k)),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.layers == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 || self.vocab == 0 {
            return bad("layers and all dimensions must be positive".into());
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!("hidden_dim {} is not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.kv_heads == 0 || !self.heads.is_multiple_of(self.kv_heads) {
            return bad(format!("heads {} is not a multiple of kv_heads {}", self.heads, self.kv_heads));
        }
        if let Variant::Moe { total_experts, k } = self.variant {
            if k == 0 || k > total_experts {
                return bad(format!("k = {k} must be in 1..={total_experts}"));
            }
            if k as usize > crate::wire::MAX_EXPERTS {
                return bad(format!("k = {k} exceeds the {} expert slots of a record", crate::wire::MAX_EXPERTS));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrcRef {
    Op(usize),
    Const(usize),
}

/// One operator of the forward graph, before timing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpTemplate {
    pub name: String,
    pub op_type: OpType,
    pub layer: Option<u32>,
    pub srcs: Vec<SrcRef>,
    pub dims: [u64; 4],
    /// Work units the cost model charges for: M·N·K·H for matmuls, output
    /// elements otherwise.
    pub units: u64,
    pub weight_bytes: u64,
    /// Attention-score ops, which slow down as the KV cache grows.
    pub attention: bool,
}

impl OpTemplate {
    pub fn out_elems(&self) -> u64 {
        self.dims.iter().product()
    }
}

/// The forward graph of one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub ops: Vec<OpTemplate>,
    pub consts: Vec<String>,
}

pub const OP_ADDR_BASE: u64 = 0x7f3a_0000_0000;
pub const CONST_ADDR_BASE: u64 = 0x5561_0000_0000;

impl Graph {
    pub fn op_addr(index: usize) -> Addr {
        Addr(OP_ADDR_BASE + (index as u64 + 1) * 0x400)
    }

    pub fn const_addr(index: usize) -> Addr {
        Addr(CONST_ADDR_BASE + (index as u64 + 1) * 0x1000)
    }

    pub fn addr_of(src: SrcRef) -> Addr {
        match src {
            SrcRef::Op(i) => Self::op_addr(i),
            SrcRef::Const(i) => Self::const_addr(i),
        }
    }
}

struct Builder {
    ops: Vec<OpTemplate>,
    consts: Vec<String>,
    layer: Option<u32>,
}

impl Builder {
    fn c(&mut self, name: &str) -> SrcRef {
        let name = match self.layer {
            Some(l) if !name.starts_with("inp_") && name != "kq_mask" => format!("{name}-{l}"),
            _ => name.to_string(),
        };
        let i = self.consts.iter().position(|c| *c == name).unwrap_or_else(|| {
            self.consts.push(name);
            self.consts.len() - 1
        });
        SrcRef::Const(i)
    }

    fn dims(&self, src: SrcRef) -> [u64; 4] {
        match src {
            SrcRef::Op(i) => self.ops[i].dims,
            SrcRef::Const(_) => [1; 4],
        }
    }

    fn push(&mut self, name: &str, op_type: OpType, srcs: Vec<SrcRef>, dims: [u64; 4], extra_k: u64) -> SrcRef {
        let (units, weight_bytes) = match op_type {
            OpType::MulMat => {
                let k = self.dims(srcs[1])[0];
                let units = dims[0] * dims[1] * k * dims[2].max(1);
                let weight = if matches!(srcs[0], SrcRef::Const(_)) { dims[0] * k } else { 0 };
                (units, weight)
            }
            // dims = [N, experts_per_token, T]; extra_k carries the per-token count
            OpType::MulMatId => {
                let k = self.dims(srcs[1])[0];
                (dims[0] * k * extra_k * dims[2], dims[0] * k * extra_k)
            }
            _ => (dims.iter().product(), 0),
        };
        let full = match self.layer {
            Some(l) => format!("{name}-{l}"),
            None => name.to_string(),
        };
        let attention = name.starts_with("kq") && op_type != OpType::Cpy;
        self.ops.push(OpTemplate {
            name: full,
            op_type,
            layer: self.layer,
            srcs,
            dims,
            units,
            weight_bytes,
            attention,
        });
        SrcRef::Op(self.ops.len() - 1)
    }
}

/// Builds the forward graph for `n_tokens` new tokens over a KV window of
/// `n_kv` cached positions.
pub fn build_graph(model: &ModelSpec, n_tokens: u64, n_kv: u64) -> Graph {
    use OpType::{Add, Cpy, GetRows, Mul, MulMat, MulMatId, RmsNorm, Rope, SoftMax, Unary};
    let t = n_tokens;
    let h = model.hidden_dim;
    let nh = model.heads;
    let hd = model.head_dim();
    let kvd = hd * model.kv_heads;
    let f = model.ffn_dim;
    let g = model.extra_ops.gemma_style;
    let q = model.extra_ops.qwen_style;
    let mut b = Builder { ops: Vec::new(), consts: Vec::new(), layer: None };

    let (tok_embd, inp_tokens) = (b.c("token_embd"), b.c("inp_tokens"));
    let mut x = b.push("inp_embd", GetRows, vec![tok_embd, inp_tokens], [h, t, 1, 1], 0);
    if g {
        let s = b.c("inp_scale");
        x = b.push("inp_scaled", Mul, vec![x, s], [h, t, 1, 1], 0);
    }
    for layer in 0..model.layers {
        b.layer = Some(layer);
        let rms = b.push("attn_rms", RmsNorm, vec![x], [h, t, 1, 1], 0);
        let w = b.c("attn_norm.weight");
        let norm = b.push("attn_norm", Mul, vec![rms, w], [h, t, 1, 1], 0);
        let pos = b.c("inp_pos");

        let wq = b.c("wq");
        let mut qc = b.push("Qcur", MulMat, vec![wq, norm], [h, t, 1, 1], 0);
        if q {
            let bias = b.c("bq");
            qc = b.push("Qcur_bias", Add, vec![qc, bias], [h, t, 1, 1], 0);
        }
        let qr = b.push("Qcur_rope", Rope, vec![qc, pos], [hd, t, nh, 1], 0);
        let qcont = b.push("q_cont", Cpy, vec![qr], [hd, t, nh, 1], 0);

        let wk = b.c("wk");
        let mut kc = b.push("Kcur", MulMat, vec![wk, norm], [kvd, t, 1, 1], 0);
        if q {
            let bias = b.c("bk");
            kc = b.push("Kcur_bias", Add, vec![kc, bias], [kvd, t, 1, 1], 0);
        }
        let kr = b.push("Kcur_rope", Rope, vec![kc, pos], [hd, t, model.kv_heads, 1], 0);
        let kcache = b.c("k_cache");
        b.push("k_cache_cpy", Cpy, vec![kr, kcache], [kvd, t, 1, 1], 0);

        let wv = b.c("wv");
        let mut vc = b.push("Vcur", MulMat, vec![wv, norm], [kvd, t, 1, 1], 0);
        if q {
            let bias = b.c("bv");
            vc = b.push("Vcur_bias", Add, vec![vc, bias], [kvd, t, 1, 1], 0);
        }
        let vcache = b.c("v_cache");
        b.push("v_cache_cpy", Cpy, vec![vc, vcache], [kvd, t, 1, 1], 0);

        let mut kq = b.push("kq", MulMat, vec![kcache, qcont], [n_kv, t, nh, 1], 0);
        if g {
            kq = b.push("kq_scaled", SoftMax, vec![kq], [n_kv, t, nh, 1], 0);
            kq = b.push("kq_tanh", Unary, vec![kq], [n_kv, t, nh, 1], 0);
            kq = b.push("kq_softcap", SoftMax, vec![kq], [n_kv, t, nh, 1], 0);
            kq = b.push("kq_masked", SoftMax, vec![kq], [n_kv, t, nh, 1], 0);
        }
        let mask = b.c("kq_mask");
        let sm = b.push("kq_soft_max", SoftMax, vec![kq, mask], [n_kv, t, nh, 1], 0);
        let kqv = b.push("kqv", MulMat, vec![vcache, sm], [hd, t, nh, 1], 0);
        let merged = b.push("kqv_merged_cont", Cpy, vec![kqv], [h, t, 1, 1], 0);
        let wo = b.c("wo");
        let mut attn = b.push("attn_out", MulMat, vec![wo, merged], [h, t, 1, 1], 0);
        if g {
            attn = b.push("attn_post_norm", RmsNorm, vec![attn], [h, t, 1, 1], 0);
        }
        let ffn_inp = b.push("ffn_inp", Add, vec![attn, x], [h, t, 1, 1], 0);
        let frms = b.push("ffn_rms", RmsNorm, vec![ffn_inp], [h, t, 1, 1], 0);
        let fw = b.c("ffn_norm.weight");
        let fnorm = b.push("ffn_norm", Mul, vec![frms, fw], [h, t, 1, 1], 0);

        let ffn_out = match model.variant {
            Variant::Dense => {
                let wg = b.c("ffn_gate.weight");
                let gate = b.push("ffn_gate", MulMat, vec![wg, fnorm], [f, t, 1, 1], 0);
                let silu = b.push("ffn_silu", Unary, vec![gate], [f, t, 1, 1], 0);
                let wu = b.c("ffn_up.weight");
                let up = b.push("ffn_up", MulMat, vec![wu, fnorm], [f, t, 1, 1], 0);
                let par = b.push("ffn_gate_par", Mul, vec![silu, up], [f, t, 1, 1], 0);
                let wd = b.c("ffn_down.weight");
                b.push("ffn_out", MulMat, vec![wd, par], [h, t, 1, 1], 0)
            }
            Variant::Moe { total_experts, k } => {
                let (e, k) = (total_experts as u64, k as u64);
                let wgi = b.c("ffn_gate_inp.weight");
                let logits = b.push("ffn_moe_logits", MulMat, vec![wgi, fnorm], [e, t, 1, 1], 0);
                let probs = b.push("ffn_moe_probs", SoftMax, vec![logits], [e, t, 1, 1], 0);
                let wg = b.c("ffn_gate_exps.weight");
                let gate = b.push("ffn_moe_gate", MulMatId, vec![wg, fnorm, probs], [f, k, t, 1], k);
                let silu = b.push("ffn_moe_silu", Unary, vec![gate], [f, k, t, 1], 0);
                let wu = b.c("ffn_up_exps.weight");
                let up = b.push("ffn_moe_up", MulMatId, vec![wu, fnorm, probs], [f, k, t, 1], k);
                let par = b.push("ffn_moe_gate_par", Mul, vec![silu, up], [f, k, t, 1], 0);
                let wd = b.c("ffn_down_exps.weight");
                b.push("ffn_moe_down", MulMatId, vec![wd, par, probs], [h, k, t, 1], k)
            }
        };
        x = b.push("l_out", Add, vec![ffn_out, ffn_inp], [h, t, 1, 1], 0);
    }
    b.layer = None;
    let rms = b.push("result_rms", RmsNorm, vec![x], [h, t, 1, 1], 0);
    let w = b.c("output_norm.weight");
    let norm = b.push("result_norm", Mul, vec![rms, w], [h, t, 1, 1], 0);
    let out = b.c("output.weight");
    b.push("result_output", MulMat, vec![out, norm], [model.vocab, t, 1, 1], 0);
    Graph { ops: b.ops, consts: b.consts }
}
