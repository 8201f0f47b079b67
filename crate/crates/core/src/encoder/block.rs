use rand::Rng;

use super::Param;
use crate::autograd::{Graph, Mask, NodeId, LAYER_NORM_EPS};
use crate::error::Result;

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Param,
    pub ln1_b: Param,
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub bk: Param,
    pub wv: Param,
    pub bv: Param,
    pub wo: Param,
    pub bo: Param,
    pub ln2_g: Param,
    pub ln2_b: Param,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub heads: usize,
}

pub(crate) struct BoundBlock {
    ids: [NodeId; 16],
    heads: usize,
}

impl Block {
    pub(crate) fn init(prefix: &str, d: usize, heads: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = std_in / (2.0 * depth as f64).sqrt();
        let hidden = 4 * d;
        let name = |s: &str| format!("{prefix}.{s}");
        Self {
            ln1_g: Param::filled(name("ln1.gamma"), &[d], 1.0),
            ln1_b: Param::filled(name("ln1.beta"), &[d], 0.0),
            wq: Param::normal(name("attn.wq"), &[d, d], std_in, rng),
            bq: Param::filled(name("attn.bq"), &[d], 0.0),
            wk: Param::normal(name("attn.wk"), &[d, d], std_in, rng),
            bk: Param::filled(name("attn.bk"), &[d], 0.0),
            wv: Param::normal(name("attn.wv"), &[d, d], std_in, rng),
            bv: Param::filled(name("attn.bv"), &[d], 0.0),
            wo: Param::normal(name("attn.wo"), &[d, d], std_out, rng),
            bo: Param::filled(name("attn.bo"), &[d], 0.0),
            ln2_g: Param::filled(name("ln2.gamma"), &[d], 1.0),
            ln2_b: Param::filled(name("ln2.beta"), &[d], 0.0),
            w1: Param::normal(name("mlp.w1"), &[d, hidden], std_in, rng),
            b1: Param::filled(name("mlp.b1"), &[hidden], 0.0),
            w2: Param::normal(name("mlp.w2"), &[hidden, d], std_out * 0.5, rng),
            b2: Param::filled(name("mlp.b2"), &[d], 0.0),
            heads,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundBlock {
        let p = self.params();
        let ids = std::array::from_fn(|i| p[i].bind(g));
        BoundBlock { ids, heads: self.heads }
    }
}

impl BoundBlock {
    pub(crate) fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: NodeId, segments: &[usize], mask: Mask) -> Result<NodeId> {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = self.ids;
        let h = g.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
        let q = g.linear(h, wq, Some(bq))?;
        let k = g.linear(h, wk, Some(bk))?;
        let v = g.linear(h, wv, Some(bv))?;
        let a = g.attention(q, k, v, self.heads, segments, mask)?;
        let a = g.linear(a, wo, Some(bo))?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
        let h = g.linear(h, w1, Some(b1))?;
        let h = g.gelu(h)?;
        let h = g.linear(h, w2, Some(b2))?;
        g.add(x, h)
    }
}
