use crate::error::{check_dim, check_rank, Result};
use crate::graph::{Graph, Var};

impl Graph {
    /// Single-head scaled dot-product self-attention over `tokens [B, T, d]`
    /// followed by the output projection. Projections act on row vectors
    /// (`x · W`); the residual connection is left to the caller.
    pub fn self_attention(
        &mut self,
        tokens: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
    ) -> Result<Var> {
        const OP: &str = "self_attention";
        let shape = self.shape(tokens).to_vec();
        check_rank(OP, &shape, 3)?;
        let d = shape[2];
        for w in [wq, wk, wv, wo] {
            let ws = self.shape(w).to_vec();
            check_rank(OP, &ws, 2)?;
            check_dim(OP, "projection rows", d, ws[0])?;
            check_dim(OP, "projection cols", d, ws[1])?;
        }
        let q = self.matmul(tokens, wq)?;
        let k = self.matmul(tokens, wk)?;
        let v = self.matmul(tokens, wv)?;
        let kt = self.transpose_last2(k)?;
        let scores = self.bmm(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax(scores, 2)?;
        let mixed = self.bmm(weights, v)?;
        self.matmul(mixed, wo)
    }
}
