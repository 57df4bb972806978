/// Linear latency model of one engine.
///
/// A decode iteration over `B` effective resident tokens costs `c0 + c1·B`;
/// a fill chunk of `F` prompt tokens costs `c2 + c3·F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub c0_ms: f64,
    pub c1_ms_per_token: f64,
    pub c2_ms: f64,
    pub c3_ms_per_token: f64,
    /// Count tokens of a context shared by several running requests once per
    /// iteration instead of once per request.
    pub shared_kernel: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            c0_ms: 20.0,
            c1_ms_per_token: 0.00325,
            c2_ms: 5.0,
            c3_ms_per_token: 0.002,
            shared_kernel: true,
        }
    }
}

impl CostModel {
    pub fn decode_ms(&self, effective_tokens: usize) -> f64 {
        self.c0_ms + self.c1_ms_per_token * effective_tokens as f64
    }

    pub fn fill_ms(&self, fill_tokens: usize) -> f64 {
        if fill_tokens == 0 {
            0.0
        } else {
            self.c2_ms + self.c3_ms_per_token * fill_tokens as f64
        }
    }

    /// Output tokens per millisecond for `batch` requests of `tokens_each`.
    pub fn decode_throughput(&self, batch: usize, tokens_each: usize) -> f64 {
        if batch == 0 {
            return 0.0;
        }
        batch as f64 / self.decode_ms(batch * tokens_each)
    }
}
