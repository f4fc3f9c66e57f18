use super::ModelConfig;

/// A named, contiguous slice of the flat parameter store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

/// Offsets of every parameter block. Matrices are row-major `in × out`;
/// the output head is tied to `tok_emb`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    sections: Vec<Section>,
    total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let (v, d, f) = (c.vocab_size, c.d_model, c.d_ffn);
        let mut sections = Vec::new();
        let mut off = 0;
        let mut push = |name: String, len: usize, decay: bool| {
            let o = off;
            sections.push(Section { name, offset: o, len, decay });
            off += len;
            o
        };
        let tok_emb = push("tok_emb".into(), v * d, true);
        let pos_emb = push("pos_emb".into(), c.context_len * d, true);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.g"), d, false),
                ln1_b: push(p("ln1.b"), d, false),
                w_qkv: push(p("attn.w_qkv"), d * 3 * d, true),
                b_qkv: push(p("attn.b_qkv"), 3 * d, false),
                w_o: push(p("attn.w_o"), d * d, true),
                b_o: push(p("attn.b_o"), d, false),
                ln2_g: push(p("ln2.g"), d, false),
                ln2_b: push(p("ln2.b"), d, false),
                w_1: push(p("mlp.w_1"), d * f, true),
                b_1: push(p("mlp.b_1"), f, false),
                w_2: push(p("mlp.w_2"), f * d, true),
                b_2: push(p("mlp.b_2"), d, false),
            });
        }
        let lnf_g = push("ln_f.g".into(), d, false);
        let lnf_b = push("ln_f.b".into(), d, false);
        Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b, sections, total: off }
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}
