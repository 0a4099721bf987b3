//! Parameter naming and indices into the flat parameter list.

use super::ToyLmConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct AttnIdx {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct FfIdx {
    pub ln: usize,
    pub ff1: usize,
    pub ff2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct EncLayerIdx {
    pub ln: usize,
    pub attn: AttnIdx,
    pub ff: FfIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct DecLayerIdx {
    pub ln1: usize,
    pub self_attn: AttnIdx,
    pub ln2: usize,
    pub cross: AttnIdx,
    pub ff: FfIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub embed: usize,
    pub enc_pos: usize,
    pub dec_pos: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: usize,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: usize,
    pub head: usize,
    /// Linear maps that receive adapters, in a fixed order.
    pub adaptable: Vec<usize>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn mat(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.add(name, (rows, cols), Init::Normal)
    }

    fn gain(&mut self, name: String, d: usize) -> usize {
        self.add(name, (1, d), Init::Ones)
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.mat(format!("{prefix}.q"), d, d),
            k: self.mat(format!("{prefix}.k"), d, d),
            v: self.mat(format!("{prefix}.v"), d, d),
            o: self.mat(format!("{prefix}.o"), d, d),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfIdx {
        FfIdx {
            ln: self.gain(format!("{prefix}.ln_ff"), d),
            ff1: self.mat(format!("{prefix}.ff1"), d_ff, d),
            ff2: self.mat(format!("{prefix}.ff2"), d, d_ff),
        }
    }
}

impl Layout {
    pub fn build(cfg: &ToyLmConfig, vocab_len: usize) -> (Layout, Vec<ParamSpec>) {
        let d = cfg.d_model;
        let mut b = Builder { specs: Vec::new() };
        let embed = b.mat("embed".into(), vocab_len, d);
        let enc_pos = b.mat("enc.pos".into(), cfg.max_prompt_len, d);
        let dec_pos = b.mat("dec.pos".into(), cfg.max_cont_len, d);
        let enc: Vec<EncLayerIdx> = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncLayerIdx {
                    ln: b.gain(format!("{p}.ln_attn"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    ff: b.ff(&p, d, cfg.d_ff),
                }
            })
            .collect();
        let enc_ln = b.gain("enc.ln_out".into(), d);
        let dec: Vec<DecLayerIdx> = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayerIdx {
                    ln1: b.gain(format!("{p}.ln_self"), d),
                    self_attn: b.attn(&format!("{p}.self"), d),
                    ln2: b.gain(format!("{p}.ln_cross"), d),
                    cross: b.attn(&format!("{p}.cross"), d),
                    ff: b.ff(&p, d, cfg.d_ff),
                }
            })
            .collect();
        let dec_ln = b.gain("dec.ln_out".into(), d);
        let head = b.mat("lm_head".into(), vocab_len, d);
        let mut adaptable = Vec::new();
        for l in &enc {
            adaptable.extend([l.attn.q, l.attn.v, l.ff.ff2]);
        }
        for l in &dec {
            adaptable.extend([l.self_attn.q, l.self_attn.v, l.cross.q, l.cross.v, l.ff.ff2]);
        }
        let layout = Layout {
            embed,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            head,
            adaptable,
        };
        (layout, b.specs)
    }
}
