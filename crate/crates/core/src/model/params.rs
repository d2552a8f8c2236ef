use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::numerics::{Matrix, SeededRng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Low-rank delta `x ↦ scale · (x · down) · up`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<S> {
    pub down: Matrix<S>,
    pub up: Matrix<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<S> {
    pub q: Adapter<S>,
    pub k: Adapter<S>,
    pub v: Adapter<S>,
    pub o: Adapter<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lora<S> {
    pub config: LoraConfig,
    pub layers: Vec<LoraLayer<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub attn_norm: Matrix<S>,
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub mlp_norm: Matrix<S>,
    pub w_in: Matrix<S>,
    pub w_out: Matrix<S>,
}

/// Every tensor of the network. Gain vectors are stored as `1 × d` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub tok_embed: Matrix<S>,
    pub pos_embed: Matrix<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: Matrix<S>,
    pub head: Matrix<S>,
    pub lora: Option<Lora<S>>,
}

const ADAPTER_SLOTS: [&str; 4] = ["q", "k", "v", "o"];

impl<S: Scalar> Params<S> {
    pub fn init(config: &ModelConfig) -> Self {
        let root = SeededRng::new(config.seed);
        let mut stream = 0u64;
        let mut gauss = |rows: usize, cols: usize, fan_in: usize| {
            let mut rng = root.derive(stream);
            stream += 1;
            let std = config.init_scale / (fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| S::of(std * rng.gaussian()))
        };
        let (d, f, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let tok_embed = gauss(v, d, d);
        let pos_embed = gauss(config.max_positions, d, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Matrix::filled(1, d, S::one()),
                wq: gauss(d, d, d),
                wk: gauss(d, d, d),
                wv: gauss(d, d, d),
                wo: gauss(d, d, d),
                mlp_norm: Matrix::filled(1, d, S::one()),
                w_in: gauss(d, f, d),
                w_out: gauss(f, d, f),
            })
            .collect();
        let final_norm = Matrix::filled(1, d, S::one());
        let head = gauss(d, v, d);
        Self { tok_embed, pos_embed, layers, final_norm, head, lora: None }
    }

    /// Attaches zero-delta adapters to every attention projection.
    pub fn attach_lora(&mut self, config: LoraConfig, init_scale: f64, seed: u64) {
        let d = self.tok_embed.cols();
        let r = config.rank;
        let root = SeededRng::new(seed);
        let layers = (0..self.layers.len())
            .map(|l| {
                let mut rng = root.derive(l as u64);
                let std = init_scale / (d as f64).sqrt();
                let mut adapter = || Adapter {
                    down: Matrix::from_fn(d, r, |_, _| S::of(std * rng.gaussian())),
                    up: Matrix::zeros(r, d),
                };
                LoraLayer { q: adapter(), k: adapter(), v: adapter(), o: adapter() }
            })
            .collect();
        self.lora = Some(Lora { config, layers });
    }

    /// All tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Matrix<S>)> {
        let mut out = vec![
            ("tok_embed".to_string(), &self.tok_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("attn_norm", &p.attn_norm),
                ("wq", &p.wq),
                ("wk", &p.wk),
                ("wv", &p.wv),
                ("wo", &p.wo),
                ("mlp_norm", &p.mlp_norm),
                ("w_in", &p.w_in),
                ("w_out", &p.w_out),
            ] {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        if let Some(lora) = &self.lora {
            for (l, layer) in lora.layers.iter().enumerate() {
                for (slot, a) in ADAPTER_SLOTS.iter().zip([&layer.q, &layer.k, &layer.v, &layer.o]) {
                    out.push((format!("lora.{l}.{slot}.down"), &a.down));
                    out.push((format!("lora.{l}.{slot}.up"), &a.up));
                }
            }
        }
        out
    }

    /// Same order as [`Params::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix<S>)> {
        let mut out = vec![
            ("tok_embed".to_string(), &mut self.tok_embed),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (l, p) in self.layers.iter_mut().enumerate() {
            for (name, m) in [
                ("attn_norm", &mut p.attn_norm),
                ("wq", &mut p.wq),
                ("wk", &mut p.wk),
                ("wv", &mut p.wv),
                ("wo", &mut p.wo),
                ("mlp_norm", &mut p.mlp_norm),
                ("w_in", &mut p.w_in),
                ("w_out", &mut p.w_out),
            ] {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        if let Some(lora) = &mut self.lora {
            for (l, layer) in lora.layers.iter_mut().enumerate() {
                let LoraLayer { q, k, v, o } = layer;
                for (slot, a) in ADAPTER_SLOTS.iter().zip([q, k, v, o]) {
                    out.push((format!("lora.{l}.{slot}.down"), &mut a.down));
                    out.push((format!("lora.{l}.{slot}.up"), &mut a.up));
                }
            }
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<S>> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Same structure, every tensor zero (used as a gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<S>| Matrix::zeros(m.rows(), m.cols());
        let za = |a: &Adapter<S>| Adapter { down: z(&a.down), up: z(&a.up) };
        Self {
            tok_embed: z(&self.tok_embed),
            pos_embed: z(&self.pos_embed),
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    attn_norm: z(&p.attn_norm),
                    wq: z(&p.wq),
                    wk: z(&p.wk),
                    wv: z(&p.wv),
                    wo: z(&p.wo),
                    mlp_norm: z(&p.mlp_norm),
                    w_in: z(&p.w_in),
                    w_out: z(&p.w_out),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            head: z(&self.head),
            lora: self.lora.as_ref().map(|l| Lora {
                config: l.config.clone(),
                layers: l
                    .layers
                    .iter()
                    .map(|x| LoraLayer { q: za(&x.q), k: za(&x.k), v: za(&x.v), o: za(&x.o) })
                    .collect(),
            }),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        let ca = |a: &Adapter<S>| Adapter { down: a.down.cast(), up: a.up.cast() };
        Params {
            tok_embed: self.tok_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    attn_norm: p.attn_norm.cast(),
                    wq: p.wq.cast(),
                    wk: p.wk.cast(),
                    wv: p.wv.cast(),
                    wo: p.wo.cast(),
                    mlp_norm: p.mlp_norm.cast(),
                    w_in: p.w_in.cast(),
                    w_out: p.w_out.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
            lora: self.lora.as_ref().map(|l| Lora {
                config: l.config.clone(),
                layers: l
                    .layers
                    .iter()
                    .map(|x| LoraLayer { q: ca(&x.q), k: ca(&x.k), v: ca(&x.v), o: ca(&x.o) })
                    .collect(),
            }),
        }
    }

    /// Overwrites tensors from `(name, tensor)` pairs; every tensor must be
    /// present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Matrix<S>)]) -> Result<(), ModelError> {
        for (name, slot) in self.named_mut() {
            let src = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if src.shape() != slot.shape() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: slot.shape(),
                    got: src.shape(),
                });
            }
            *slot = src.clone();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, m)| m.data().len()).sum()
    }
}
