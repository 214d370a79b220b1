//! Named parameter tensors and their layout.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use super::{Frontend, ModelConfig, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderIx {
    pub attn: AttnIx,
    pub norm1: NormIx,
    pub ffn: FfnIx,
    pub norm2: NormIx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderIx {
    pub self_attn: AttnIx,
    pub norm1: NormIx,
    pub cross_attn: AttnIx,
    pub norm2: NormIx,
    pub ffn: FfnIx,
    pub norm3: NormIx,
}

/// Index of every named tensor inside [`Params::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// Source embedding (`vocab x d`) or frontend projection (`stack*feat x d`).
    pub source: usize,
    pub target_embed: usize,
    pub encoder: Vec<EncoderIx>,
    pub decoder: Vec<DecoderIx>,
    pub out_w: usize,
    pub out_b: usize,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Role)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, role: Role) -> usize {
        self.specs.push((name, shape, role));
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIx {
        AttnIx {
            wq: self.add(format!("{prefix}.wq"), vec![d, d], Role::Weight),
            wk: self.add(format!("{prefix}.wk"), vec![d, d], Role::Weight),
            wv: self.add(format!("{prefix}.wv"), vec![d, d], Role::Weight),
            wo: self.add(format!("{prefix}.wo"), vec![d, d], Role::Weight),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIx {
        NormIx {
            gain: self.add(format!("{prefix}.gain"), vec![d], Role::Gain),
            bias: self.add(format!("{prefix}.bias"), vec![d], Role::Bias),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, h: usize) -> FfnIx {
        FfnIx {
            w1: self.add(format!("{prefix}.w1"), vec![d, h], Role::Weight),
            b1: self.add(format!("{prefix}.b1"), vec![h], Role::Bias),
            w2: self.add(format!("{prefix}.w2"), vec![h, d], Role::Weight),
            b2: self.add(format!("{prefix}.b2"), vec![d], Role::Bias),
        }
    }
}

fn build(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Role)>) {
    let d = cfg.d_model;
    let mut b = Builder { specs: Vec::new() };
    let source = match cfg.frontend {
        Frontend::Discrete => b.add("src_embed".into(), vec![cfg.vocab, d], Role::Weight),
        Frontend::Continuous {
            feature_dim,
            stack_factor,
        } => b.add("src_proj".into(), vec![feature_dim * stack_factor, d], Role::Weight),
    };
    let target_embed = b.add("tgt_embed".into(), vec![cfg.vocab, d], Role::Weight);
    let encoder = (0..cfg.enc_layers)
        .map(|l| EncoderIx {
            attn: b.attn(&format!("enc.{l}.self_attn"), d),
            norm1: b.norm(&format!("enc.{l}.norm1"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, cfg.ffn_dim),
            norm2: b.norm(&format!("enc.{l}.norm2"), d),
        })
        .collect();
    let decoder = (0..cfg.dec_layers)
        .map(|l| DecoderIx {
            self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
            norm1: b.norm(&format!("dec.{l}.norm1"), d),
            cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
            norm2: b.norm(&format!("dec.{l}.norm2"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, cfg.ffn_dim),
            norm3: b.norm(&format!("dec.{l}.norm3"), d),
        })
        .collect();
    let out_w = b.add("out.w".into(), vec![d, cfg.vocab], Role::Weight);
    let out_b = b.add("out.b".into(), vec![cfg.vocab], Role::Bias);
    (
        Layout {
            source,
            target_embed,
            encoder,
            decoder,
            out_w,
            out_b,
        },
        b.specs,
    )
}

/// All model parameters; gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub tensors: Vec<Tensor<F>>,
    pub layout: Layout,
}

pub type Gradients<F> = Params<F>;

impl<F: Scalar> Params<F> {
    /// Zero-filled tensors with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, specs) = build(cfg);
        Ok(Self {
            tensors: specs.into_iter().map(|(n, s, _)| Tensor::zeros(n, s)).collect(),
            layout,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn get(&self, i: usize) -> &[F] {
        &self.tensors[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.tensors[i].data
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.fill(F::zero());
        }
    }

    /// Element-wise conversion, e.g. to run an `f32` model in `f64`.
    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| G::lit(v.as_f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Checks names and shapes against the layout implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let (layout, specs) = build(cfg);
        if layout != self.layout || specs.len() != self.tensors.len() {
            return Err(ModelError::ShapeMismatch("parameter layout differs from config".into()));
        }
        for ((name, shape, _), t) in specs.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::ShapeMismatch(format!("tensor {}", t.name)));
            }
        }
        Ok(())
    }
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains.
///
/// Tensors are filled in layout order from one ChaCha stream, so the result
/// depends only on `(cfg, seed)`.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Params<F>, ModelError> {
    cfg.validate()?;
    let (layout, specs) = build(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = specs
        .into_iter()
        .map(|(name, shape, role)| {
            let mut t = Tensor::zeros(name, shape);
            match role {
                Role::Bias => {}
                Role::Gain => t.data.fill(F::one()),
                Role::Weight => {
                    let (fan_in, fan_out) = (t.shape[0], t.shape[1]);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-a, a);
                    for v in &mut t.data {
                        *v = F::lit(dist.sample(&mut rng));
                    }
                }
            }
            t
        })
        .collect();
    Ok(Params { tensors, layout })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            enc_layers: 2,
            dec_layers: 1,
            ffn_dim: 32,
            dropout: 0.1,
            vocab: 11,
            max_len: 300,
            frontend: Frontend::Discrete,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params::<f32>(&cfg(), 5).unwrap();
        let b = init_params::<f32>(&cfg(), 5).unwrap();
        let c = init_params::<f32>(&cfg(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn biases_zero_and_gains_one() {
        let p = init_params::<f32>(&cfg(), 1).unwrap();
        for t in &p.tensors {
            if t.name.ends_with(".bias") || t.name.ends_with(".b1") || t.name.ends_with(".b2") || t.name == "out.b" {
                assert!(t.data.iter().all(|&v| v == 0.0), "{}", t.name);
            }
            if t.name.ends_with(".gain") {
                assert!(t.data.iter().all(|&v| v == 1.0), "{}", t.name);
            }
        }
    }

    #[test]
    fn xavier_variance_of_square_matrix() {
        let mut c = cfg();
        c.d_model = 512;
        c.ffn_dim = 8;
        c.enc_layers = 1;
        c.heads = 1;
        let p = init_params::<f64>(&c, 3).unwrap();
        let w = p.by_name("enc.0.self_attn.wq").unwrap();
        assert_eq!(w.shape, vec![512, 512]);
        let n = w.data.len() as f64;
        let mean = w.data.iter().sum::<f64>() / n;
        let var = w.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = 1.0 / 512.0;
        assert!((var - expect).abs() / expect < 0.2, "{var}");
        let bound = (6.0f64 / 1024.0).sqrt();
        assert!(w.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn layout_names_are_unique_and_shapes_check() {
        let p = init_params::<f32>(&cfg(), 0).unwrap();
        let mut names: Vec<&str> = p.tensors.iter().map(|t| t.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.tensors.len());
        p.check_shapes(&cfg()).unwrap();
        let mut other = cfg();
        other.ffn_dim = 33;
        assert!(p.check_shapes(&other).is_err());
    }

    #[test]
    fn continuous_frontend_has_projection() {
        let mut c = cfg();
        c.frontend = Frontend::Continuous {
            feature_dim: 13,
            stack_factor: 2,
        };
        let p = init_params::<f32>(&c, 0).unwrap();
        assert_eq!(p.by_name("src_proj").unwrap().shape, vec![26, 16]);
        assert!(p.by_name("src_embed").is_none());
    }
}
