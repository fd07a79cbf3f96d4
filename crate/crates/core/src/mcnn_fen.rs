//! Five-column multi-scale feature extraction network (FEN).
//!
//! Each column is four same-padded convolutions with one kernel size, ReLU
//! after every layer and 2×2 max pooling after the layers in `pool_after`.
//! Column outputs are concatenated along channels, smallest kernel first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{add_conv, conv_relu, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEN_PREFIX: &str = "fen/";
pub const DEFAULT_KERNELS: [usize; 5] = [3, 5, 7, 9, 11];
pub const FEN_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub kernel_size: usize,
    /// Output width of each of the four convolutions.
    pub channels: Vec<usize>,
    /// 1-based conv indices followed by a 2×2 max pool.
    pub pool_after: Vec<usize>,
}

impl ColumnSpec {
    pub fn new(kernel_size: usize, channels: Vec<usize>) -> Self {
        ColumnSpec {
            kernel_size,
            channels,
            pool_after: vec![1, 2],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FenConfig {
    pub columns: Vec<ColumnSpec>,
    pub input_channels: usize,
}

impl Default for FenConfig {
    fn default() -> Self {
        FenConfig::with_widths(&[16, 32, 16, 8], 3)
    }
}

impl FenConfig {
    /// Five columns with kernels 3..11 sharing one width schedule.
    pub fn with_widths(widths: &[usize], input_channels: usize) -> Self {
        FenConfig {
            columns: DEFAULT_KERNELS
                .iter()
                .map(|&k| ColumnSpec::new(k, widths.to_vec()))
                .collect(),
            input_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.columns.len() != 5 {
            return bad(format!("FEN needs exactly 5 columns, got {}", self.columns.len()));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return bad(format!("input_channels must be 1 or 3, got {}", self.input_channels));
        }
        let pools = &self.columns[0].pool_after;
        for (i, col) in self.columns.iter().enumerate() {
            if col.channels.len() != 4 || col.channels.contains(&0) {
                return bad(format!("column {i} needs 4 positive conv widths"));
            }
            if col.kernel_size % 2 == 0 || col.kernel_size == 0 {
                return bad(format!("column {i} kernel {} is not odd", col.kernel_size));
            }
            if col.pool_after.iter().any(|&l| !(1..=4).contains(&l)) {
                return bad(format!("column {i} pool_after must be within 1..=4"));
            }
            if &col.pool_after != pools {
                return bad("all columns must pool after the same layers".into());
            }
        }
        let mut distinct = pools.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != 2 {
            return bad("FEN output stride must be 4 (exactly two pooled layers)".into());
        }
        Ok(())
    }

    /// Channel count of the concatenated feature map.
    pub fn out_channels(&self) -> usize {
        self.columns.iter().map(ColumnSpec::out_channels).sum()
    }
}

pub fn conv_name(col: usize, layer: usize) -> String {
    format!("fen/col{col}/conv{layer}")
}

/// Expected `(name, shape)` of every FEN tensor.
pub fn fen_param_shapes(config: &FenConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (ci, col) in config.columns.iter().enumerate() {
        let mut cin = config.input_channels;
        for (li, &cout) in col.channels.iter().enumerate() {
            let name = conv_name(ci + 1, li + 1);
            out.push((format!("{name}/bias"), vec![cout]));
            out.push((format!("{name}/weight"), vec![col.kernel_size, col.kernel_size, cin, cout]));
            cin = cout;
        }
    }
    out
}

/// Copies the FEN tensors out of `store`, checking names and shapes.
pub fn extract_fen<T: Scalar>(store: &ParamStore<T>, config: &FenConfig) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut out = ParamStore::new();
    for (name, shape) in fen_param_shapes(config) {
        let t = store.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: t.shape().to_vec(),
            });
        }
        out.insert(name, t.clone());
    }
    Ok(out)
}

/// He-uniform weights, zero biases, columns initialised in order.
pub fn build_fen<T: Scalar, R: Rng + ?Sized>(config: &FenConfig, rng: &mut R) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    for (ci, col) in config.columns.iter().enumerate() {
        let mut cin = config.input_channels;
        for (li, &cout) in col.channels.iter().enumerate() {
            add_conv(&mut store, &conv_name(ci + 1, li + 1), col.kernel_size, cin, cout, rng);
            cin = cout;
        }
    }
    Ok(store)
}

/// Adds the FEN to `g`; `x` is `[B, H, W, C]` with `H`, `W` divisible by 4.
pub fn fen_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, config: &FenConfig, x: Var) -> Result<Var> {
    let s = g.value(x).shape().to_vec();
    if s.len() != 4 || !s[1].is_multiple_of(FEN_STRIDE) || !s[2].is_multiple_of(FEN_STRIDE) || s[1] == 0 || s[2] == 0 {
        return Err(Error::Shape(format!("FEN input {s:?} must be [B, H, W, C] with H, W divisible by 4")));
    }
    if s[3] != config.input_channels {
        return Err(Error::Shape(format!(
            "FEN expects {} input channels, got {}",
            config.input_channels, s[3]
        )));
    }
    let mut outs = Vec::with_capacity(config.columns.len());
    for (ci, col) in config.columns.iter().enumerate() {
        let mut h = x;
        for li in 0..col.channels.len() {
            h = conv_relu(g, p, &conv_name(ci + 1, li + 1), h)?;
            if col.pool_after.contains(&(li + 1)) {
                h = g.max_pool2(h)?;
            }
        }
        outs.push(h);
    }
    g.concat(&outs)
}

/// Inference-only forward pass.
pub fn fen_forward<T: Scalar>(params: &ParamStore<T>, config: &FenConfig, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false);
    let x = g.input(batch.clone());
    let out = fen_graph(&mut g, &bound, config, x)?;
    Ok(g.value(out).clone())
}

pub fn is_fen_param(name: &str) -> bool {
    name.starts_with(FEN_PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_parameter_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = build_fen::<f32, _>(&FenConfig::default(), &mut rng).unwrap();
        // per column: k²·(3·16 + 16·32 + 32·16 + 16·8) weights + (16+32+16+8) biases
        //           = k²·1200 + 72; Σk² over 3,5,7,9,11 = 285
        let expected = 285 * 1200 + 5 * 72;
        assert_eq!(p.count_where(|_| true), expected);
        assert_eq!(expected, 342_360);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = FenConfig::with_widths(&[2, 3, 2, 1], 1);
        let a = build_fen::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_fen::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = FenConfig::default();
        cfg.columns.pop();
        assert!(matches!(
            build_fen::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::InvalidConfig(_))
        ));
        let mut cfg = FenConfig::default();
        cfg.columns[2].kernel_size = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = FenConfig::default();
        cfg.columns[0].pool_after = vec![1, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = FenConfig::default();
        for c in &mut cfg.columns {
            c.pool_after = vec![1];
        }
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = FenConfig::with_widths(&[4, 4, 4, 8], 3);
        let p = build_fen::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = fen_forward(&p, &cfg, &Tensor::zeros(&[2, 16, 16, 3])).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4, 40]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = FenConfig::with_widths(&[2, 2, 2, 2], 1);
        let p = build_fen::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(fen_forward(&p, &cfg, &Tensor::zeros(&[1, 10, 8, 1])), Err(Error::Shape(_))));
        assert!(matches!(fen_forward(&p, &cfg, &Tensor::zeros(&[1, 8, 8, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn zeroing_a_column_zeroes_only_its_channels() {
        let cfg = FenConfig::with_widths(&[3, 3, 3, 2], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = build_fen::<f64, _>(&cfg, &mut rng).unwrap();
        for name in p.names().cloned().collect::<Vec<_>>() {
            if name.ends_with("bias") {
                p.get_mut(&name).unwrap().data_mut().fill(0.1);
            }
        }
        let x = Tensor::from_fn(&[1, 8, 8, 1], |i| ((i * 7919) % 13) as f64 / 13.0);
        let full = fen_forward(&p, &cfg, &x).unwrap();
        for target in 0..5 {
            let mut q = p.clone();
            for name in p.names() {
                if name.starts_with(&format!("fen/col{}/", target + 1)) {
                    q.get_mut(name).unwrap().data_mut().fill(0.0);
                }
            }
            let out = fen_forward(&q, &cfg, &x).unwrap();
            for (i, &v) in out.data().iter().enumerate() {
                let col = (i % 10) / 2;
                if col == target {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, full.data()[i], "column {col} changed");
                }
            }
        }
    }
}
