//! Chains of sparse convolution layers with random weights.
//!
//! Text form: one layer per line, `K s C_in C_out`, whitespace separated.
//! Blank lines and `#` comments are ignored.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autotune::TunedLayerConfig;
use crate::error::{invalid, Error, Result};
use crate::execution::{sc_layer_forward, LayerConfig, LayerMetrics, WeightSet};
use crate::geometry::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerSpec {
    pub fn new(kernel: usize, stride: usize, c_in: usize, c_out: usize) -> Self {
        LayerSpec { kernel, stride, c_in, c_out }
    }

    pub fn offsets(&self) -> usize {
        self.kernel.pow(3)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        for (l, spec) in layers.iter().enumerate() {
            if spec.kernel % 2 == 0 || spec.kernel > 15 {
                return Err(invalid(format!("layer {l}: kernel size {} must be odd and at most 15", spec.kernel)));
            }
            if spec.stride == 0 || spec.c_in == 0 || spec.c_out == 0 {
                return Err(invalid(format!("layer {l}: stride and channel counts must be positive")));
            }
        }
        if let Some(l) = layers.windows(2).position(|w| w[0].c_out != w[1].c_in) {
            return Err(invalid(format!(
                "layer {} outputs {} channels but layer {} expects {}",
                l,
                layers[l].c_out,
                l + 1,
                layers[l + 1].c_in
            )));
        }
        Ok(NetworkSpec { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Residual-backbone-like channel plan: stride-2 stages doubling width.
    pub fn resnet_like() -> Self {
        let l = LayerSpec::new;
        NetworkSpec::new(vec![
            l(5, 1, 4, 16),
            l(3, 1, 16, 16),
            l(3, 2, 16, 32),
            l(3, 1, 32, 32),
            l(3, 2, 32, 64),
            l(3, 1, 64, 64),
            l(3, 2, 64, 128),
            l(3, 1, 128, 128),
        ])
        .expect("preset is consistent")
    }

    /// Encoder-decoder-like channel plan: widen while downsampling, then
    /// narrow at the coarsest resolution.
    pub fn unet_like() -> Self {
        let l = LayerSpec::new;
        NetworkSpec::new(vec![
            l(5, 1, 4, 32),
            l(3, 2, 32, 32),
            l(3, 1, 32, 64),
            l(3, 2, 64, 64),
            l(3, 1, 64, 128),
            l(3, 1, 128, 128),
            l(3, 1, 128, 64),
            l(3, 1, 64, 32),
            l(1, 1, 32, 16),
        ])
        .expect("preset is consistent")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "resnet_like" => Some(Self::resnet_like()),
            "unet_like" => Some(Self::unet_like()),
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        let mut lines = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let config = |message: String| Error::Config { line: n + 1, message };
            if fields.len() != 4 {
                return Err(config(format!("expected `K s C_in C_out`, found {} fields", fields.len())));
            }
            let mut v = [0usize; 4];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|_| config(format!("{f:?} is not a nonnegative integer")))?;
            }
            layers.push(LayerSpec::new(v[0], v[1], v[2], v[3]));
            lines.push(n + 1);
        }
        if layers.is_empty() {
            return Err(Error::Config { line: 0, message: "no layers defined".into() });
        }
        NetworkSpec::new(layers.clone()).map_err(|e| {
            // Attribute the error to the first offending line.
            let bad = layers
                .iter()
                .enumerate()
                .position(|(i, s)| s.kernel % 2 == 0 || s.kernel > 15 || s.stride == 0 || s.c_in == 0 || s.c_out == 0 || (i > 0 && layers[i - 1].c_out != s.c_in))
                .unwrap_or(0);
            Error::Config { line: lines[bad], message: e.to_string() }
        })
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.layers {
            writeln!(f, "{} {} {} {}", s.kernel, s.stride, s.c_in, s.c_out)?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetworkSpec::parse(s)
    }
}

/// Final cloud and the metrics of every layer.
#[derive(Clone, Debug)]
pub struct NetworkRun {
    pub output: PointCloud,
    pub layers: Vec<LayerMetrics>,
}

impl NetworkRun {
    pub fn total_sorts(&self) -> usize {
        self.layers.iter().map(|m| m.sorts_performed).sum()
    }
}

/// Weights of layer `index`: [`WeightSet::random`] seeded by `(seed, index)`.
pub fn layer_weights(spec: &LayerSpec, seed: u64, index: usize) -> WeightSet {
    WeightSet::random(spec.offsets(), spec.c_in, spec.c_out, seed, index as u64)
}

/// Runs the layers in order; each layer's sorted output feeds the next.
pub fn forward_network(net: &NetworkSpec, cloud: &PointCloud, config: &LayerConfig, seed: u64) -> Result<NetworkRun> {
    forward_network_tuned(net, cloud, config, None, seed)
}

/// As [`forward_network`], with per-layer tiles taken from `tuned`.
pub fn forward_network_tuned(
    net: &NetworkSpec,
    cloud: &PointCloud,
    config: &LayerConfig,
    tuned: Option<&[TunedLayerConfig]>,
    seed: u64,
) -> Result<NetworkRun> {
    if let Some(first) = net.layers.first() {
        if first.c_in != cloud.channels() {
            return Err(Error::Config {
                line: 1,
                message: format!("network expects {} input channels, cloud has {}", first.c_in, cloud.channels()),
            });
        }
    }
    if let Some(t) = tuned {
        if t.len() != net.len() {
            return Err(invalid(format!("{} tuned configs for {} layers", t.len(), net.len())));
        }
    }
    let mut current = cloud.clone();
    let mut layers = Vec::with_capacity(net.len());
    for (l, spec) in net.layers.iter().enumerate() {
        let mut cfg = *config;
        if let Some(t) = tuned {
            t[l].validate(spec.c_in, spec.c_out)?;
            cfg.gather_tile = t[l].gather_tile;
            cfg.scatter_tile = t[l].scatter_tile;
        }
        let weights = layer_weights(spec, seed, l);
        let (next, metrics) = sc_layer_forward(&current, &weights, spec.kernel, spec.stride, &cfg)?;
        layers.push(metrics);
        current = next;
    }
    Ok(NetworkRun { output: current, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::MapBackend;
    use crate::synthetic::random_cloud;

    #[test]
    fn presets_are_compatible() {
        for name in ["resnet_like", "unet_like"] {
            let net = NetworkSpec::preset(name).unwrap();
            assert_eq!(net.layers()[0].c_in, 4);
            assert_eq!(NetworkSpec::parse(&net.to_text()).unwrap(), net);
        }
        assert!(NetworkSpec::preset("vgg").is_none());
    }

    #[test]
    fn parse_reports_lines() {
        let net = NetworkSpec::parse("# demo\n3 1 4 8\n\n3 2 8 8  # down\n").unwrap();
        assert_eq!(net.layers(), &[LayerSpec::new(3, 1, 4, 8), LayerSpec::new(3, 2, 8, 8)]);
        match NetworkSpec::parse("3 1 4 8\n3 1 9 8\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match NetworkSpec::parse("3 1 4\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(NetworkSpec::parse("3 1 4 x"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(NetworkSpec::parse("4 1 4 4"), Err(Error::Config { line: 1, .. })));
        assert!(NetworkSpec::parse("").is_err());
    }

    #[test]
    fn single_layer_equals_layer_forward() {
        let pc = random_cloud(500, 12, 4, 3).unwrap();
        let net = NetworkSpec::new(vec![LayerSpec::new(3, 2, 4, 8)]).unwrap();
        let run = forward_network(&net, &pc, &LayerConfig::default(), 11).unwrap();
        let w = layer_weights(&net.layers()[0], 11, 0);
        let (direct, _) = sc_layer_forward(&pc, &w, 3, 2, &LayerConfig::default()).unwrap();
        assert!(run.output.bit_eq(&direct));
    }

    #[test]
    fn sort_accounting() {
        let pc = random_cloud(2000, 30, 4, 5).unwrap();
        let chain = |strides: &[usize]| {
            let layers = strides.iter().map(|&s| LayerSpec::new(3, s, 4, 4)).collect();
            NetworkSpec::new(layers).unwrap()
        };
        let flat = forward_network(&chain(&[1, 1, 1, 1, 1]), &pc, &LayerConfig::default(), 0).unwrap();
        assert_eq!(flat.total_sorts(), 1);
        let mixed = forward_network(&chain(&[1, 2, 1, 2, 1]), &pc, &LayerConfig::default(), 0).unwrap();
        assert_eq!(mixed.total_sorts(), 3);
        let sorted_input = pc.to_sorted().0;
        let flat = forward_network(&chain(&[1, 1, 1]), &sorted_input, &LayerConfig::default(), 0).unwrap();
        assert_eq!(flat.total_sorts(), 0);
    }

    #[test]
    fn deterministic_and_backend_independent() {
        let pc = random_cloud(1500, 20, 4, 6).unwrap();
        let net = NetworkSpec::new(vec![LayerSpec::new(3, 1, 4, 8), LayerSpec::new(3, 2, 8, 8), LayerSpec::new(1, 1, 8, 4)]).unwrap();
        let a = forward_network(&net, &pc, &LayerConfig::default(), 42).unwrap();
        let b = forward_network(&net, &pc, &LayerConfig::default(), 42).unwrap();
        let hash = LayerConfig { backend: MapBackend::Hash, ..LayerConfig::default() };
        let c = forward_network(&net, &pc, &hash, 42).unwrap();
        assert!(a.output.bit_eq(&b.output));
        assert!(a.output.bit_eq(&c.output));
        let d = forward_network(&net, &pc, &LayerConfig::default(), 43).unwrap();
        assert!(!a.output.bit_eq(&d.output));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let pc = random_cloud(10, 5, 3, 0).unwrap();
        let net = NetworkSpec::new(vec![LayerSpec::new(3, 1, 4, 4)]).unwrap();
        assert!(matches!(forward_network(&net, &pc, &LayerConfig::default(), 0), Err(Error::Config { .. })));
        assert!(NetworkSpec::new(vec![LayerSpec::new(3, 1, 4, 4), LayerSpec::new(3, 1, 5, 4)]).is_err());
    }
}
