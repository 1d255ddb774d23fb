use crate::error::{Error, Result};

/// Component switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablations {
    /// Drop the adaptive embedding and the transformer trend; fusion sees
    /// only the graph views.
    pub no_adaptive: bool,
    /// Skip the encoders; fusion reads the adaptive slice of the embedding.
    pub no_transformer: bool,
    pub no_forward_graph: bool,
    pub no_backward_graph: bool,
    pub no_graphs: bool,
    /// Drop the `gelu(Z)` term of the graph-fusion self-attention.
    pub no_augmented_residual: bool,
}

impl Ablations {
    /// The six named variants, in the order they are usually reported.
    pub const VARIANTS: [&'static str; 6] = [
        "no_adaptive",
        "no_transformer",
        "no_forward_graph",
        "no_backward_graph",
        "no_graphs",
        "no_augmented_residual",
    ];

    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "full" => {}
            "no_adaptive" => a.no_adaptive = true,
            "no_transformer" => a.no_transformer = true,
            "no_forward_graph" => a.no_forward_graph = true,
            "no_backward_graph" => a.no_backward_graph = true,
            "no_graphs" => a.no_graphs = true,
            "no_augmented_residual" => a.no_augmented_residual = true,
            other => return Err(Error::Config(format!("unknown ablation variant `{other}`"))),
        }
        Ok(a)
    }

    /// `full`, a variant name, or `+`-joined names for combinations.
    pub fn label(&self) -> String {
        let flags = [
            self.no_adaptive,
            self.no_transformer,
            self.no_forward_graph,
            self.no_backward_graph,
            self.no_graphs,
            self.no_augmented_residual,
        ];
        let on: Vec<&str> = Self::VARIANTS
            .iter()
            .zip(flags)
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    pub fn uses_forward_graph(&self) -> bool {
        !self.no_graphs && !self.no_forward_graph
    }

    pub fn uses_backward_graph(&self) -> bool {
        !self.no_graphs && !self.no_backward_graph
    }

    pub fn uses_transformer(&self) -> bool {
        !self.no_adaptive && !self.no_transformer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// Time-of-day slots per day.
    pub n_d: usize,
    pub d_f: usize,
    pub d_a: usize,
    pub d_n: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub fusion_layers: usize,
    pub armsa_layers: usize,
    pub dropout: f64,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 170,
            c_in: 1,
            c_out: 1,
            t_in: 12,
            t_out: 12,
            n_d: 288,
            d_f: 24,
            d_a: 100,
            d_n: 100,
            layers: 3,
            heads: 4,
            ffn_mult: 4,
            fusion_layers: 2,
            armsa_layers: 1,
            dropout: 0.0,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    /// Width of the feature and calendar slices.
    pub fn d_e(&self) -> usize {
        4 * self.d_f
    }

    /// Hidden width `d_e + d_a`.
    pub fn d_model(&self) -> usize {
        self.d_e() + self.d_a
    }

    /// Width of the encoder input; the adaptive slice is absent under `no_adaptive`.
    pub fn d_embed(&self) -> usize {
        if self.ablations.no_adaptive {
            self.d_e()
        } else {
            self.d_model()
        }
    }

    /// Width of the concatenated graph/trend tensor entering the fusion MLP.
    pub fn fusion_width(&self) -> usize {
        let a = &self.ablations;
        let mut w = 0;
        if a.uses_forward_graph() {
            w += self.d_n;
        }
        if a.uses_backward_graph() {
            w += self.d_n;
        }
        if !a.no_adaptive {
            w += self.d_a;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("n_d", self.n_d),
            ("d_f", self.d_f),
            ("d_a", self.d_a),
            ("d_n", self.d_n),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.d_model(),
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if self.fusion_width() == 0 {
            return Err(Error::Config(
                "the chosen ablations leave the fusion module without inputs".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths() {
        let c = ModelConfig::default();
        assert_eq!(c.d_e(), 96);
        assert_eq!(c.d_model(), 196);
        assert_eq!(c.fusion_width(), 300);
        c.validate().unwrap();
    }

    #[test]
    fn variants_round_trip_labels() {
        for name in Ablations::VARIANTS {
            assert_eq!(Ablations::variant(name).unwrap().label(), name);
        }
        assert_eq!(Ablations::variant("full").unwrap().label(), "full");
        assert!(Ablations::variant("no_head").is_err());
    }

    #[test]
    fn rejects_bad_widths() {
        let c = ModelConfig {
            heads: 3,
            d_f: 1,
            d_a: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            ablations: Ablations {
                no_adaptive: true,
                no_graphs: true,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
