//! Compression job configuration, read from a JSON document in which
//! unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::EmbeddingWeighting;
use crate::error::{Error, Result};
use crate::structured::{BlockZeroShape, GsShape, StructureSpec, ZeroPattern};
use crate::toymodel::{choose_gs_shape, choose_kron_shape};

/// Where a weight matrix sits relative to the rotation of its residual
/// stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Reads the stream: `Q^T W`, rotated rows.
    In,
    /// Writes the stream: `W Q`, rotated columns.
    Out,
    /// Writes the first stream position.
    Embedding,
    /// Reads the last stream position.
    Head,
}

impl Role {
    /// True when the rotation multiplies the matrix from the right.
    pub fn rotated_on_right(self) -> bool {
        matches!(self, Role::Out | Role::Embedding)
    }
}

/// Structure requested for every matrix of one role. Shapes are resolved
/// against the actual matrix dimensions by [`RoleStructure::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RoleStructure {
    /// `r` Kronecker terms with the rotated side split by `q`.
    Kron { r: usize, q: usize },
    /// GS-matrix with `kl` left and `kr` right blocks, sized either from a
    /// target parameter fraction `ratio` or from explicit block sizes.
    Gs {
        kl: usize,
        kr: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ratio: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bl1: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bl2: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        br1: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        br2: Option<usize>,
    },
    /// Keep `d` of the rotated dimensions.
    Blockzero { d: usize },
    #[default]
    None,
}

impl RoleStructure {
    fn validate(&self, role: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("{} structure: {}", role, msg)));
        match self {
            RoleStructure::Kron { r, q } if *r == 0 || *q == 0 => bad("r and q must be positive".into()),
            RoleStructure::Gs { kl, kr, ratio, bl1, bl2, br1, br2 } => {
                if *kl == 0 || *kr == 0 {
                    return bad("kl and kr must be positive".into());
                }
                let blocks = [bl1, bl2, br1, br2];
                let given = blocks.iter().filter(|b| b.is_some()).count();
                match (ratio, given) {
                    (Some(c), 0) if !(*c > 0.0 && *c <= 1.0) => bad(format!("ratio {} outside (0, 1]", c)),
                    (Some(_), 0) => Ok(()),
                    (None, 4) if blocks.iter().any(|b| **b == Some(0)) => bad("block sizes must be positive".into()),
                    (None, 4) => Ok(()),
                    _ => bad("give either ratio or all of bl1, bl2, br1, br2".into()),
                }
            }
            RoleStructure::Blockzero { d: 0 } => bad("d must be positive".into()),
            _ => Ok(()),
        }
    }

    /// Concrete structure for a `rows x cols` matrix in `role`.
    pub fn resolve(&self, role: Role, rows: usize, cols: usize) -> Result<StructureSpec> {
        let right = role.rotated_on_right();
        let spec = match *self {
            RoleStructure::Kron { r, q } => StructureSpec::Kron(choose_kron_shape(rows, cols, r, q, right)?),
            RoleStructure::Gs { kl, kr, ratio: Some(c), .. } => StructureSpec::Gs(choose_gs_shape(rows, cols, kl, kr, c)?),
            RoleStructure::Gs { kl, kr, bl1: Some(bl1), bl2: Some(bl2), br1: Some(br1), br2: Some(br2), .. } => {
                StructureSpec::Gs(GsShape::new(kl, kr, bl1, bl2, br1, br2))
            }
            RoleStructure::Gs { .. } => {
                return Err(Error::InvalidConfig("GS structure needs ratio or block sizes".into()))
            }
            RoleStructure::Blockzero { d } => StructureSpec::Blockzero(BlockZeroShape {
                d,
                pattern: if right { ZeroPattern::ZeroCols } else { ZeroPattern::ZeroRows },
            }),
            RoleStructure::None => StructureSpec::None,
        };
        spec.validate(rows, cols)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoleStructures {
    #[serde(rename = "in")]
    pub input: RoleStructure,
    #[serde(rename = "out")]
    pub output: RoleStructure,
    pub embedding: RoleStructure,
    pub head: RoleStructure,
}

impl RoleStructures {
    pub fn get(&self, role: Role) -> &RoleStructure {
        match role {
            Role::In => &self.input,
            Role::Out => &self.output,
            Role::Embedding => &self.embedding,
            Role::Head => &self.head,
        }
    }

    /// The same structure for every role.
    pub fn uniform(s: RoleStructure) -> Self {
        Self { input: s.clone(), output: s.clone(), embedding: s.clone(), head: s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// `lambda_in = 1`.
    #[default]
    One,
    /// `lambda_in = ||X_out W_out||^2 / ||X_in W_in||^2`.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JobConfig {
    pub structure: RoleStructures,
    pub frobenius_iters: usize,
    pub weighted_iters: usize,
    pub cg_iters: usize,
    /// Alternating iterations inside each weighted projection.
    pub proj_iters: usize,
    pub lambda_in: LambdaMode,
    pub embedding_weighting: EmbeddingWeighting,
    /// Leave the attention value columns unprojected (still rotated).
    pub exclude_values: bool,
    pub seed: u64,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            structure: RoleStructures::default(),
            frobenius_iters: 50,
            weighted_iters: 1,
            cg_iters: 500,
            proj_iters: 10,
            lambda_in: LambdaMode::One,
            embedding_weighting: EmbeddingWeighting::SqrtD1,
            exclude_values: true,
            seed: 0,
        }
    }
}

impl JobConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.structure.input.validate("in")?;
        self.structure.output.validate("out")?;
        self.structure.embedding.validate("embedding")?;
        self.structure.head.validate("head")
    }

    /// Reduced budgets for quick runs.
    pub fn fast(mut self) -> Self {
        self.frobenius_iters = self.frobenius_iters.min(5);
        self.weighted_iters = self.weighted_iters.min(1);
        self.cg_iters = self.cg_iters.min(50);
        self.proj_iters = self.proj_iters.min(3);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = JobConfig::from_json("{}").unwrap();
        assert_eq!(cfg, JobConfig::default());
        assert_eq!((cfg.frobenius_iters, cfg.weighted_iters, cfg.cg_iters), (50, 1, 500));
    }

    #[test]
    fn full_document_parses() {
        let text = r#"{
            "structure": {
                "in": {"kind": "kron", "r": 3, "q": 4},
                "out": {"kind": "gs", "kl": 4, "kr": 2, "ratio": 0.75},
                "embedding": {"kind": "blockzero", "d": 8},
                "head": {"kind": "none"}
            },
            "frobenius_iters": 25,
            "lambda_in": "balanced",
            "embedding_weighting": "logD1",
            "seed": 7
        }"#;
        let cfg = JobConfig::from_json(text).unwrap();
        assert_eq!(cfg.structure.input, RoleStructure::Kron { r: 3, q: 4 });
        assert_eq!(cfg.lambda_in, LambdaMode::Balanced);
        assert_eq!(cfg.embedding_weighting, EmbeddingWeighting::LogD1);
        assert_eq!(cfg.frobenius_iters, 25);
        let back = JobConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(JobConfig::from_json(r#"{"iters": 3}"#).is_err());
        assert!(JobConfig::from_json(r#"{"structure": {"in": {"kind": "kron", "r": 1, "q": 2, "x": 0}}}"#).is_err());
        assert!(JobConfig::from_json(r#"{"structure": {"in": {"kind": "kron", "r": 0, "q": 2}}}"#).is_err());
        assert!(JobConfig::from_json(r#"{"structure": {"out": {"kind": "gs", "kl": 2, "kr": 2}}}"#).is_err());
        assert!(JobConfig::from_json(r#"{"structure": {"out": {"kind": "gs", "kl": 2, "kr": 2, "ratio": 1.5}}}"#).is_err());
        assert!(JobConfig::from_json(r#"{"structure": {"head": {"kind": "blockzero", "d": 0}}}"#).is_err());
        assert!(JobConfig::from_json(r#"{"frobenius_iters": -1}"#).is_err());
    }

    #[test]
    fn resolve_follows_rotated_side() {
        let kron = RoleStructure::Kron { r: 3, q: 4 };
        match kron.resolve(Role::In, 16, 8).unwrap() {
            StructureSpec::Kron(s) => assert_eq!((s.rank, s.m1, s.n1, s.m2, s.n2), (3, 4, 1, 4, 8)),
            other => panic!("{:?}", other),
        }
        match kron.resolve(Role::Out, 8, 16).unwrap() {
            StructureSpec::Kron(s) => assert_eq!((s.rank, s.m1, s.n1, s.m2, s.n2), (3, 1, 4, 8, 4)),
            other => panic!("{:?}", other),
        }
        let bz = RoleStructure::Blockzero { d: 3 };
        assert_eq!(
            bz.resolve(Role::Embedding, 10, 6).unwrap(),
            StructureSpec::Blockzero(BlockZeroShape { d: 3, pattern: ZeroPattern::ZeroCols })
        );
        assert_eq!(
            bz.resolve(Role::Head, 6, 10).unwrap(),
            StructureSpec::Blockzero(BlockZeroShape { d: 3, pattern: ZeroPattern::ZeroRows })
        );
        let gs = RoleStructure::Gs { kl: 2, kr: 2, ratio: None, bl1: Some(4), bl2: Some(2), br1: Some(2), br2: Some(4) };
        assert!(matches!(gs.resolve(Role::In, 8, 8).unwrap(), StructureSpec::Gs(_)));
        assert!(kron.resolve(Role::In, 6, 8).is_err());
    }

    #[test]
    fn fast_mode_caps_budgets() {
        let cfg = JobConfig::default().fast();
        assert_eq!((cfg.frobenius_iters, cfg.cg_iters), (5, 50));
    }
}
