use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::acam::reduced;
use crate::error::{Error, Result};

pub const STAGES: usize = 7;

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    #[serde(default = "yes")]
    pub use_ddconv: bool,
    /// Plain window attention when false.
    #[serde(default = "yes")]
    pub use_acam: bool,
    /// Plain MLP when false.
    #[serde(default = "yes")]
    pub use_lpm: bool,
    #[serde(default)]
    pub shared_kv: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_ddconv: true,
            use_acam: true,
            use_lpm: true,
            shared_kv: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TecNetConfig {
    pub variant: String,
    /// Transformer blocks per stage.
    pub layer_numbers: [usize; STAGES],
    pub heads: [usize; STAGES],
    /// Width of stage 0.
    pub embed_dim: usize,
    pub window_size: usize,
    pub patch_size: usize,
    pub input_size: usize,
    pub num_classes: usize,
    /// Candidate kernels per dynamic deformable convolution.
    pub n_kernels: usize,
    #[serde(default)]
    pub toggles: Toggles,
}

impl TecNetConfig {
    /// Desk-scale variant for tests.
    pub fn nano() -> Self {
        TecNetConfig {
            variant: "nano".into(),
            layer_numbers: [1, 1, 2, 1, 2, 1, 1],
            heads: [1, 2, 4, 8, 4, 2, 1],
            embed_dim: 16,
            window_size: 4,
            patch_size: 4,
            input_size: 64,
            num_classes: 1,
            n_kernels: 4,
            toggles: Toggles::default(),
        }
    }

    pub fn tiny() -> Self {
        TecNetConfig {
            variant: "T".into(),
            layer_numbers: [2, 2, 6, 2, 6, 2, 2],
            heads: [3, 6, 12, 24, 12, 6, 3],
            embed_dim: 96,
            window_size: 7,
            patch_size: 4,
            input_size: 224,
            num_classes: 1,
            n_kernels: 4,
            toggles: Toggles::default(),
        }
    }

    pub fn base() -> Self {
        TecNetConfig {
            variant: "B".into(),
            layer_numbers: [2, 2, 18, 2, 18, 2, 2],
            heads: [4, 8, 16, 32, 16, 8, 4],
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "nano" => Some(Self::nano()),
            "T" | "tiny" => Some(Self::tiny()),
            "B" | "base" => Some(Self::base()),
            _ => None,
        }
    }

    /// Encoder depth of stage `i`: 0,1,2,3,2,1,0.
    pub fn level(i: usize) -> usize {
        i.min(STAGES - 1 - i)
    }

    pub fn stage_width(&self, i: usize) -> usize {
        self.embed_dim << Self::level(i)
    }

    /// Side of the square token grid at stage `i`.
    pub fn stage_grid(&self, i: usize) -> usize {
        (self.input_size / self.patch_size) >> Self::level(i)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.window_size == 0 || self.patch_size == 0 {
            return bad("embed_dim, window_size and patch_size must be positive".into());
        }
        if self.num_classes == 0 || self.n_kernels == 0 {
            return bad("num_classes and n_kernels must be positive".into());
        }
        for i in 0..STAGES {
            let j = STAGES - 1 - i;
            if self.layer_numbers[i] != self.layer_numbers[j] || self.heads[i] != self.heads[j] {
                return bad(format!(
                    "stage {i} and stage {j} must match in layer_numbers and heads"
                ));
            }
            if self.layer_numbers[i] == 0 || self.heads[i] == 0 {
                return bad(format!("stage {i} needs at least one block and one head"));
            }
        }
        let step = self.patch_size * 8;
        if self.input_size == 0 || !self.input_size.is_multiple_of(step) {
            return bad(format!(
                "input_size {} must be a multiple of patch_size·8 = {step}",
                self.input_size
            ));
        }
        for i in 0..STAGES {
            let c = self.stage_width(i);
            let h = self.heads[i];
            let ok = if self.toggles.use_acam {
                reduced(c).is_multiple_of(h)
            } else {
                c.is_multiple_of(h)
            };
            if !ok {
                return bad(format!("stage {i}: {h} heads incompatible with width {c}"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parses and validates; syntax errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TecNetConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [
            TecNetConfig::nano(),
            TecNetConfig::tiny(),
            TecNetConfig::base(),
        ] {
            c.validate().unwrap();
        }
        let n = TecNetConfig::nano();
        let widths: Vec<usize> = (0..7).map(|i| n.stage_width(i)).collect();
        assert_eq!(widths, vec![16, 32, 64, 128, 64, 32, 16]);
        let grids: Vec<usize> = (0..7).map(|i| n.stage_grid(i)).collect();
        assert_eq!(grids, vec![16, 8, 4, 2, 4, 8, 16]);
        assert_eq!(TecNetConfig::tiny().stage_grid(3), 7);
    }

    #[test]
    fn json_roundtrip_and_hash() {
        let c = TecNetConfig::nano();
        let back = TecNetConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.toggles.use_lpm = false;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn toggles_default_on_except_shared_kv() {
        let mut v: serde_json::Value =
            serde_json::from_str(&TecNetConfig::nano().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("toggles");
        let c = TecNetConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(c.toggles, Toggles::default());
        assert!(!c.toggles.shared_kv);
    }

    #[test]
    fn rejects_bad_documents() {
        let err = TecNetConfig::from_json("{\n  \"variant\": \"x\",\n  oops\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let mut v: serde_json::Value =
            serde_json::from_str(&TecNetConfig::nano().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("window_size");
        assert!(TecNetConfig::from_json(&v.to_string()).is_err());
        v["window_size"] = 4.into();
        v["extra"] = 1.into();
        assert!(TecNetConfig::from_json(&v.to_string()).is_err());
        let mut asym = TecNetConfig::nano();
        asym.heads[6] = 2;
        assert!(asym.validate().is_err());
        let mut odd = TecNetConfig::nano();
        odd.input_size = 48;
        assert!(odd.validate().is_err());
    }
}
