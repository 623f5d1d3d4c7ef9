//! Network topology and the shipped presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_extent, transposed_extent, Shape3};

/// Kernel extents and strides, `(height, width)` and `(stride_y, stride_x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub stride_y: usize,
    pub stride_x: usize,
}

impl ConvSpec {
    pub const fn new(kh: usize, kw: usize, stride_y: usize, stride_x: usize) -> Self {
        ConvSpec {
            kh,
            kw,
            stride_y,
            stride_x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualLayerConfig {
    pub tau: f64,
    pub maps: usize,
    pub height: usize,
    pub width: usize,
    /// Kernel from the layer below (valid convolution).
    pub bottom_up: ConvSpec,
    /// Kernel from the layer above (transposed convolution); absent on the top layer.
    pub top_down: Option<ConvSpec>,
    /// Stride-1 recurrent kernel, applied with "same" padding.
    pub recurrent: ConvSpec,
    /// Cross-modal kernel to/from the top proprioceptive layer; top layer only.
    pub lateral: Option<ConvSpec>,
}

impl VisualLayerConfig {
    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.maps, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProprioLayerConfig {
    pub tau: f64,
    pub neurons: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    /// Preset file format version.
    pub version: u32,
    pub image_height: usize,
    pub image_width: usize,
    /// Transposed kernel from V_F to the reconstructed image.
    pub output_kernel: ConvSpec,
    pub vf: VisualLayerConfig,
    pub vm: VisualLayerConfig,
    pub vs: VisualLayerConfig,
    pub pf: ProprioLayerConfig,
    pub pm: ProprioLayerConfig,
    pub ps: ProprioLayerConfig,
    pub joint_groups: usize,
    pub units_per_group: usize,
}

pub const PRESET_VERSION: u32 = 1;

const TABLE1_JSON: &str = include_str!("../presets/table1.json");
const DESK_JSON: &str = include_str!("../presets/desk.json");
const TINY_JSON: &str = include_str!("../presets/tiny.json");

impl NetworkConfig {
    pub fn table1() -> Self {
        Self::from_json(TABLE1_JSON).expect("table1 preset is valid")
    }

    pub fn desk() -> Self {
        Self::from_json(DESK_JSON).expect("desk preset is valid")
    }

    pub fn tiny() -> Self {
        Self::from_json(TINY_JSON).expect("tiny preset is valid")
    }

    /// Resolves a preset name (`table1`, `desk`, `tiny`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(Self::table1()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetworkConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("preset: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn image_shape(&self) -> Shape3 {
        Shape3::new(1, self.image_height, self.image_width)
    }

    pub fn image_len(&self) -> usize {
        self.image_height * self.image_width
    }

    pub fn proprio_len(&self) -> usize {
        self.joint_groups * self.units_per_group
    }

    /// Checks every shape relation end to end.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != PRESET_VERSION {
            return bad(format!("preset version {} unsupported", self.version));
        }
        for (name, tau) in [
            ("vf", self.vf.tau),
            ("vm", self.vm.tau),
            ("vs", self.vs.tau),
            ("pf", self.pf.tau),
            ("pm", self.pm.tau),
            ("ps", self.ps.tau),
        ] {
            if !(tau >= 1.0) || !tau.is_finite() {
                return bad(format!("time constant of {name} must be >= 1, got {tau}"));
            }
        }
        if self.joint_groups == 0 || self.units_per_group == 0 {
            return bad("proprioceptive groups must be non-empty".into());
        }
        if [
            self.vf.maps,
            self.vm.maps,
            self.vs.maps,
            self.pf.neurons,
            self.pm.neurons,
            self.ps.neurons,
        ]
        .contains(&0)
        {
            return bad("layer sizes must be positive".into());
        }

        let check_down = |name: &str, below: (usize, usize), layer: &VisualLayerConfig| {
            let k = layer.bottom_up;
            let h = conv_extent(below.0, k.kh, k.stride_y);
            let w = conv_extent(below.1, k.kw, k.stride_x);
            if h != Some(layer.height) || w != Some(layer.width) {
                return bad(format!(
                    "{name}: bottom-up kernel maps {}x{} to {:?}x{:?}, layer is {}x{}",
                    below.0, below.1, h, w, layer.height, layer.width
                ));
            }
            Ok(())
        };
        let check_up = |name: &str, above: &VisualLayerConfig, layer: &VisualLayerConfig| {
            let Some(k) = layer.top_down else {
                return bad(format!("{name}: missing top-down kernel"));
            };
            let h = transposed_extent(above.height, k.kh, k.stride_y);
            let w = transposed_extent(above.width, k.kw, k.stride_x);
            if h != layer.height || w != layer.width {
                return bad(format!(
                    "{name}: top-down kernel maps {}x{} to {h}x{w}, layer is {}x{}",
                    above.height, above.width, layer.height, layer.width
                ));
            }
            Ok(())
        };
        check_down("vf", (self.image_height, self.image_width), &self.vf)?;
        check_down("vm", (self.vf.height, self.vf.width), &self.vm)?;
        check_down("vs", (self.vm.height, self.vm.width), &self.vs)?;
        check_up("vf", &self.vm, &self.vf)?;
        check_up("vm", &self.vs, &self.vm)?;
        if self.vs.top_down.is_some() {
            return bad("vs is the top layer and has no top-down kernel".into());
        }
        for (name, l) in [("vf", &self.vf), ("vm", &self.vm), ("vs", &self.vs)] {
            let r = l.recurrent;
            if r.stride_x != 1 || r.stride_y != 1 || r.kh == 0 || r.kw == 0 {
                return bad(format!("{name}: recurrent kernel must be stride 1"));
            }
        }
        match self.vs.lateral {
            Some(k) if k.kh == self.vs.height && k.kw == self.vs.width => {}
            Some(k) => {
                return bad(format!(
                    "lateral kernel {}x{} must cover the {}x{} top visual maps",
                    k.kh, k.kw, self.vs.height, self.vs.width
                ))
            }
            None => return bad("vs needs a lateral kernel".into()),
        }
        if self.vf.lateral.is_some() || self.vm.lateral.is_some() {
            return bad("only vs carries a lateral kernel".into());
        }
        let k = self.output_kernel;
        if transposed_extent(self.vf.height, k.kh, k.stride_y) != self.image_height
            || transposed_extent(self.vf.width, k.kw, k.stride_x) != self.image_width
        {
            return bad("output kernel does not reconstruct the image extents".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_matches_published_topology() {
        let c = NetworkConfig::table1();
        assert_eq!((c.image_height, c.image_width), (48, 64));
        assert_eq!([c.vf.maps, c.vm.maps, c.vs.maps], [4, 8, 12]);
        assert_eq!(
            [
                (c.vf.width, c.vf.height),
                (c.vm.width, c.vm.height),
                (c.vs.width, c.vs.height)
            ],
            [(60, 44), (29, 21), (13, 9)]
        );
        assert_eq!([c.pf.neurons, c.pm.neurons, c.ps.neurons], [30, 20, 10]);
        assert_eq!([c.vf.tau, c.vm.tau, c.vs.tau], [2.0, 4.0, 8.0]);
        assert_eq!([c.pf.tau, c.pm.tau, c.ps.tau], [2.0, 4.0, 8.0]);
        assert_eq!(c.vf.top_down, Some(ConvSpec::new(4, 4, 2, 2)));
        assert_eq!(c.vm.top_down, Some(ConvSpec::new(5, 5, 2, 2)));
        assert_eq!(c.vf.bottom_up, ConvSpec::new(5, 5, 1, 1));
        assert_eq!(c.vm.bottom_up, ConvSpec::new(4, 4, 2, 2));
        assert_eq!(c.vs.bottom_up, ConvSpec::new(5, 5, 2, 2));
        assert_eq!(c.vs.lateral, Some(ConvSpec::new(9, 13, 1, 1)));
        for l in [&c.vf, &c.vm, &c.vs] {
            assert_eq!(l.recurrent, ConvSpec::new(2, 2, 1, 1));
        }
        assert_eq!((c.joint_groups, c.units_per_group), (2, 10));
    }

    #[test]
    fn presets_validate() {
        for name in ["table1", "desk", "tiny"] {
            NetworkConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(NetworkConfig::preset("huge").is_err());
        let d = NetworkConfig::desk();
        assert_eq!([d.vf.maps, d.vm.maps, d.vs.maps], [2, 4, 6]);
        let t = NetworkConfig::tiny();
        assert_eq!((t.image_height, t.image_width), (12, 16));
        assert_eq!([t.vf.maps, t.vm.maps, t.vs.maps], [1, 2, 2]);
        assert_eq!([t.pf.neurons, t.pm.neurons, t.ps.neurons], [6, 4, 3]);
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let mut c = NetworkConfig::table1();
        c.vm.width = 30;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::table1();
        c.vs.lateral = Some(ConvSpec::new(9, 12, 1, 1));
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::table1();
        c.pm.tau = 0.5;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::table1();
        c.output_kernel = ConvSpec::new(4, 4, 1, 1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let c = NetworkConfig::table1();
        assert_eq!(NetworkConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
