//! Conveyor scene: devices and the batteries inside them.
//!
//! Along-belt positions are given in *travel coordinates*: an object spanning
//! `x_start..x_end` crosses the detector line while the belt has travelled
//! between `x_start` and `x_end` millimetres since `t = 0`. Equivalently,
//! at `t = 0` the object lies `x_start..x_end` millimetres upstream of the
//! detector, and at time `t` a point with travel coordinate `u` sits at
//! `v·t - u` in the belt frame (origin on the detector line, positive
//! downstream).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BELT_WIDTH_MM: f64 = 800.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown material `{0}`")]
    UnknownMaterial(String),
    #[error("invalid material `{name}`: {reason}")]
    InvalidMaterial { name: String, reason: String },
    #[error("object {id}: {reason}")]
    InvalidObject { id: u64, reason: String },
    #[error("scene io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Effective linear attenuation coefficients (1/mm) in the two energy bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    /// 10-60 keV band.
    pub mu_low: f64,
    /// Above 60 keV.
    pub mu_high: f64,
}

impl Material {
    pub fn new(name: &str, mu_low: f64, mu_high: f64) -> Self {
        Self {
            name: name.to_owned(),
            mu_low,
            mu_high,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let err = |reason: &str| {
            Err(SceneError::InvalidMaterial {
                name: self.name.clone(),
                reason: reason.to_owned(),
            })
        };
        if !self.mu_high.is_finite() || !self.mu_low.is_finite() {
            return err("coefficients must be finite");
        }
        if self.mu_high < 0.0 {
            return err("coefficients must be non-negative");
        }
        if self.mu_low < self.mu_high {
            return err("attenuation must not increase with energy (mu_low >= mu_high)");
        }
        Ok(())
    }
}

/// Fixture attenuation table. Values set image contrast, they are not
/// measured physics.
pub fn builtin_materials() -> BTreeMap<String, Material> {
    [
        Material::new("air", 0.0, 0.0),
        Material::new("plastic", 0.015, 0.008),
        Material::new("pcb", 0.06, 0.03),
        Material::new("lithium_cell", 0.25, 0.12),
        Material::new("steel", 0.9, 0.5),
    ]
    .into_iter()
    .map(|m| (m.name.clone(), m))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatteryClass {
    Cylindrical,
    Pouch,
    Button,
    Other,
}

impl BatteryClass {
    pub const ALL: [BatteryClass; 4] = [
        BatteryClass::Cylindrical,
        BatteryClass::Pouch,
        BatteryClass::Button,
        BatteryClass::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BatteryClass::Cylindrical => "cylindrical",
            BatteryClass::Pouch => "pouch",
            BatteryClass::Button => "button",
            BatteryClass::Other => "other",
        }
    }
}

/// Axis-aligned footprint on the belt: `x` in travel coordinates, `y` across
/// the belt from its edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_start: f64,
    pub x_end: f64,
    pub y_start: f64,
    pub y_end: f64,
}

impl Rect {
    pub fn new(x_start: f64, x_end: f64, y_start: f64, y_end: f64) -> Self {
        Self {
            x_start,
            x_end,
            y_start,
            y_end,
        }
    }

    pub fn length(&self) -> f64 {
        self.x_end - self.x_start
    }

    pub fn width(&self) -> f64 {
        self.y_end - self.y_start
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_start + self.x_end),
            0.5 * (self.y_start + self.y_end),
        )
    }

    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.x_start >= self.x_start
            && o.x_end <= self.x_end
            && o.y_start >= self.y_start
            && o.y_end <= self.y_end
    }

    pub fn is_valid(&self) -> bool {
        [self.x_start, self.x_end, self.y_start, self.y_end]
            .iter()
            .all(|v| v.is_finite())
            && self.x_end > self.x_start
            && self.y_end > self.y_start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryInstance {
    pub id: u64,
    pub class: BatteryClass,
    pub rect: Rect,
    pub thickness_mm: f64,
    pub material: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceInstance {
    pub id: u64,
    pub rect: Rect,
    pub thickness_mm: f64,
    pub material: String,
    #[serde(default)]
    pub batteries: Vec<BatteryInstance>,
}

impl DeviceInstance {
    pub fn has_battery(&self) -> bool {
        !self.batteries.is_empty()
    }
}

/// Everything on the belt, moving together at `conveyor_speed_mm_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub conveyor_speed_mm_s: f64,
    pub devices: Vec<DeviceInstance>,
    /// Extra materials; names shadow the built-in table.
    #[serde(default)]
    pub materials: Vec<Material>,
}

impl Scene {
    pub fn new(conveyor_speed_mm_s: f64, devices: Vec<DeviceInstance>) -> Self {
        Self {
            conveyor_speed_mm_s,
            devices,
            materials: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        let scene: Scene = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SceneError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn material_table(&self) -> BTreeMap<String, Material> {
        let mut table = builtin_materials();
        for m in &self.materials {
            table.insert(m.name.clone(), m.clone());
        }
        table
    }

    pub fn material(&self, name: &str) -> Result<Material, SceneError> {
        self.material_table()
            .remove(name)
            .ok_or_else(|| SceneError::UnknownMaterial(name.to_owned()))
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.conveyor_speed_mm_s > 0.0) {
            return Err(SceneError::InvalidObject {
                id: 0,
                reason: "conveyor speed must be positive".into(),
            });
        }
        let table = self.material_table();
        for m in table.values() {
            m.validate()?;
        }
        let check = |id: u64, rect: &Rect, thickness: f64, material: &str| {
            let bad = |reason: &str| {
                Err(SceneError::InvalidObject {
                    id,
                    reason: reason.to_owned(),
                })
            };
            if !rect.is_valid() {
                return bad("rectangle must have positive extent");
            }
            if rect.y_start < 0.0 || rect.y_end > BELT_WIDTH_MM {
                return bad("rectangle exceeds the belt width");
            }
            if !(thickness > 0.0) || !thickness.is_finite() {
                return bad("thickness must be positive");
            }
            if !table.contains_key(material) {
                return Err(SceneError::UnknownMaterial(material.to_owned()));
            }
            Ok(())
        };
        for d in &self.devices {
            check(d.id, &d.rect, d.thickness_mm, &d.material)?;
            for b in &d.batteries {
                check(b.id, &b.rect, b.thickness_mm, &b.material)?;
                if !d.rect.contains_rect(&b.rect) {
                    return Err(SceneError::InvalidObject {
                        id: b.id,
                        reason: format!("battery lies outside device {}", d.id),
                    });
                }
            }
        }
        Ok(())
    }

    /// Belt-frame `x` of a travel coordinate at time `t`.
    pub fn belt_x(&self, travel: f64, t: f64) -> f64 {
        self.conveyor_speed_mm_s * t - travel
    }
}
