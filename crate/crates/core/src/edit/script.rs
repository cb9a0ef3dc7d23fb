//! Line-oriented edit script format.
//!
//! ```text
//! # comment
//! speed_change   target=ego  factor=1.5 window=0,4
//! lane_shift     target=car1 offset=3 ramp=1
//! heading_change target=car2 yaw_deg=30 window=1,3
//! insert id=new1 class=vehicle size=4.5,1.9,1.6 color=0.8,0.1,0.1 from=10,3.5,0.8 to=30,3.5,0.8
//! remove id=car3
//! ```
//!
//! Angles are given in degrees (`yaw_deg`) or radians (`yaw_rad`). Inserted
//! assets are cuboid vehicles moving in a straight line from `from` to `to`
//! over the scene timeline, heading along the direction of travel unless
//! `yaw_deg`/`yaw_rad` is given.

use super::{EditCommand, EditScript, Target};
use crate::scene::{AssetClass, RigidAsset, Trajectory};
use nalgebra::Vector3;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct ScriptParseError {
    pub line: usize,
    pub message: String,
}

struct Args<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn err(&self, message: impl Into<String>) -> ScriptParseError {
        ScriptParseError {
            line: self.line,
            message: message.into(),
        }
    }

    fn raw(&self, key: &str) -> Result<&'a str, ScriptParseError> {
        self.map
            .get(key)
            .copied()
            .ok_or_else(|| self.err(format!("missing argument {key}")))
    }

    fn num(&self, key: &str) -> Result<f64, ScriptParseError> {
        let v = self.raw(key)?;
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| self.err(format!("{key}: not a number: {v}")))
    }

    fn list<const N: usize>(&self, key: &str) -> Result<[f64; N], ScriptParseError> {
        let v = self.raw(key)?;
        let parts: Vec<f64> = v
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| self.err(format!("{key}: expected {N} comma-separated numbers")))?;
        parts
            .try_into()
            .map_err(|_| self.err(format!("{key}: expected {N} comma-separated numbers")))
    }

    fn angle(&self) -> Result<Option<f64>, ScriptParseError> {
        match (self.map.contains_key("yaw_deg"), self.map.contains_key("yaw_rad")) {
            (true, true) => Err(self.err("give yaw_deg or yaw_rad, not both")),
            (true, false) => Ok(Some(self.num("yaw_deg")?.to_radians())),
            (false, true) => Ok(Some(self.num("yaw_rad")?)),
            (false, false) => Ok(None),
        }
    }

    fn window(&self) -> Result<(f64, f64), ScriptParseError> {
        let [a, b] = self.list::<2>("window")?;
        Ok((a, b))
    }

    fn check_known(&self, allowed: &[&str]) -> Result<(), ScriptParseError> {
        match self.map.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(self.err(format!("unknown argument {k}"))),
            None => Ok(()),
        }
    }
}

/// Parses an edit script. `timeline` is used to build trajectories for
/// inserted assets.
pub fn parse_edit_script(text: &str, timeline: &[f64]) -> Result<EditScript, ScriptParseError> {
    let mut commands = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let name = words.next().unwrap_or_default();
        let mut map = BTreeMap::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| ScriptParseError {
                line: i + 1,
                message: format!("expected key=value, found {w}"),
            })?;
            if map.insert(k, v).is_some() {
                return Err(ScriptParseError {
                    line: i + 1,
                    message: format!("duplicate argument {k}"),
                });
            }
        }
        let args = Args { line: i + 1, map };
        let cmd = match name {
            "speed_change" => {
                args.check_known(&["target", "factor", "window"])?;
                EditCommand::SpeedChange {
                    target: Target::parse(args.raw("target")?),
                    factor: args.num("factor")?,
                    window: args.window()?,
                }
            }
            "lane_shift" => {
                args.check_known(&["target", "offset", "ramp"])?;
                EditCommand::LaneShift {
                    target: Target::parse(args.raw("target")?),
                    offset: args.num("offset")?,
                    ramp: if args.map.contains_key("ramp") { args.num("ramp")? } else { 0.0 },
                }
            }
            "heading_change" => {
                args.check_known(&["target", "yaw_deg", "yaw_rad", "window"])?;
                EditCommand::HeadingChange {
                    target: Target::parse(args.raw("target")?),
                    yaw_delta: args.angle()?.ok_or_else(|| args.err("missing yaw_deg or yaw_rad"))?,
                    window: args.window()?,
                }
            }
            "remove" => {
                args.check_known(&["id"])?;
                EditCommand::Remove {
                    id: args.raw("id")?.to_string(),
                }
            }
            "insert" => {
                args.check_known(&["id", "class", "size", "color", "from", "to", "yaw_deg", "yaw_rad"])?;
                let id = args.raw("id")?.to_string();
                let klass = match args.map.get("class").copied().unwrap_or("vehicle") {
                    "vehicle" => AssetClass::Vehicle,
                    "other" => AssetClass::Other,
                    c => return Err(args.err(format!("unknown class {c}"))),
                };
                let size = args.list::<3>("size")?;
                if size.iter().any(|&s| s <= 0.0) {
                    return Err(args.err("size components must be positive"));
                }
                let color = args.list::<3>("color")?;
                let from = Vector3::from(args.list::<3>("from")?);
                let to = Vector3::from(args.list::<3>("to")?);
                let d = to - from;
                let yaw = match args.angle()? {
                    Some(y) => y,
                    None if d.xy().norm() > 0.0 => d.y.atan2(d.x),
                    None => 0.0,
                };
                let mut asset = RigidAsset::cuboid_vehicle(id.clone(), size, color);
                asset.klass = klass;
                EditCommand::Insert {
                    asset: Box::new(asset),
                    trajectory: Trajectory::linear(id, from, to, yaw, timeline),
                }
            }
            other => {
                return Err(ScriptParseError {
                    line: i + 1,
                    message: format!("unknown command {other}"),
                })
            }
        };
        commands.push(cmd);
    }
    Ok(EditScript { commands })
}
