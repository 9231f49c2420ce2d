//! Robot description: bodies, joints and their placement.
//!
//! Each body frame sits at the body's center of mass and inertia is given
//! about that point. A joint places its child relative to the parent body:
//! `origin` is the joint point in the parent frame and `child_offset` is the
//! child's center of mass relative to the joint point, expressed in the child
//! frame at zero joint angle.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub name: String,
    /// kg
    pub mass: f64,
    /// kg·m², about the center of mass, body frame.
    pub inertia: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    Revolute,
    /// Rigid attachment, contributes no degree of freedom.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: String,
    pub child: String,
    #[serde(rename = "type")]
    pub kind: JointType,
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
    /// Joint point in the parent body frame, m.
    #[serde(default)]
    pub origin: [f64; 3],
    /// Child center of mass relative to the joint point, child frame, m.
    #[serde(default)]
    pub child_offset: [f64; 3],
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_name() -> String {
    "robot".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotDescription {
    #[serde(default = "default_name")]
    pub name: String,
    pub base: String,
    pub bodies: Vec<BodySpec>,
    #[serde(default)]
    pub joints: Vec<JointSpec>,
}

/// Arm geometry used by [`RobotDescription::astrobee`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmGeometry {
    /// Shoulder joint location in the base frame, m.
    pub shoulder: [f64; 3],
    pub link1_length: f64,
    pub link2_length: f64,
}

impl Default for ArmGeometry {
    fn default() -> Self {
        Self {
            shoulder: [0.0, 0.0, -0.16],
            link1_length: 0.15,
            link2_length: 0.15,
        }
    }
}

fn diag(i: f64) -> [[f64; 3]; 3] {
    [[i, 0.0, 0.0], [0.0, i, 0.0], [0.0, 0.0, i]]
}

impl RobotDescription {
    /// Free-flyer with a two-joint arm and a 4 kg end-effector point mass.
    ///
    /// Both arm joints rotate about the base y axis; at zero angles the arm
    /// lies along +x under the base.
    pub fn astrobee() -> Self {
        Self::astrobee_with(ArmGeometry::default())
    }

    pub fn astrobee_with(arm: ArmGeometry) -> Self {
        let l1 = arm.link1_length;
        let l2 = arm.link2_length;
        Self {
            name: "astrobee".into(),
            base: "base".into(),
            bodies: vec![
                BodySpec {
                    name: "base".into(),
                    mass: 7.0,
                    inertia: diag(0.11),
                },
                BodySpec {
                    name: "arm1".into(),
                    mass: 1.0,
                    inertia: diag(0.05),
                },
                BodySpec {
                    name: "arm2".into(),
                    mass: 1.0,
                    inertia: diag(0.05),
                },
                BodySpec {
                    name: "end_effector".into(),
                    mass: 4.0,
                    inertia: diag(0.0),
                },
            ],
            joints: vec![
                JointSpec {
                    name: "shoulder".into(),
                    parent: "base".into(),
                    child: "arm1".into(),
                    kind: JointType::Revolute,
                    axis: [0.0, 1.0, 0.0],
                    origin: arm.shoulder,
                    child_offset: [0.5 * l1, 0.0, 0.0],
                },
                JointSpec {
                    name: "elbow".into(),
                    parent: "arm1".into(),
                    child: "arm2".into(),
                    kind: JointType::Revolute,
                    axis: [0.0, 1.0, 0.0],
                    origin: [0.5 * l1, 0.0, 0.0],
                    child_offset: [0.5 * l2, 0.0, 0.0],
                },
                JointSpec {
                    name: "tip".into(),
                    parent: "arm2".into(),
                    child: "end_effector".into(),
                    kind: JointType::Fixed,
                    axis: default_axis(),
                    origin: [0.5 * l2, 0.0, 0.0],
                    child_offset: [0.0; 3],
                },
            ],
        }
    }

    /// The base body alone, no arm.
    pub fn astrobee_base_only() -> Self {
        let mut d = Self::astrobee();
        d.name = "astrobee_base".into();
        d.bodies.truncate(1);
        d.joints.clear();
        d
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let desc: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// N_m, the number of actuated joints.
    pub fn joint_count(&self) -> usize {
        self.joints.iter().filter(|j| j.kind == JointType::Revolute).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDescription(m));
        let mut index = HashMap::new();
        for (i, b) in self.bodies.iter().enumerate() {
            if index.insert(b.name.as_str(), i).is_some() {
                return bad(format!("duplicate body name `{}`", b.name));
            }
            if !(b.mass > 0.0 && b.mass.is_finite()) {
                return bad(format!("body `{}` must have positive mass", b.name));
            }
            let inertia = Matrix3::from_fn(|r, c| b.inertia[r][c]);
            if !inertia.iter().all(|v| v.is_finite()) {
                return bad(format!("body `{}` has non-finite inertia", b.name));
            }
            let scale = inertia.amax().max(1.0);
            if (inertia - inertia.transpose()).amax() > 1e-12 * scale {
                return bad(format!("inertia of body `{}` is not symmetric", b.name));
            }
            let eig = SymmetricEigen::new(inertia).eigenvalues;
            if eig.min() < -1e-12 * scale {
                return bad(format!("inertia of body `{}` is not positive semidefinite", b.name));
            }
        }
        if !index.contains_key(self.base.as_str()) {
            return bad(format!("base body `{}` is not defined", self.base));
        }

        let mut has_parent = vec![false; self.bodies.len()];
        for j in &self.joints {
            let Some(&p) = index.get(j.parent.as_str()) else {
                return bad(format!("joint `{}` references unknown parent `{}`", j.name, j.parent));
            };
            let Some(&c) = index.get(j.child.as_str()) else {
                return bad(format!("joint `{}` references unknown child `{}`", j.name, j.child));
            };
            if p == c {
                return bad(format!("joint `{}` connects a body to itself", j.name));
            }
            if j.child == self.base {
                return bad(format!("joint `{}` makes the base a child", j.name));
            }
            if has_parent[c] {
                return bad(format!("body `{}` has more than one parent joint", j.child));
            }
            has_parent[c] = true;
            let axis = Vector3::from(j.axis);
            if (axis.norm() - 1.0).abs() > 1e-6 {
                return bad(format!("joint `{}` axis is not a unit vector", j.name));
            }
            let finite = j.origin.iter().chain(j.child_offset.iter()).all(|v| v.is_finite());
            if !finite {
                return bad(format!("joint `{}` has non-finite placement", j.name));
            }
        }

        // every body must hang off the base
        let mut seen = vec![false; self.bodies.len()];
        let mut queue = VecDeque::from([index[self.base.as_str()]]);
        seen[index[self.base.as_str()]] = true;
        while let Some(b) = queue.pop_front() {
            for j in self.joints.iter().filter(|j| index[j.parent.as_str()] == b) {
                let c = index[j.child.as_str()];
                if !seen[c] {
                    seen[c] = true;
                    queue.push_back(c);
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return bad(format!("body `{}` is not connected to the base", self.bodies[i].name));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("robot description serializes")
    }
}
