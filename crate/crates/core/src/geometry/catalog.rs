//! The synthetic object catalog: ten classes built from primitives, each with
//! named parts and an affordance-verb → part-set map.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::primitives::{Primitive, V3};
use crate::error::{Error, Result};

/// Distance below which two parts count as touching rather than overlapping.
pub const CONTACT_TOLERANCE: f64 = 1e-3;

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn id(self) -> u16 {
                Self::ALL.iter().position(|&v| v == self).expect("listed") as u16
            }

            pub fn from_id(id: u16) -> Option<Self> {
                Self::ALL.get(id as usize).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::Catalog(format!("unknown {} '{s}'", stringify!($name).to_lowercase())))
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> { s.parse() }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String { v.name().to_string() }
        }
    };
}

named_enum!(
    /// Object categories of the synthetic catalog.
    ObjectClass {
        Mug => "mug",
        Knife => "knife",
        Chair => "chair",
        Faucet => "faucet",
        Bottle => "bottle",
        Bag => "bag",
        Door => "door",
        Hammer => "hammer",
        Earphone => "earphone",
        Bowl => "bowl",
    }
);

named_enum!(
    /// Interaction verbs; each is one affordance class.
    Affordance {
        Grasp => "grasp",
        Cut => "cut",
        Sit => "sit",
        Pour => "pour",
        Contain => "contain",
        Open => "open",
        Listen => "listen",
        WrapGrasp => "wrap-grasp",
        Press => "press",
        Lift => "lift",
        Support => "support",
        Twist => "twist",
    }
);

/// Verb–object pairs that never appear in training data.
pub const RESERVED_PAIRS: &[(Affordance, ObjectClass)] = &[
    (Affordance::Twist, ObjectClass::Faucet),
    (Affordance::Press, ObjectClass::Faucet),
];

pub fn is_reserved(verb: Affordance, class: ObjectClass) -> bool {
    RESERVED_PAIRS.contains(&(verb, class))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub id: u8,
    pub name: String,
    pub primitives: Vec<Primitive>,
}

impl PartSpec {
    pub fn area(&self) -> f64 {
        self.primitives.iter().map(Primitive::area).sum()
    }
}

/// A fully posed object: parts built from primitives, plus the affordance map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub object_class: ObjectClass,
    pub parts: Vec<PartSpec>,
    pub affordance_map: BTreeMap<Affordance, Vec<u8>>,
}

impl ShapeSpec {
    pub fn total_area(&self) -> f64 {
        self.parts.iter().map(PartSpec::area).sum()
    }

    pub fn part(&self, name: &str) -> Option<&PartSpec> {
        self.parts.iter().find(|p| p.name == name)
    }

    pub fn part_ids(&self) -> Vec<u8> {
        self.parts.iter().map(|p| p.id).collect()
    }

    /// Parts mapped to `verb`, or a catalog error for an unknown pair.
    pub fn affordance_parts(&self, verb: Affordance) -> Result<&[u8]> {
        self.affordance_map
            .get(&verb)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Catalog(format!(
                    "{verb} is not an affordance of {}",
                    self.object_class
                ))
            })
    }

    /// Checks the structural invariants: nonempty affordance sets over known
    /// parts, and no part surface inside another part's solid beyond
    /// [`CONTACT_TOLERANCE`].
    pub fn validate(&self) -> Result<()> {
        let ids = self.part_ids();
        for (verb, parts) in &self.affordance_map {
            if parts.is_empty() {
                return Err(Error::Catalog(format!("{verb} maps to no parts")));
            }
            if let Some(p) = parts.iter().find(|p| !ids.contains(p)) {
                return Err(Error::Catalog(format!("{verb} maps to unknown part {p}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for a in &self.parts {
            for b in &self.parts {
                if a.id == b.id {
                    continue;
                }
                for prim in &a.primitives {
                    for _ in 0..400 {
                        let p = prim.sample(&mut rng);
                        for other in &b.primitives {
                            let d = other.signed_distance(&p);
                            if d < -CONTACT_TOLERANCE {
                                return Err(Error::Catalog(format!(
                                    "{}: part '{}' penetrates '{}' by {:.4}",
                                    self.object_class, a.name, b.name, -d
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Part names of a class, in part-id order.
pub fn part_names(class: ObjectClass) -> &'static [&'static str] {
    use ObjectClass::*;
    match class {
        Mug => &["body", "handle"],
        Knife => &["blade", "handle"],
        Chair => &["seat", "back", "legs"],
        Faucet => &["base", "spout", "lever"],
        Bottle => &["body", "cap"],
        Bag => &["body", "handle"],
        Door => &["panel", "knob"],
        Hammer => &["head", "handle"],
        Earphone => &["band", "cups"],
        Bowl => &["wall", "base"],
    }
}

/// Verb → part names, including reserved pairs.
pub fn affordance_table(class: ObjectClass) -> &'static [(Affordance, &'static [&'static str])] {
    use Affordance::*;
    use ObjectClass::*;
    match class {
        Mug => &[
            (Grasp, &["handle"]),
            (Lift, &["handle"]),
            (Contain, &["body"]),
            (Pour, &["body"]),
            (WrapGrasp, &["body"]),
        ],
        Knife => &[(Cut, &["blade"]), (Grasp, &["handle"])],
        Chair => &[(Sit, &["seat"]), (Support, &["legs"])],
        Faucet => &[
            (Pour, &["spout"]),
            (Open, &["lever"]),
            (Twist, &["lever"]),
            (Press, &["lever"]),
        ],
        Bottle => &[
            (Twist, &["cap"]),
            (Open, &["cap"]),
            (Contain, &["body"]),
            (Pour, &["body"]),
            (WrapGrasp, &["body"]),
        ],
        Bag => &[
            (Grasp, &["handle"]),
            (Lift, &["handle"]),
            (Contain, &["body"]),
        ],
        Door => &[(Open, &["knob"]), (Twist, &["knob"]), (Press, &["knob"])],
        Hammer => &[(Grasp, &["handle"]), (Lift, &["handle"])],
        Earphone => &[(Listen, &["cups"]), (Grasp, &["band"]), (Press, &["cups"])],
        Bowl => &[
            (Contain, &["wall"]),
            (Pour, &["wall"]),
            (WrapGrasp, &["wall"]),
            (Support, &["base"]),
        ],
    }
}

/// Verbs of `class`, excluding reserved pairs.
pub fn seen_affordances(class: ObjectClass) -> Vec<Affordance> {
    affordance_table(class)
        .iter()
        .map(|(v, _)| *v)
        .filter(|v| !is_reserved(*v, class))
        .collect()
}

/// Deterministic, seed-jittered instance of `class`. Every dimension is
/// scaled by an independent factor in [0.85, 1.15]; gaps between parts are
/// fixed so jitter never creates overlaps.
pub fn shape_spec(class: ObjectClass, seed: u64) -> ShapeSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class.id() as u64 + 1) << 48));
    let mut j = |x: f64| x * rng.random_range(0.85..1.15);
    let deg = PI / 180.0;
    let cyl = |center: V3, axis: V3, radius: f64, height: f64, bottom: bool, top: bool| {
        Primitive::Cylinder {
            center,
            axis,
            radius,
            height,
            bottom_cap: bottom,
            top_cap: top,
        }
    };
    let boxed = |center: V3, half: V3| Primitive::Box { center, half };
    use ObjectClass::*;
    let parts: Vec<Vec<Primitive>> = match class {
        Mug => {
            let (r, h) = (j(0.5), j(1.0));
            let (major, minor) = (j(0.3) * h, 0.05);
            let cx = r + minor + 0.02;
            vec![
                vec![cyl(V3::new(0.0, 0.0, h / 2.0), V3::z(), r, h, true, false)],
                vec![Primitive::Torus {
                    center: V3::new(cx, 0.0, h / 2.0),
                    normal: V3::y(),
                    u: V3::x(),
                    major,
                    minor,
                    arc: (-80.0 * deg, 80.0 * deg),
                }],
            ]
        }
        Knife => {
            let (lb, wb) = (j(1.2), j(0.12));
            let (lh, rh) = (j(0.7), j(0.06));
            vec![
                vec![boxed(
                    V3::new(lb / 2.0 + 0.01, 0.0, 0.0),
                    V3::new(lb / 2.0, 0.015, wb),
                )],
                vec![cyl(
                    V3::new(-lh / 2.0 - 0.01, 0.0, 0.0),
                    V3::x(),
                    rh,
                    lh,
                    true,
                    true,
                )],
            ]
        }
        Chair => {
            let (s, zs, bh) = (j(1.0), j(0.9), j(0.9));
            let leg_h = zs - 0.06;
            let legs = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .iter()
                .map(|(sx, sy)| {
                    cyl(
                        V3::new(sx * 0.42 * s, sy * 0.42 * s, leg_h / 2.0),
                        V3::z(),
                        0.04,
                        leg_h,
                        true,
                        false,
                    )
                })
                .collect();
            vec![
                vec![boxed(
                    V3::new(0.0, 0.0, zs),
                    V3::new(0.5 * s, 0.5 * s, 0.05),
                )],
                vec![boxed(
                    V3::new(0.0, -0.5 * s + 0.03, zs + 0.06 + bh / 2.0),
                    V3::new(0.5 * s, 0.03, bh / 2.0),
                )],
                legs,
            ]
        }
        Faucet => {
            let (rb, hb) = (j(0.15), j(0.9));
            let (rs, ls) = (j(0.07), j(0.6));
            let lw = j(0.35);
            vec![
                vec![cyl(
                    V3::new(0.0, 0.0, hb / 2.0),
                    V3::z(),
                    rb,
                    hb,
                    true,
                    true,
                )],
                vec![cyl(
                    V3::new(rb + 0.01 + ls / 2.0, 0.0, 0.75 * hb),
                    V3::x(),
                    rs,
                    ls,
                    false,
                    true,
                )],
                vec![boxed(
                    V3::new(lw / 2.0 - 0.08, 0.0, hb + 0.045),
                    V3::new(lw / 2.0, 0.035, 0.035),
                )],
            ]
        }
        Bottle => {
            let (r, h) = (j(0.3), j(1.0));
            let (rc, hc) = (j(0.12), j(0.18));
            vec![
                vec![cyl(V3::new(0.0, 0.0, h / 2.0), V3::z(), r, h, true, true)],
                vec![cyl(
                    V3::new(0.0, 0.0, h + 0.01 + hc / 2.0),
                    V3::z(),
                    rc,
                    hc,
                    true,
                    true,
                )],
            ]
        }
        Bag => {
            let (bw, bd, bh) = (j(1.0), j(0.4), j(0.8));
            let (major, minor) = (j(0.3) * bw, 0.03);
            vec![
                vec![boxed(
                    V3::new(0.0, 0.0, bh / 2.0),
                    V3::new(bw / 2.0, bd / 2.0, bh / 2.0),
                )],
                vec![Primitive::Torus {
                    center: V3::new(0.0, 0.0, bh + minor + 0.02),
                    normal: -V3::y(),
                    u: V3::x(),
                    major,
                    minor,
                    arc: (0.0, PI),
                }],
            ]
        }
        Door => {
            let (pw, ph) = (j(1.0), j(2.0));
            let (rk, lk) = (j(0.08), j(0.2));
            vec![
                vec![boxed(
                    V3::new(0.0, 0.0, ph / 2.0),
                    V3::new(pw / 2.0, 0.03, ph / 2.0),
                )],
                vec![cyl(
                    V3::new(0.38 * pw, 0.04 + lk / 2.0, 0.48 * ph),
                    V3::y(),
                    rk,
                    lk,
                    false,
                    true,
                )],
            ]
        }
        Hammer => {
            let (rh, lh) = (j(0.05), j(1.0));
            let (hw, hh) = (j(0.3), j(0.09));
            vec![
                vec![boxed(
                    V3::new(0.0, 0.0, lh + 0.01 + hh),
                    V3::new(hw, 0.08, hh),
                )],
                vec![cyl(
                    V3::new(0.0, 0.0, lh / 2.0),
                    V3::z(),
                    rh,
                    lh,
                    true,
                    true,
                )],
            ]
        }
        Earphone => {
            let (major, minor) = (j(0.5), 0.04);
            let (rc, tc) = (j(0.18), j(0.12));
            let a = 15.0 * deg;
            let zc = major * a.sin() - minor - 0.02 - rc;
            let xc = major * a.cos();
            vec![
                vec![Primitive::Torus {
                    center: V3::zeros(),
                    normal: -V3::y(),
                    u: V3::x(),
                    major,
                    minor,
                    arc: (a, PI - a),
                }],
                vec![
                    cyl(V3::new(xc, 0.0, zc), V3::x(), rc, tc, true, true),
                    cyl(V3::new(-xc, 0.0, zc), V3::x(), rc, tc, true, true),
                ],
            ]
        }
        Bowl => {
            let (r, h) = (j(0.5), j(0.35));
            vec![
                vec![cyl(
                    V3::new(0.0, 0.0, 0.01 + h / 2.0),
                    V3::z(),
                    r,
                    h,
                    false,
                    false,
                )],
                vec![Primitive::Disk {
                    center: V3::zeros(),
                    normal: V3::z(),
                    radius: r - 0.01,
                }],
            ]
        }
    };
    let names = part_names(class);
    let parts: Vec<PartSpec> = parts
        .into_iter()
        .zip(names)
        .enumerate()
        .map(|(i, (primitives, name))| PartSpec {
            id: i as u8,
            name: name.to_string(),
            primitives,
        })
        .collect();
    let affordance_map = affordance_table(class)
        .iter()
        .map(|(verb, part_list)| {
            let ids = part_list
                .iter()
                .map(|n| names.iter().position(|m| m == n).expect("part listed") as u8)
                .collect();
            (*verb, ids)
        })
        .collect();
    ShapeSpec {
        object_class: class,
        parts,
        affordance_map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_validates_across_seeds() {
        for &class in ObjectClass::ALL {
            for seed in 0..6 {
                let spec = shape_spec(class, seed);
                spec.validate()
                    .unwrap_or_else(|e| panic!("{class} seed {seed}: {e}"));
            }
        }
    }

    #[test]
    fn every_verb_has_a_seen_pair() {
        for &verb in Affordance::ALL {
            let n = ObjectClass::ALL
                .iter()
                .filter(|&&c| seen_affordances(c).contains(&verb))
                .count();
            assert!(n >= 1, "{verb} never seen");
        }
    }

    #[test]
    fn names_round_trip() {
        for &v in Affordance::ALL {
            assert_eq!(v.name().parse::<Affordance>().unwrap(), v);
            assert_eq!(Affordance::from_id(v.id()), Some(v));
        }
        assert!("spoon".parse::<ObjectClass>().is_err());
    }

    #[test]
    fn reserved_pairs_exist_in_catalog() {
        for &(verb, class) in RESERVED_PAIRS {
            assert!(shape_spec(class, 0).affordance_parts(verb).is_ok());
            assert!(!seen_affordances(class).contains(&verb));
        }
    }

    #[test]
    fn unknown_pair_is_a_catalog_error() {
        let spec = shape_spec(ObjectClass::Knife, 0);
        assert!(matches!(
            spec.affordance_parts(Affordance::Sit),
            Err(Error::Catalog(_))
        ));
    }
}
