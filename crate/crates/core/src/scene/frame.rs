use super::{Scene, SceneError, Vec2};

/// `p -> R p + t` with `R` a rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    cos: f64,
    sin: f64,
    translation: Vec2,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            cos: 1.0,
            sin: 0.0,
            translation: [0.0, 0.0],
        }
    }

    /// Rotation by `angle` radians counter-clockwise, then translation.
    pub fn new(angle: f64, translation: Vec2) -> Self {
        Self {
            cos: angle.cos(),
            sin: angle.sin(),
            translation,
        }
    }

    /// The transform taking `origin` to zero and the unit `heading` to +x.
    pub fn to_local(origin: Vec2, heading: Vec2) -> Self {
        let n = heading[0].hypot(heading[1]);
        let (cos, sin) = (heading[0] / n, -heading[1] / n);
        let rotated = [cos * origin[0] - sin * origin[1], sin * origin[0] + cos * origin[1]];
        Self {
            cos,
            sin,
            translation: [-rotated[0], -rotated[1]],
        }
    }

    pub fn apply_vector(&self, v: Vec2) -> Vec2 {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1]]
    }

    pub fn apply_point(&self, p: Vec2) -> Vec2 {
        let r = self.apply_vector(p);
        [r[0] + self.translation[0], r[1] + self.translation[1]]
    }

    pub fn inverse(&self) -> Self {
        let (cos, sin) = (self.cos, -self.sin);
        let t = self.translation;
        Self {
            cos,
            sin,
            translation: [-(cos * t[0] - sin * t[1]), -(sin * t[0] + cos * t[1])],
        }
    }
}

/// Where the heading of the focal frame came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadingSource {
    Velocity,
    LastPositions,
    /// No motion observed; the world orientation is kept.
    Identity,
}

/// The normalising transform applied to a scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalFrame {
    pub transform: RigidTransform,
    pub heading: HeadingSource,
}

/// Moves a scene into the focal agent's frame: its last position becomes the
/// origin and its direction of motion the +x axis.
pub fn to_focal_frame(scene: &Scene) -> Result<(Scene, FocalFrame), SceneError> {
    let focal = scene.focal();
    let t_last = focal.len() - 1;
    if !focal.validity()[t_last] {
        return Err(SceneError::FocalNotObserved);
    }
    let origin = focal.positions()[t_last];
    let v = focal.last_velocity();
    let (heading, source) = if v[0] != 0.0 || v[1] != 0.0 {
        (Some(v), HeadingSource::Velocity)
    } else {
        let moved = (0..t_last).rev().filter(|t| focal.validity()[*t]).find_map(|t| {
            let p = focal.positions()[t];
            let d = [origin[0] - p[0], origin[1] - p[1]];
            (d[0] != 0.0 || d[1] != 0.0).then_some(d)
        });
        match moved {
            Some(d) => (Some(d), HeadingSource::LastPositions),
            None => (None, HeadingSource::Identity),
        }
    };
    let transform = match heading {
        Some(h) => RigidTransform::to_local(origin, h),
        None => RigidTransform::to_local(origin, [1.0, 0.0]),
    };
    if source == HeadingSource::Identity {
        log::warn!(
            "scene {}: focal agent never moved, keeping world orientation",
            scene.id()
        );
    }
    Ok((
        scene.transformed(&transform),
        FocalFrame {
            transform,
            heading: source,
        },
    ))
}
