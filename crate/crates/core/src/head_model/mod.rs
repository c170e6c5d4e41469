//! Parametric head model: linear blendshapes, joint regression, linear blend
//! skinning and the UV chart that anchors generator texels to the surface.

mod procedural;
mod uv;

use nalgebra::{Matrix3, Vector3};

pub use procedural::{HeadModelConfig, MOUTH_LINE_THETA};
pub use uv::{SurfaceAnchors, UvChart, INVALID_FACE};

use crate::container::Container;
use crate::error::{ensure_dim, Error, Result};
use crate::image::Image;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const JOINT_ROOT: usize = 0;
pub const JOINT_NECK: usize = 1;
pub const JOINT_HEAD: usize = 2;
pub const JOINT_JAW: usize = 3;
pub const JOINT_NAMES: [&str; 4] = ["root", "neck", "head", "jaw"];

const CONTAINER_FORMAT: &str = "head_model";

/// Shape, expression and pose blendshape bases plus skinning data.
///
/// Bases are stored row-major as `[V*3, n]` so that row `3*v + c` holds the
/// contribution of every coefficient to coordinate `c` of vertex `v`.
#[derive(Clone, Debug)]
pub struct HeadModel {
    pub template: Vec<Vec3>,
    pub shape_basis: Vec<f64>,
    pub expr_basis: Vec<f64>,
    pub pose_basis: Vec<f64>,
    pub n_shape: usize,
    pub n_expr: usize,
    /// `[V, J]`, rows sum to one.
    pub skinning_weights: Vec<f64>,
    /// `[J, V]`.
    pub joint_regressor: Vec<f64>,
    pub parents: Vec<Option<usize>>,
    pub faces: Vec<[u32; 3]>,
    pub uvs: Vec<[f64; 2]>,
    /// Faces forming the mouth interior; defines the UV mouth mask.
    pub mouth_faces: Vec<bool>,
}

/// Shape β, expression ψ, per-joint axis-angle pose θ and global translation.
#[derive(Clone, Debug, PartialEq)]
pub struct FlameParams {
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    pub pose: Vec<Vec3>,
    pub translation: Vec3,
}

impl FlameParams {
    pub fn neutral(model: &HeadModel) -> Self {
        FlameParams {
            shape: vec![0.0; model.n_shape],
            expression: vec![0.0; model.n_expr],
            pose: vec![Vec3::zeros(); model.n_joints()],
            translation: Vec3::zeros(),
        }
    }

    pub fn jaw(&self) -> Vec3 {
        self.pose.get(JOINT_JAW).copied().unwrap_or_else(Vec3::zeros)
    }

    pub fn is_finite(&self) -> bool {
        self.shape.iter().chain(&self.expression).all(|x| x.is_finite())
            && self.pose.iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self.translation.iter().all(|x| x.is_finite())
    }

    /// Flat layout: shape, expression, pose (3 per joint), translation.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.shape.clone();
        v.extend_from_slice(&self.expression);
        for p in &self.pose {
            v.extend(p.iter());
        }
        v.extend(self.translation.iter());
        v
    }

    pub fn from_flat(flat: &[f64], n_shape: usize, n_expr: usize, n_joints: usize) -> Result<Self> {
        ensure_dim("flat params", n_shape + n_expr + 3 * n_joints + 3, flat.len())?;
        let (shape, rest) = flat.split_at(n_shape);
        let (expr, rest) = rest.split_at(n_expr);
        let pose = (0..n_joints)
            .map(|j| Vec3::new(rest[3 * j], rest[3 * j + 1], rest[3 * j + 2]))
            .collect();
        let t = &rest[3 * n_joints..];
        Ok(FlameParams {
            shape: shape.to_vec(),
            expression: expr.to_vec(),
            pose,
            translation: Vec3::new(t[0], t[1], t[2]),
        })
    }
}

/// Result of linear blend skinning: posed positions and, per vertex, the
/// blended affine `x ↦ linear·x + translation`.
#[derive(Clone, Debug)]
pub struct Skinned {
    pub positions: Vec<Vec3>,
    pub linear: Vec<Mat3>,
    pub translation: Vec<Vec3>,
}

/// Rodrigues' formula for an axis-angle vector.
pub fn axis_angle_to_matrix(aa: &Vec3) -> Mat3 {
    let angle = aa.norm();
    if angle < 1e-12 {
        // first-order expansion keeps tiny rotations smooth
        let k = skew(aa);
        return Mat3::identity() + k;
    }
    let axis = aa / angle;
    let k = skew(&axis);
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pose-corrective features: flattened `R_k - I` for every non-root joint.
pub fn pose_features(pose: &[Vec3]) -> Vec<f64> {
    let mut feats = Vec::with_capacity(9 * pose.len().saturating_sub(1));
    for aa in pose.iter().skip(1) {
        let r = axis_angle_to_matrix(aa) - Mat3::identity();
        for i in 0..3 {
            for j in 0..3 {
                feats.push(r[(i, j)]);
            }
        }
    }
    feats
}

/// Per-joint world rigid transforms `(R, t)` mapping rest-pose points to posed
/// points, from forward kinematics over the parent chain.
pub fn joint_transforms(
    joints: &[Vec3],
    parents: &[Option<usize>],
    pose: &[Vec3],
    translation: &Vec3,
) -> Result<Vec<(Mat3, Vec3)>> {
    ensure_dim("pose joints", joints.len(), pose.len())?;
    ensure_dim("parents", joints.len(), parents.len())?;
    let mut world: Vec<(Mat3, Vec3)> = Vec::with_capacity(joints.len());
    for k in 0..joints.len() {
        let r_local = axis_angle_to_matrix(&pose[k]);
        let g = match parents[k] {
            None => (r_local, joints[k]),
            Some(p) if p < k => {
                let (rp, tp) = world[p];
                (rp * r_local, rp * (joints[k] - joints[p]) + tp)
            }
            Some(p) => {
                return Err(Error::InvalidInput(format!(
                    "joint {k} has parent {p}; parents must precede children"
                )))
            }
        };
        world.push(g);
    }
    Ok(world
        .into_iter()
        .zip(joints)
        .map(|((r, t), j)| (r, t - r * j + translation))
        .collect())
}

/// Linear blend skinning of `mesh` given rest-pose joints and per-vertex
/// weights `[V, J]` (rows must sum to one).
pub fn skin(
    mesh: &[Vec3],
    joints: &[Vec3],
    parents: &[Option<usize>],
    pose: &[Vec3],
    translation: &Vec3,
    weights: &[f64],
) -> Result<Skinned> {
    let n_joints = joints.len();
    ensure_dim("skinning weights", mesh.len() * n_joints, weights.len())?;
    for (v, row) in weights.chunks_exact(n_joints).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "skinning row {v} is not a convex combination (sum {sum})"
            )));
        }
    }
    let transforms = joint_transforms(joints, parents, pose, translation)?;
    let mut out = Skinned {
        positions: Vec::with_capacity(mesh.len()),
        linear: Vec::with_capacity(mesh.len()),
        translation: Vec::with_capacity(mesh.len()),
    };
    for (v, p) in mesh.iter().enumerate() {
        let (a, t) = blend_transforms(&transforms, &weights[v * n_joints..(v + 1) * n_joints]);
        out.positions.push(a * p + t);
        out.linear.push(a);
        out.translation.push(t);
    }
    Ok(out)
}

pub(crate) fn blend_transforms(transforms: &[(Mat3, Vec3)], w: &[f64]) -> (Mat3, Vec3) {
    let mut a = Mat3::zeros();
    let mut t = Vec3::zeros();
    for (k, &wk) in w.iter().enumerate() {
        if wk != 0.0 {
            a += transforms[k].0 * wk;
            t += transforms[k].1 * wk;
        }
    }
    (a, t)
}

impl HeadModel {
    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_pose_features(&self) -> usize {
        9 * self.n_joints().saturating_sub(1)
    }

    /// Procedurally built head asset.
    pub fn procedural(config: &HeadModelConfig) -> Self {
        procedural::build(config)
    }

    pub fn check_params(&self, params: &FlameParams) -> Result<()> {
        ensure_dim("shape coefficients", self.n_shape, params.shape.len())?;
        ensure_dim("expression coefficients", self.n_expr, params.expression.len())?;
        ensure_dim("pose joints", self.n_joints(), params.pose.len())?;
        if !params.is_finite() {
            return Err(Error::InvalidInput("non-finite head parameters".into()));
        }
        Ok(())
    }

    fn add_basis(&self, out: &mut [Vec3], basis: &[f64], coeffs: &[f64]) {
        let n = coeffs.len();
        if n == 0 || coeffs.iter().all(|&c| c == 0.0) {
            return;
        }
        for (v, p) in out.iter_mut().enumerate() {
            for c in 0..3 {
                let row = &basis[(3 * v + c) * n..(3 * v + c + 1) * n];
                let mut acc = 0.0;
                for (b, x) in row.iter().zip(coeffs) {
                    acc += b * x;
                }
                p[c] += acc;
            }
        }
    }

    /// Template plus shape, expression and pose-corrective blendshapes.
    pub fn canonical_mesh(&self, params: &FlameParams) -> Result<Vec<Vec3>> {
        self.check_params(params)?;
        let mut out = self.template.clone();
        self.add_basis(&mut out, &self.shape_basis, &params.shape);
        self.add_basis(&mut out, &self.expr_basis, &params.expression);
        if !self.pose_basis.is_empty() {
            self.add_basis(&mut out, &self.pose_basis, &pose_features(&params.pose));
        }
        Ok(out)
    }

    /// Rest-pose joints regressed from the shaped, expression-free mesh.
    pub fn regress_joints(&self, shape: &[f64]) -> Result<Vec<Vec3>> {
        ensure_dim("shape coefficients", self.n_shape, shape.len())?;
        let mut shaped = self.template.clone();
        self.add_basis(&mut shaped, &self.shape_basis, shape);
        let nv = self.n_vertices();
        Ok((0..self.n_joints())
            .map(|j| {
                let row = &self.joint_regressor[j * nv..(j + 1) * nv];
                row.iter()
                    .zip(&shaped)
                    .filter(|(w, _)| **w != 0.0)
                    .fold(Vec3::zeros(), |acc, (w, p)| acc + p * *w)
            })
            .collect())
    }

    /// Fully posed mesh with per-vertex blended transforms.
    pub fn posed(&self, params: &FlameParams) -> Result<Skinned> {
        let mesh = self.canonical_mesh(params)?;
        let joints = self.regress_joints(&params.shape)?;
        skin(
            &mesh,
            &joints,
            &self.parents,
            &params.pose,
            &params.translation,
            &self.skinning_weights,
        )
    }

    /// Per-vertex canonical-space displacement induced by expression and jaw
    /// pose, with shape and every other pose held at defaults.
    pub fn expression_vertex_offsets(&self, expression: &[f64], jaw: &Vec3) -> Result<Vec<Vec3>> {
        let mut params = FlameParams::neutral(self);
        ensure_dim("expression coefficients", self.n_expr, expression.len())?;
        params.expression = expression.to_vec();
        if self.n_joints() > JOINT_JAW {
            params.pose[JOINT_JAW] = *jaw;
        }
        let posed = self.posed(&params)?;
        Ok(posed
            .positions
            .iter()
            .zip(&self.template)
            .map(|(p, t)| p - t)
            .collect())
    }

    /// Expression offset map Δp over the chart: per-texel position under
    /// (ψ, θ_jaw) minus the neutral position. Invalid texels are zero.
    pub fn expression_offset_map(&self, chart: &UvChart, expression: &[f64], jaw: &Vec3) -> Result<Image> {
        let offsets = self.expression_vertex_offsets(expression, jaw)?;
        let mut map = Image::new(chart.resolution, chart.resolution, 3);
        for t in 0..chart.n_texels() {
            if let Some((face, bary)) = chart.texel(t) {
                let f = self.faces[face];
                let d = offsets[f[0] as usize] * bary[0]
                    + offsets[f[1] as usize] * bary[1]
                    + offsets[f[2] as usize] * bary[2];
                map.data[3 * t..3 * t + 3].copy_from_slice(d.as_slice());
            }
        }
        Ok(map)
    }

    /// Builds the UV chart at the given resolution.
    pub fn uv_chart(&self, resolution: usize) -> UvChart {
        UvChart::build(self, resolution)
    }

    /// Per-texel canonical anchor, blended skinning transform and validity.
    pub fn uv_surface_anchors(&self, params: &FlameParams, chart: &UvChart) -> Result<SurfaceAnchors> {
        uv::surface_anchors(self, params, chart)
    }

    /// Mean edge length of the template mesh.
    pub fn mean_edge_length(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for f in &self.faces {
            for e in 0..3 {
                let a = self.template[f[e] as usize];
                let b = self.template[f[(e + 1) % 3] as usize];
                let l = (a - b).norm();
                if l > 0.0 {
                    sum += l;
                    n += 1;
                }
            }
        }
        sum / n.max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.n_vertices();
        let nj = self.n_joints();
        ensure_dim("shape basis", nv * 3 * self.n_shape, self.shape_basis.len())?;
        ensure_dim("expression basis", nv * 3 * self.n_expr, self.expr_basis.len())?;
        if !self.pose_basis.is_empty() {
            ensure_dim("pose basis", nv * 3 * self.n_pose_features(), self.pose_basis.len())?;
        }
        ensure_dim("skinning weights", nv * nj, self.skinning_weights.len())?;
        ensure_dim("joint regressor", nj * nv, self.joint_regressor.len())?;
        ensure_dim("uvs", nv, self.uvs.len())?;
        ensure_dim("mouth faces", self.faces.len(), self.mouth_faces.len())?;
        for (v, row) in self.skinning_weights.chunks_exact(nj).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidInput(format!("skinning row {v} sums to {s}")));
            }
        }
        let finite = self
            .shape_basis
            .iter()
            .chain(&self.expr_basis)
            .chain(&self.pose_basis)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite blendshape basis".into()));
        }
        if self.faces.iter().flatten().any(|&i| i as usize >= nv) {
            return Err(Error::InvalidInput("face index out of range".into()));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        let nv = self.n_vertices();
        let mut c = Container::new(CONTAINER_FORMAT);
        c.set_meta("n_shape", self.n_shape.to_string());
        c.set_meta("n_expr", self.n_expr.to_string());
        c.put_f64(
            "template",
            &[nv, 3],
            self.template.iter().flat_map(|p| p.iter().copied()).collect(),
        )?;
        c.put_f64("shape_basis", &[nv * 3, self.n_shape], self.shape_basis.clone())?;
        c.put_f64("expr_basis", &[nv * 3, self.n_expr], self.expr_basis.clone())?;
        let npf = if self.pose_basis.is_empty() { 0 } else { self.n_pose_features() };
        c.put_f64("pose_basis", &[nv * 3, npf], self.pose_basis.clone())?;
        c.put_f64("skinning_weights", &[nv, self.n_joints()], self.skinning_weights.clone())?;
        c.put_f64("joint_regressor", &[self.n_joints(), nv], self.joint_regressor.clone())?;
        c.put_u32(
            "parents",
            &[self.n_joints()],
            self.parents.iter().map(|p| p.map_or(u32::MAX, |p| p as u32)).collect(),
        )?;
        c.put_u32(
            "faces",
            &[self.faces.len(), 3],
            self.faces.iter().flatten().copied().collect(),
        )?;
        c.put_f64("uvs", &[nv, 2], self.uvs.iter().flatten().copied().collect())?;
        c.put_u8(
            "mouth_faces",
            &[self.faces.len()],
            self.mouth_faces.iter().map(|&b| b as u8).collect(),
        )?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_format(CONTAINER_FORMAT)?;
        let (_, template) = c.get_f64("template")?;
        let (sb_shape, shape_basis) = c.get_f64("shape_basis")?;
        let (eb_shape, expr_basis) = c.get_f64("expr_basis")?;
        let (_, pose_basis) = c.get_f64("pose_basis")?;
        let (_, skinning_weights) = c.get_f64("skinning_weights")?;
        let (_, joint_regressor) = c.get_f64("joint_regressor")?;
        let (_, parents) = c.get_u32("parents")?;
        let (_, faces) = c.get_u32("faces")?;
        let (_, uvs) = c.get_f64("uvs")?;
        let (_, mouth) = c.get_u8("mouth_faces")?;
        let model = HeadModel {
            template: template.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect(),
            shape_basis,
            expr_basis,
            pose_basis,
            n_shape: sb_shape[1],
            n_expr: eb_shape[1],
            skinning_weights,
            joint_regressor,
            parents: parents
                .iter()
                .map(|&p| if p == u32::MAX { None } else { Some(p as usize) })
                .collect(),
            faces: faces.chunks_exact(3).map(|f| [f[0], f[1], f[2]]).collect(),
            uvs: uvs.chunks_exact(2).map(|p| [p[0], p[1]]).collect(),
            mouth_faces: mouth.iter().map(|&b| b != 0).collect(),
        };
        model.validate()?;
        Ok(model)
    }
}
