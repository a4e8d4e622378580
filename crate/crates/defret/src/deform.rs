//! Deformation of a source mesh toward a target distance field.
//!
//! The energy is the sum of the target's unsigned distance at every vertex
//! plus a rigidity regularizer that penalizes changes of each edge vector:
//!
//! ```text
//! E(V') = sum_i f_t(v'_i) + lambda * sum_{(i,j) in E} |(v'_i - v'_j) - (v_i - v_j)|^2
//! ```
//!
//! Minimization is first-order: steepest descent with Armijo backtracking,
//! initialized at the source vertices. Accepted steps never increase the
//! energy.

use crate::distance_field::UnsignedDistanceGrid;
use crate::geometry::TriangleMesh;
use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeformError {
    #[error("energy became non-finite at iteration {iteration}")]
    NonFiniteEnergy { iteration: usize },
    #[error("{count} vertices stayed outside the grid for {iterations} consecutive iterations")]
    VerticesEscaped { count: usize, iterations: usize },
    #[error("vertex count {got} does not match source ({expected})")]
    VertexCountMismatch { got: usize, expected: usize },
}

/// Source mesh, target field, and the rigidity weight.
#[derive(Debug, Clone)]
pub struct DeformationProblem {
    pub source: TriangleMesh,
    pub target_udf: UnsignedDistanceGrid,
    pub lambda: f64,
    /// Square the per-vertex fit term instead of using the raw distance.
    /// Off by default; the plain sum is the reference formulation.
    pub squared_fit: bool,
}

impl DeformationProblem {
    pub fn new(source: TriangleMesh, target_udf: UnsignedDistanceGrid) -> Self {
        Self {
            source,
            target_udf,
            lambda: 1.0,
            squared_fit: false,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_squared_fit(mut self, squared: bool) -> Self {
        self.squared_fit = squared;
        self
    }
}

/// First-order solver knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop when the sup-norm of the energy gradient falls below this.
    pub gradient_tolerance: f64,
    /// First trial step length of the very first iteration.
    pub initial_step: f64,
    /// Multiplicative backtracking factor in (0, 1).
    pub backtrack: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Line-search stall threshold; below this the solve stops.
    pub min_step: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            initial_step: 1e-2,
            backtrack: 0.5,
            armijo_c: 1e-4,
            min_step: 1e-12,
            seed: 0,
        }
    }
}

/// Deformed vertices plus the energy split and termination data.
#[derive(Debug, Clone)]
pub struct DeformationResult {
    pub vertices: Vec<Point3<f64>>,
    pub fit_term: f64,
    pub rigidity_term: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl DeformationResult {
    /// Deformed mesh with the source connectivity.
    pub fn mesh(&self, problem: &DeformationProblem) -> TriangleMesh {
        problem.source.with_vertices(self.vertices.clone())
    }
}

/// Evaluates `(fit, rigidity)` at the given vertex positions.
pub fn energy(
    problem: &DeformationProblem,
    vertices: &[Point3<f64>],
) -> Result<(f64, f64), DeformError> {
    let rest = problem.source.vertices();
    if vertices.len() != rest.len() {
        return Err(DeformError::VertexCountMismatch {
            got: vertices.len(),
            expected: rest.len(),
        });
    }
    let mut fit = 0.0;
    for v in vertices {
        let d = problem.target_udf.query(v);
        fit += if problem.squared_fit { d * d } else { d };
    }
    let mut rigidity = 0.0;
    for e in problem.source.edges() {
        let (i, j) = (e[0] as usize, e[1] as usize);
        let now = vertices[i] - vertices[j];
        let was = rest[i] - rest[j];
        rigidity += (now - was).norm_squared();
    }
    Ok((fit, problem.lambda * rigidity))
}

/// Energy gradient: finite-difference field gradient per vertex for the fit
/// term, analytic sparse accumulation over edges for the rigidity term.
pub fn energy_gradient(
    problem: &DeformationProblem,
    vertices: &[Point3<f64>],
) -> Vec<Vector3<f64>> {
    let rest = problem.source.vertices();
    let mut grad = vec![Vector3::zeros(); vertices.len()];
    for (g, v) in grad.iter_mut().zip(vertices) {
        let field = problem.target_udf.gradient(v);
        *g = if problem.squared_fit {
            field * (2.0 * problem.target_udf.query(v))
        } else {
            field
        };
    }
    for e in problem.source.edges() {
        let (i, j) = (e[0] as usize, e[1] as usize);
        let diff = (vertices[i] - vertices[j]) - (rest[i] - rest[j]);
        let pull = diff * (2.0 * problem.lambda);
        grad[i] += pull;
        grad[j] -= pull;
    }
    grad
}

fn sup_norm(grad: &[Vector3<f64>]) -> f64 {
    grad.iter().fold(0.0f64, |m, g| m.max(g.amax()))
}

fn grad_norm_sq(grad: &[Vector3<f64>]) -> f64 {
    grad.iter().map(|g| g.norm_squared()).sum()
}

const ESCAPE_PATIENCE: usize = 25;

/// Minimizes the deformation energy from the source initialization.
///
/// The accepted-step energy sequence is monotone non-increasing. Returns an
/// error if the energy turns non-finite or vertices persist outside the
/// grid domain.
pub fn deform(
    problem: &DeformationProblem,
    opts: &SolverOptions,
) -> Result<DeformationResult, DeformError> {
    let mut vertices: Vec<Point3<f64>> = problem.source.vertices().to_vec();
    let (fit0, rig0) = energy(problem, &vertices)?;
    let mut current = fit0 + rig0;
    if !current.is_finite() {
        return Err(DeformError::NonFiniteEnergy { iteration: 0 });
    }

    let mut step = opts.initial_step;
    let mut iterations = 0;
    let mut converged = false;
    let mut escaped_streak = 0usize;

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        let grad = energy_gradient(problem, &vertices);
        if sup_norm(&grad) < opts.gradient_tolerance {
            iterations = iter;
            converged = true;
            break;
        }
        let g2 = grad_norm_sq(&grad);

        // Backtracking line search along the negative gradient.
        let mut alpha = step;
        let mut accepted = None;
        while alpha >= opts.min_step {
            let trial: Vec<Point3<f64>> = vertices
                .iter()
                .zip(&grad)
                .map(|(v, g)| v - g * alpha)
                .collect();
            let (fit, rig) = energy(problem, &trial)?;
            let e = fit + rig;
            if !e.is_finite() {
                return Err(DeformError::NonFiniteEnergy { iteration: iter });
            }
            if e <= current - opts.armijo_c * alpha * g2 {
                accepted = Some((trial, e));
                break;
            }
            alpha *= opts.backtrack;
        }
        let Some((next, e)) = accepted else {
            // No decreasing step at line-search resolution: local floor.
            converged = true;
            break;
        };
        debug_assert!(e <= current, "accepted step increased the energy");
        vertices = next;
        current = e;
        // Let the step grow again after a successful iteration.
        step = (alpha * 2.0).min(opts.initial_step.max(alpha * 2.0));

        let outside = vertices
            .iter()
            .filter(|v| !problem.target_udf.contains(v))
            .count();
        if outside > 0 {
            escaped_streak += 1;
            if escaped_streak >= ESCAPE_PATIENCE {
                return Err(DeformError::VerticesEscaped {
                    count: outside,
                    iterations: escaped_streak,
                });
            }
        } else {
            escaped_streak = 0;
        }
    }

    let (fit_term, rigidity_term) = energy(problem, &vertices)?;
    Ok(DeformationResult {
        vertices,
        fit_term,
        rigidity_term,
        iterations,
        converged,
    })
}

/// Writes the deformed mesh as OBJ next to a JSON sidecar holding the energy
/// split and termination data.
pub fn export_result(
    problem: &DeformationProblem,
    result: &DeformationResult,
    obj_path: impl AsRef<std::path::Path>,
) -> std::io::Result<()> {
    let mesh = result.mesh(problem);
    crate::geometry::io::save_obj(&mesh, obj_path.as_ref())?;
    let sidecar = obj_path.as_ref().with_extension("json");
    let report = serde_json::json!({
        "fit_term": result.fit_term,
        "rigidity_term": result.rigidity_term,
        "iterations": result.iterations,
        "converged": result.converged,
    });
    std::fs::write(sidecar, serde_json::to_string_pretty(&report).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance_field::{build_udf_in_cube, domain_for_bbox};
    use crate::geometry::{sample_surface, ShapeId, ShapeRecord, TriangleMesh};
    use approx::assert_relative_eq;
    use nalgebra::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn grid_sheet(nx: usize, ny: usize, size: f64, z: f64) -> TriangleMesh {
        let mut verts = Vec::new();
        for j in 0..=ny {
            for i in 0..=nx {
                verts.push(Point3::new(
                    size * (i as f64 / nx as f64 - 0.5),
                    size * (j as f64 / ny as f64 - 0.5),
                    z,
                ));
            }
        }
        let mut tris = Vec::new();
        let w = nx + 1;
        for j in 0..ny {
            for i in 0..nx {
                let a = (j * w + i) as u32;
                let b = (j * w + i + 1) as u32;
                let c = ((j + 1) * w + i + 1) as u32;
                let d = ((j + 1) * w + i) as u32;
                tris.push([a, b, c]);
                tris.push([a, c, d]);
            }
        }
        TriangleMesh::new(verts, tris).unwrap()
    }

    fn udf_for(
        mesh: &TriangleMesh,
        other: Option<&TriangleMesh>,
        res: u32,
    ) -> crate::distance_field::UnsignedDistanceGrid {
        let (mut lo, mut hi) = mesh.bbox();
        if let Some(o) = other {
            let (lo2, hi2) = o.bbox();
            for a in 0..3 {
                lo[a] = lo[a].min(lo2[a]);
                hi[a] = hi[a].max(hi2[a]);
            }
        }
        let (center, side) = domain_for_bbox(&lo, &hi);
        build_udf_in_cube(mesh, &center, side, res).unwrap()
    }

    #[test]
    fn rigidity_vanishes_at_rest_and_under_translation() {
        let mesh = grid_sheet(4, 4, 1.0, 0.0);
        let udf = udf_for(&mesh, None, 20);
        let problem = DeformationProblem::new(mesh.clone(), udf);
        let (_, rig) = energy(&problem, mesh.vertices()).unwrap();
        assert_eq!(rig, 0.0);

        let shifted: Vec<_> = mesh
            .vertices()
            .iter()
            .map(|v| Point3::new(v.x + 0.37, v.y - 0.11, v.z + 0.05))
            .collect();
        let (_, rig) = energy(&problem, &shifted).unwrap();
        assert!(rig <= 1e-12, "translation changed rigidity: {rig}");
    }

    #[test]
    fn rigidity_of_uniform_scale_counts_edge_lengths() {
        // Doubling a unit-edge mesh changes each edge vector by its own
        // length, so rigidity = lambda * |E| * 1.
        let mesh = TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let udf = udf_for(&mesh, None, 10);
        let lambda = 3.0;
        let problem = DeformationProblem::new(mesh.clone(), udf).with_lambda(lambda);
        let scaled: Vec<_> = mesh.vertices().iter().map(|v| v * 2.0).collect();
        let (_, rig) = energy(&problem, &scaled).unwrap();
        // Edges: two unit legs and one hypotenuse of length sqrt(2).
        let expected = lambda * (1.0 + 1.0 + 2.0);
        assert_relative_eq!(rig, expected, epsilon = 1e-12);
    }

    #[test]
    fn rigidity_gradient_matches_small_step_differences() {
        let mesh = grid_sheet(3, 3, 1.0, 0.0);
        let udf = udf_for(&mesh, None, 12);
        let problem = DeformationProblem::new(mesh.clone(), udf).with_lambda(2.5);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let verts: Vec<Point3<f64>> = mesh
            .vertices()
            .iter()
            .map(|v| {
                Point3::new(
                    v.x + 0.1 * (rng.random::<f64>() - 0.5),
                    v.y + 0.1 * (rng.random::<f64>() - 0.5),
                    v.z + 0.1 * (rng.random::<f64>() - 0.5),
                )
            })
            .collect();
        // Rigidity-only problem: zero out the fit by comparing the full
        // gradient of a lambda-weighted problem against FD of the rigidity
        // alone.
        let h = 1e-7;
        for vi in [0usize, 5, 12] {
            for axis in 0..3 {
                let mut plus = verts.clone();
                let mut minus = verts.clone();
                plus[vi][axis] += h;
                minus[vi][axis] -= h;
                let (_, rp) = energy(&problem, &plus).unwrap();
                let (_, rm) = energy(&problem, &minus).unwrap();
                let fd = (rp - rm) / (2.0 * h);
                // Analytic rigidity part = full gradient minus field part.
                let g = energy_gradient(&problem, &verts)[vi][axis]
                    - problem.target_udf.gradient(&verts[vi])[axis];
                let scale = fd.abs().max(g.abs()).max(1.0);
                assert!(
                    (fd - g).abs() / scale < 1e-6,
                    "vertex {vi} axis {axis}: fd {fd} vs analytic {g}"
                );
            }
        }
    }

    #[test]
    fn full_gradient_matches_energy_differences_at_field_step() {
        // The fit gradient is by definition the central difference of the
        // field with step cell/2, and the rigidity term is quadratic, so the
        // assembled gradient must equal the same-step central difference of
        // the total energy to rounding.
        let mesh = grid_sheet(3, 3, 1.0, 0.0);
        let udf = udf_for(&mesh, None, 16);
        let h = udf.cell_size() * 0.5;
        let problem = DeformationProblem::new(mesh.clone(), udf);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let verts: Vec<Point3<f64>> = mesh
            .vertices()
            .iter()
            .map(|v| {
                Point3::new(
                    v.x + 0.05 * (rng.random::<f64>() - 0.5),
                    v.y + 0.05 * (rng.random::<f64>() - 0.5),
                    v.z + 0.15 + 0.05 * rng.random::<f64>(),
                )
            })
            .collect();
        let grad = energy_gradient(&problem, &verts);
        for vi in 0..verts.len() {
            for axis in 0..3 {
                let mut plus = verts.clone();
                let mut minus = verts.clone();
                plus[vi][axis] += h;
                minus[vi][axis] -= h;
                let (fp, rp) = energy(&problem, &plus).unwrap();
                let (fm, rm) = energy(&problem, &minus).unwrap();
                let fd = ((fp + rp) - (fm + rm)) / (2.0 * h);
                let g = grad[vi][axis];
                let scale = fd.abs().max(g.abs()).max(1.0);
                assert!(
                    (fd - g).abs() / scale < 1e-3,
                    "vertex {vi} axis {axis}: fd {fd} vs assembled {g}"
                );
            }
        }
    }

    #[test]
    fn identity_deformation_stays_within_a_cell() {
        let mesh = grid_sheet(6, 6, 0.8, 0.0);
        let udf = udf_for(&mesh, None, 50);
        let cell = udf.cell_size();
        let problem = DeformationProblem::new(mesh.clone(), udf);
        let result = deform(&problem, &SolverOptions::default()).unwrap();
        for (v, v0) in result.vertices.iter().zip(mesh.vertices()) {
            assert!(
                (v - v0).norm() <= cell,
                "vertex moved {} > cell {}",
                (v - v0).norm(),
                cell
            );
        }
        assert!(result.fit_term <= mesh.vertices().len() as f64 * cell);
    }

    #[test]
    fn translated_sheet_is_recovered() {
        let source = grid_sheet(6, 6, 0.8, 0.0);
        let target = {
            let moved: Vec<_> = source
                .vertices()
                .iter()
                .map(|v| Point3::new(v.x + 0.1, v.y, v.z))
                .collect();
            source.with_vertices(moved)
        };
        let udf = udf_for(&target, Some(&source), 50);
        let cell = udf.cell_size();
        let problem = DeformationProblem::new(source.clone(), udf);
        let opts = SolverOptions {
            max_iterations: 400,
            ..SolverOptions::default()
        };
        let result = deform(&problem, &opts).unwrap();
        for (v, t) in result.vertices.iter().zip(target.vertices()) {
            assert!(
                (v - t).norm() <= 2.0 * cell,
                "vertex off target by {} (cell {})",
                (v - t).norm(),
                cell
            );
        }
    }

    #[test]
    fn lambda_trades_fit_for_rigidity() {
        // Stretch a bar to 1.5x its length: low lambda fits better, high
        // lambda preserves edges better.
        let source = grid_sheet(8, 2, 1.0, 0.0);
        let stretched: Vec<_> = source
            .vertices()
            .iter()
            .map(|v| Point3::new(v.x * 1.5, v.y, v.z))
            .collect();
        let target = source.with_vertices(stretched);
        let udf = udf_for(&target, Some(&source), 40);
        let opts = SolverOptions {
            max_iterations: 500,
            ..SolverOptions::default()
        };
        let soft = deform(
            &DeformationProblem::new(source.clone(), udf.clone()).with_lambda(1.0),
            &opts,
        )
        .unwrap();
        let stiff = deform(
            &DeformationProblem::new(source.clone(), udf).with_lambda(100.0),
            &opts,
        )
        .unwrap();
        assert!(
            soft.fit_term < stiff.fit_term,
            "soft fit {} !< stiff fit {}",
            soft.fit_term,
            stiff.fit_term
        );
        assert!(
            soft.rigidity_term / 1.0 > stiff.rigidity_term / 100.0,
            "soft moved less than stiff in raw edge change"
        );
    }

    #[test]
    fn energy_never_increases_across_accepted_steps() {
        // Randomized problems; re-run the solver while tracking the energy
        // by reproducing its accepted iterates through the public API.
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for trial in 0..10 {
            let source = grid_sheet(4, 4, 0.9, 0.0);
            let jitter: Vec<_> = source
                .vertices()
                .iter()
                .map(|v| {
                    Point3::new(
                        v.x + 0.2 * (rng.random::<f64>() - 0.5),
                        v.y + 0.2 * (rng.random::<f64>() - 0.5),
                        0.1 * (rng.random::<f64>() - 0.5),
                    )
                })
                .collect();
            let target = source.with_vertices(jitter);
            let udf = udf_for(&target, Some(&source), 30);
            let problem = DeformationProblem::new(source.clone(), udf);
            let result = deform(&problem, &SolverOptions::default()).unwrap();
            let (f0, r0) = energy(&problem, source.vertices()).unwrap();
            assert!(
                result.fit_term + result.rigidity_term <= f0 + r0 + 1e-12,
                "trial {trial}: final energy above initial"
            );
        }
    }

    #[test]
    fn connectivity_is_preserved() {
        let source = grid_sheet(3, 3, 1.0, 0.0);
        let udf = udf_for(&source, None, 20);
        let problem = DeformationProblem::new(source.clone(), udf);
        let result = deform(&problem, &SolverOptions::default()).unwrap();
        let out = result.mesh(&problem);
        assert_eq!(out.triangles(), source.triangles());
        assert_eq!(out.edges(), source.edges());
        assert_eq!(out.vertices().len(), source.vertices().len());
    }

    #[test]
    fn identity_fitgap_bound_via_record() {
        // deform(t; t) leaves the resampled cloud within the identity
        // tolerance of the stored training cloud.
        let mesh = crate::geometry::normalize(&crate::geometry::tests::unit_cube()).unwrap();
        let rec = ShapeRecord {
            id: ShapeId(0),
            mesh: mesh.clone(),
            cloud_train: sample_surface(&mesh, 256, 10).unwrap(),
            cloud_eval: None,
        };
        let udf = crate::distance_field::build_udf(&rec, 40).unwrap();
        let problem = DeformationProblem::new(mesh.clone(), udf);
        let result = deform(&problem, &SolverOptions::default()).unwrap();
        let deformed = result.mesh(&problem);
        let pattern = crate::geometry::SamplePattern::draw(&mesh, 256, 10).unwrap();
        let resampled = pattern.evaluate(&deformed);
        let gap = crate::geometry::chamfer_pp(&resampled, &rec.cloud_train).unwrap();
        let tol = 2.0 * problem.target_udf.cell_size().powi(2);
        assert!(gap <= tol, "identity gap {gap} above tolerance {tol}");
    }

    #[test]
    fn export_writes_obj_and_sidecar() {
        let source = grid_sheet(2, 2, 1.0, 0.0);
        let udf = udf_for(&source, None, 12);
        let problem = DeformationProblem::new(source, udf);
        let result = deform(&problem, &SolverOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.obj");
        export_result(&problem, &result, &path).unwrap();
        assert!(path.exists());
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("out.json")).unwrap())
                .unwrap();
        assert!(sidecar["fit_term"].is_number());
        assert!(sidecar["converged"].is_boolean());
    }
}
