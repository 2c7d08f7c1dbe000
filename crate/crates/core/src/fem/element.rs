//! Element-level matrices and boundary flux vectors.

use std::f64::consts::PI;

use super::shape::{gauss_points_2d, gauss_points_3d, quad_shape, shape_eval};
use super::FemError;

/// Reference matrices of one element: lumped capacitance for `rho * cp = 1`
/// and conduction for `k = 1`. Both scale linearly in their coefficient.
#[derive(Debug, Clone)]
pub struct ElementMatrices {
    pub lumped: [f64; 8],
    pub conduction: [[f64; 8]; 8],
    pub volume: f64,
}

fn invert3(j: &[[f64; 3]; 3]) -> (f64, [[f64; 3]; 3]) {
    let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
    let inv_det = 1.0 / det;
    let inv = [
        [
            (j[1][1] * j[2][2] - j[1][2] * j[2][1]) * inv_det,
            (j[0][2] * j[2][1] - j[0][1] * j[2][2]) * inv_det,
            (j[0][1] * j[1][2] - j[0][2] * j[1][1]) * inv_det,
        ],
        [
            (j[1][2] * j[2][0] - j[1][0] * j[2][2]) * inv_det,
            (j[0][0] * j[2][2] - j[0][2] * j[2][0]) * inv_det,
            (j[0][2] * j[1][0] - j[0][0] * j[1][2]) * inv_det,
        ],
        [
            (j[1][0] * j[2][1] - j[1][1] * j[2][0]) * inv_det,
            (j[0][1] * j[2][0] - j[0][0] * j[2][1]) * inv_det,
            (j[0][0] * j[1][1] - j[0][1] * j[1][0]) * inv_det,
        ],
    ];
    (det, inv)
}

impl ElementMatrices {
    pub fn new(x: &[[f64; 3]; 8]) -> Result<Self, FemError> {
        let mut consistent = [[0.0; 8]; 8];
        let mut conduction = [[0.0; 8]; 8];
        let mut volume = 0.0;
        for (xi, w) in gauss_points_3d() {
            let (n, dn) = shape_eval(xi);
            // J[r][c] = dx_r / dxi_c
            let mut j = [[0.0; 3]; 3];
            for a in 0..8 {
                for r in 0..3 {
                    for c in 0..3 {
                        j[r][c] += x[a][r] * dn[a][c];
                    }
                }
            }
            let (det, jinv) = invert3(&j);
            if !(det > 0.0) || !det.is_finite() {
                return Err(FemError::Geometry(format!(
                    "non-positive jacobian determinant {det:e}"
                )));
            }
            let dv = det * w;
            volume += dv;
            // B[a][r] = dN_a / dx_r = sum_c dN_a/dxi_c * dxi_c/dx_r
            let mut b = [[0.0; 3]; 8];
            for a in 0..8 {
                for r in 0..3 {
                    b[a][r] = (0..3).map(|c| dn[a][c] * jinv[c][r]).sum();
                }
            }
            for a in 0..8 {
                for c in 0..8 {
                    consistent[a][c] += n[a] * n[c] * dv;
                    conduction[a][c] +=
                        (b[a][0] * b[c][0] + b[a][1] * b[c][1] + b[a][2] * b[c][2]) * dv;
                }
            }
        }
        let lumped = consistent.map(|row| row.iter().sum());
        Ok(ElementMatrices {
            lumped,
            conduction,
            volume,
        })
    }
}

/// Row-sum lumped capacitance, J/K per node.
pub fn element_capacitance_lumped(
    x: &[[f64; 3]; 8],
    rho: f64,
    cp: f64,
) -> Result<[f64; 8], FemError> {
    let m = ElementMatrices::new(x)?;
    Ok(m.lumped.map(|v| rho * cp * v))
}

/// Conduction matrix, W/K.
pub fn element_conduction(x: &[[f64; 3]; 8], k: f64) -> Result<[[f64; 8]; 8], FemError> {
    let m = ElementMatrices::new(x)?;
    Ok(m.conduction.map(|row| row.map(|v| k * v)))
}

/// 2x2 Gauss data of a quadrilateral face: shape values, area weights and
/// physical coordinates at each quadrature point.
#[derive(Debug, Clone, Copy)]
pub struct FaceQuadrature {
    pub n: [[f64; 4]; 4],
    pub weight: [f64; 4],
    pub point: [[f64; 3]; 4],
}

impl FaceQuadrature {
    pub fn new(x: &[[f64; 3]; 4]) -> Result<Self, FemError> {
        let mut out = FaceQuadrature {
            n: [[0.0; 4]; 4],
            weight: [0.0; 4],
            point: [[0.0; 3]; 4],
        };
        for (q, (st, w)) in gauss_points_2d().enumerate() {
            let (n, dn) = quad_shape(st);
            let mut ds = [0.0; 3];
            let mut dt = [0.0; 3];
            let mut p = [0.0; 3];
            for a in 0..4 {
                for d in 0..3 {
                    ds[d] += x[a][d] * dn[a][0];
                    dt[d] += x[a][d] * dn[a][1];
                    p[d] += x[a][d] * n[a];
                }
            }
            let cross = [
                ds[1] * dt[2] - ds[2] * dt[1],
                ds[2] * dt[0] - ds[0] * dt[2],
                ds[0] * dt[1] - ds[1] * dt[0],
            ];
            let area = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            if !(area > 0.0) {
                return Err(FemError::Geometry("degenerate face".into()));
            }
            out.n[q] = n;
            out.weight[q] = area * w;
            out.point[q] = p;
        }
        Ok(out)
    }

    pub fn area(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// Field value at quadrature point `q` from the four face nodal values.
    #[inline]
    pub fn interpolate(&self, q: usize, t: &[f64; 4]) -> f64 {
        self.n[q][0] * t[0] + self.n[q][1] * t[1] + self.n[q][2] * t[2] + self.n[q][3] * t[3]
    }
}

/// Gaussian surface flux shape `2 / (pi r_b^2) exp(-2 r^2 / r_b^2)` (per watt absorbed).
#[inline]
pub fn gaussian_unit_flux(r2: f64, beam_radius: f64) -> f64 {
    let rb2 = beam_radius * beam_radius;
    2.0 / (PI * rb2) * (-2.0 * r2 / rb2).exp()
}

/// Absorbed Gaussian laser flux integrated against the face shape functions, W.
pub fn laser_flux_vector(
    face: &FaceQuadrature,
    laser_xy: [f64; 2],
    power: f64,
    beam_radius: f64,
    absorptivity: f64,
) -> [f64; 4] {
    let mut out = [0.0; 4];
    for q in 0..4 {
        let dx = face.point[q][0] - laser_xy[0];
        let dy = face.point[q][1] - laser_xy[1];
        let qs = absorptivity * power * gaussian_unit_flux(dx * dx + dy * dy, beam_radius);
        for a in 0..4 {
            out[a] += face.n[q][a] * qs * face.weight[q];
        }
    }
    out
}

/// Convective loss `h (T - T_amb)` integrated against the face shape functions, W.
pub fn convection_vector(face: &FaceQuadrature, t: &[f64; 4], h: f64, t_amb: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for q in 0..4 {
        let flux = h * face.interpolate(q, &t.map(|v| v - t_amb));
        for a in 0..4 {
            out[a] += face.n[q][a] * flux * face.weight[q];
        }
    }
    out
}

/// Radiative loss `eps sigma (T^4 - T_amb^4)` integrated against the face shape functions, W.
pub fn radiation_vector(
    face: &FaceQuadrature,
    t: &[f64; 4],
    emissivity: f64,
    sigma: f64,
    t_amb: f64,
) -> Result<[f64; 4], FemError> {
    let mut out = [0.0; 4];
    let amb4 = t_amb.powi(4);
    for q in 0..4 {
        let tq = t_amb + face.interpolate(q, &t.map(|v| v - t_amb));
        if !(tq > 0.0) {
            return Err(FemError::NumericDomain(format!(
                "non-positive absolute temperature {tq} on a radiating face"
            )));
        }
        let flux = emissivity * sigma * (tq.powi(4) - amb4);
        for a in 0..4 {
            out[a] += face.n[q][a] * flux * face.weight[q];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::shape::CORNER_SIGNS;

    fn box_coords(a: f64, b: f64, c: f64) -> [[f64; 3]; 8] {
        CORNER_SIGNS.map(|s| {
            [
                0.5 * (s[0] + 1.0) * a,
                0.5 * (s[1] + 1.0) * b,
                0.5 * (s[2] + 1.0) * c,
            ]
        })
    }

    fn square_face(side: f64, origin: [f64; 2], z: f64) -> FaceQuadrature {
        FaceQuadrature::new(&[
            [origin[0], origin[1], z],
            [origin[0] + side, origin[1], z],
            [origin[0] + side, origin[1] + side, z],
            [origin[0], origin[1] + side, z],
        ])
        .unwrap()
    }

    #[test]
    fn lumped_capacitance_examples() {
        let m = element_capacitance_lumped(&box_coords(1.0, 1.0, 1.0), 1.0, 1.0).unwrap();
        for v in m {
            assert!((v - 0.125).abs() < 1e-15);
        }
        let m = element_capacitance_lumped(&box_coords(1e-3, 1e-3, 1e-3), 8000.0, 500.0).unwrap();
        assert!((m.iter().sum::<f64>() - 4e-3).abs() < 1e-17);
        for v in m {
            assert!((v - 5e-4).abs() < 1e-18);
        }
        let m = element_capacitance_lumped(&box_coords(2.0, 1.0, 1.0), 3.0, 1.0).unwrap();
        assert!((m.iter().sum::<f64>() - 6.0).abs() < 1e-14);
        assert!(m.iter().all(|v| (v - m[0]).abs() < 1e-15));
    }

    #[test]
    fn conduction_properties() {
        let x = box_coords(2.0, 1.0, 0.5);
        let k = element_conduction(&x, 3.0).unwrap();
        for a in 0..8 {
            assert!(k[a].iter().sum::<f64>().abs() < 1e-12);
            for c in 0..8 {
                assert!((k[a][c] - k[c][a]).abs() < 1e-14);
            }
        }
        let k2 = element_conduction(&x, 6.0).unwrap();
        for a in 0..8 {
            for c in 0..8 {
                assert_eq!(k2[a][c], 2.0 * k[a][c]);
            }
        }
    }

    /// Independent 3-point Gauss integration of grad(N_a).grad(N_c) over the unit cube,
    /// using shape functions written directly in physical coordinates.
    #[test]
    fn unit_cube_conduction_against_higher_order_rule() {
        let pts = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
        let wts = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let grad = |a: usize, p: [f64; 3]| -> [f64; 3] {
            let s = CORNER_SIGNS[a];
            let f = |d: usize| if s[d] > 0.0 { p[d] } else { 1.0 - p[d] };
            let df = |d: usize| if s[d] > 0.0 { 1.0 } else { -1.0 };
            [
                df(0) * f(1) * f(2),
                f(0) * df(1) * f(2),
                f(0) * f(1) * df(2),
            ]
        };
        let mut oracle = [[0.0; 8]; 8];
        for (i, &u) in pts.iter().enumerate() {
            for (j, &v) in pts.iter().enumerate() {
                for (l, &w) in pts.iter().enumerate() {
                    let p = [0.5 * (u + 1.0), 0.5 * (v + 1.0), 0.5 * (w + 1.0)];
                    let wt = wts[i] * wts[j] * wts[l] / 8.0;
                    for a in 0..8 {
                        for c in 0..8 {
                            let ga = grad(a, p);
                            let gc = grad(c, p);
                            oracle[a][c] += wt * (ga[0] * gc[0] + ga[1] * gc[1] + ga[2] * gc[2]);
                        }
                    }
                }
            }
        }
        let k = element_conduction(&box_coords(1.0, 1.0, 1.0), 1.0).unwrap();
        for a in 0..8 {
            assert!((k[a][a] - k[0][0]).abs() < 1e-15);
            for c in 0..8 {
                assert!((k[a][c] - oracle[a][c]).abs() < 1e-14, "{a},{c}");
            }
        }
        assert!((k[0][0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_element_is_rejected() {
        let mut x = box_coords(1.0, 1.0, 1.0);
        x[6] = x[0];
        assert!(matches!(
            ElementMatrices::new(&x),
            Err(FemError::Geometry(_))
        ));
    }

    #[test]
    fn laser_flux_examples() {
        let face = square_face(1e-3, [0.0, 0.0], 0.0);
        let far = laser_flux_vector(&face, [5e-3, 5e-3], 300.0, 1e-3, 1.0);
        assert!(far.iter().all(|&v| v > 0.0 && v < 1e-20));
        assert_eq!(
            laser_flux_vector(&face, [0.0, 0.0], 0.0, 1e-3, 1.0),
            [0.0; 4]
        );
    }

    #[test]
    fn laser_flux_integrates_to_absorbed_power() {
        let rb = 1e-3;
        let (p, eta) = (200.0, 0.4);
        let mut prev = f64::NAN;
        for tiles_per_radius in [2usize, 4, 8] {
            let side = rb / tiles_per_radius as f64;
            let n = 8 * tiles_per_radius;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let origin = [-4.0 * rb + i as f64 * side, -4.0 * rb + j as f64 * side];
                    let face = square_face(side, origin, 0.0);
                    total += laser_flux_vector(&face, [0.0, 0.0], p, rb, eta)
                        .iter()
                        .sum::<f64>();
                }
            }
            prev = total;
        }
        assert!((prev - eta * p).abs() / (eta * p) < 5e-3, "{prev}");
    }

    #[test]
    fn convection_examples() {
        let face = square_face(2e-3, [0.0, 0.0], 0.0);
        assert_eq!(convection_vector(&face, &[300.0; 4], 20.0, 300.0), [0.0; 4]);
        assert_eq!(convection_vector(&face, &[500.0; 4], 0.0, 300.0), [0.0; 4]);
        let v = convection_vector(&face, &[500.0; 4], 20.0, 300.0);
        let expect = 20.0 * 4e-6 * 200.0;
        assert!((v.iter().sum::<f64>() - expect).abs() < 1e-15 * expect.max(1.0));
    }

    #[test]
    fn radiation_examples() {
        let sigma = 5.670374419e-8;
        let face = square_face(2e-3, [0.0, 0.0], 0.0);
        assert_eq!(
            radiation_vector(&face, &[300.0; 4], 0.7, sigma, 300.0).unwrap(),
            [0.0; 4]
        );
        assert_eq!(
            radiation_vector(&face, &[900.0; 4], 0.0, sigma, 300.0).unwrap(),
            [0.0; 4]
        );
        let v = radiation_vector(&face, &[900.0; 4], 0.7, sigma, 300.0).unwrap();
        let expect = 0.7 * sigma * 4e-6 * (900f64.powi(4) - 300f64.powi(4));
        assert!((v.iter().sum::<f64>() - expect).abs() < 1e-13 * expect);
        assert!(radiation_vector(&face, &[-5.0; 4], 0.7, sigma, 300.0).is_err());
    }
}
