//! Trilinear hexahedron and bilinear quadrilateral shape functions, plus the
//! 2-point Gauss rules used throughout.

/// Local corner signs in the mesh corner ordering.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Face-local corner signs for the four nodes of a face, in face node order.
pub const QUAD_SIGNS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

const G: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// Trilinear shape values and local derivatives `dN[a][d] = dN_a / dxi_d`.
pub fn shape_eval(xi: [f64; 3]) -> ([f64; 8], [[f64; 3]; 8]) {
    let mut n = [0.0; 8];
    let mut dn = [[0.0; 3]; 8];
    for (a, s) in CORNER_SIGNS.iter().enumerate() {
        let fx = 1.0 + s[0] * xi[0];
        let fy = 1.0 + s[1] * xi[1];
        let fz = 1.0 + s[2] * xi[2];
        n[a] = 0.125 * fx * fy * fz;
        dn[a] = [
            0.125 * s[0] * fy * fz,
            0.125 * fx * s[1] * fz,
            0.125 * fx * fy * s[2],
        ];
    }
    (n, dn)
}

pub fn quad_shape(st: [f64; 2]) -> ([f64; 4], [[f64; 2]; 4]) {
    let mut n = [0.0; 4];
    let mut dn = [[0.0; 2]; 4];
    for (a, s) in QUAD_SIGNS.iter().enumerate() {
        let fs = 1.0 + s[0] * st[0];
        let ft = 1.0 + s[1] * st[1];
        n[a] = 0.25 * fs * ft;
        dn[a] = [0.25 * s[0] * ft, 0.25 * fs * s[1]];
    }
    (n, dn)
}

/// 2x2x2 Gauss points with unit weights.
pub fn gauss_points_3d() -> impl Iterator<Item = ([f64; 3], f64)> {
    (0..8).map(|q| {
        let s = CORNER_SIGNS[q];
        ([s[0] * G, s[1] * G, s[2] * G], 1.0)
    })
}

/// 2x2 Gauss points with unit weights.
pub fn gauss_points_2d() -> impl Iterator<Item = ([f64; 2], f64)> {
    (0..4).map(|q| {
        let s = QUAD_SIGNS[q];
        ([s[0] * G, s[1] * G], 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn center_values() {
        let (n, dn) = shape_eval([0.0; 3]);
        assert!(n.iter().all(|&v| v == 0.125));
        for d in 0..3 {
            assert_eq!(dn.iter().map(|r| r[d]).sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn interpolation_property() {
        for (a, s) in CORNER_SIGNS.iter().enumerate() {
            let (n, _) = shape_eval(*s);
            for (b, v) in n.iter().enumerate() {
                assert_eq!(*v, if a == b { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let xi = [0.3, -0.7, 0.45];
        let (_, dn) = shape_eval(xi);
        let h = 1e-6;
        for d in 0..3 {
            let mut p = xi;
            let mut m = xi;
            p[d] += h;
            m[d] -= h;
            let (np, _) = shape_eval(p);
            let (nm, _) = shape_eval(m);
            for a in 0..8 {
                assert!(((np[a] - nm[a]) / (2.0 * h) - dn[a][d]).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let (n, dn) = shape_eval([x, y, z]);
            prop_assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for d in 0..3 {
                prop_assert!(dn.iter().map(|r| r[d]).sum::<f64>().abs() < 1e-15);
            }
            let (q, _) = quad_shape([x, y]);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
