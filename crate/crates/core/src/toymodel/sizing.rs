//! Factor sizes for a target parameter budget.

use crate::config::Role;
use crate::error::{Error, Result};
use crate::structured::{GsShape, KronShape};

/// Largest absolute gap between the requested and the realized GS
/// parameter fraction.
pub const GS_RATIO_SLACK: f64 = 0.02;

/// `r` Kronecker terms keeping about `r / q` of a `rows x cols` matrix.
/// The split by `q` is placed on the rotated side: columns when the
/// rotation multiplies from the right (`A_i` is `1 x q`, `B_i` is
/// `rows x cols/q`), rows otherwise (`A_i` is `q x 1`, `B_i` is
/// `rows/q x cols`).
pub fn choose_kron_shape(rows: usize, cols: usize, r: usize, q: usize, rotated_on_right: bool) -> Result<KronShape> {
    if q == 0 || r == 0 {
        return Err(Error::InvalidConfig("Kronecker r and q must be positive".into()));
    }
    if rotated_on_right {
        if cols % q != 0 {
            return Err(Error::NotDivisible { value: cols, divisor: q });
        }
        Ok(KronShape { rank: r, m1: 1, n1: q, m2: rows, n2: cols / q })
    } else {
        if rows % q != 0 {
            return Err(Error::NotDivisible { value: rows, divisor: q });
        }
        Ok(KronShape { rank: r, m1: q, n1: 1, m2: rows / q, n2: cols })
    }
}

/// `(q r + n m r / q) / (n m)`, the kept fraction of a `choose_kron_shape`
/// result.
pub fn kron_param_fraction(rows: usize, cols: usize, r: usize, q: usize) -> f64 {
    (q * r) as f64 / (rows * cols) as f64 + r as f64 / q as f64
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// GS blocks for a `rows x cols` matrix keeping about `c` of its entries.
/// With `bl1 = rows/kl` and `br2 = cols/kr` fixed, the kept fraction is
/// `N (bl1 + br2) / (rows cols)` for the inner size `N = kl bl2 = kr br1`,
/// so `N` is the multiple of `lcm(kl, kr)` closest to the target.
pub fn choose_gs_shape(rows: usize, cols: usize, kl: usize, kr: usize, c: f64) -> Result<GsShape> {
    if kl == 0 || kr == 0 {
        return Err(Error::InvalidConfig("GS kl and kr must be positive".into()));
    }
    if rows % kl != 0 {
        return Err(Error::NotDivisible { value: rows, divisor: kl });
    }
    if cols % kr != 0 {
        return Err(Error::NotDivisible { value: cols, divisor: kr });
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::NoFeasibleShape(format!("target fraction {}", c)));
    }
    let (bl1, br2) = (rows / kl, cols / kr);
    let step = kl / gcd(kl, kr) * kr;
    let ideal = c * (rows * cols) as f64 / (bl1 + br2) as f64;
    let inner = ((ideal / step as f64).round() as usize).max(1) * step;
    let shape = GsShape::new(kl, kr, bl1, inner / kl, inner / kr, br2);
    let got = shape.param_fraction();
    if (got - c).abs() > GS_RATIO_SLACK {
        return Err(Error::NoFeasibleShape(format!(
            "closest GS shape for {}x{} with kl={}, kr={} keeps {:.4}, target {:.4}",
            rows, cols, kl, kr, got, c
        )));
    }
    Ok(shape)
}

/// Block counts used for GS layers: `(1, 4)` for embedding and head,
/// `(4, 2)` for square and `(4, 8)` for rectangular matrices.
pub fn default_gs_blocks(role: Role, rows: usize, cols: usize) -> (usize, usize) {
    match role {
        Role::Embedding | Role::Head => (1, 4),
        _ if rows == cols => (4, 2),
        _ => (4, 8),
    }
}
