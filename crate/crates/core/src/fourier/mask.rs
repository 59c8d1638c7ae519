use crate::{Error, Result};

/// Boolean low-frequency square on a centred spectrum grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BetaMask {
    height: usize,
    width: usize,
    side: usize,
    grid: Vec<bool>,
}

/// Side of the swapped square: `floor(beta * min(h, w))`.
///
/// A tolerance of 1e-9 absorbs representation error so that e.g.
/// `0.29 * 100` yields 29.
pub fn mask_side(h: usize, w: usize, beta: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(
            "make_mask",
            format!("beta must lie in [0, 1), got {beta}"),
        ));
    }
    Ok((beta * h.min(w) as f64 + 1e-9).floor() as usize)
}

/// Square of side `floor(beta * min(h, w))` whose centre bin is the zero
/// frequency `(h / 2, w / 2)`. Even sides extend one bin further toward
/// lower indices.
pub fn make_mask(h: usize, w: usize, beta: f64) -> Result<BetaMask> {
    let side = mask_side(h, w, beta)?;
    let mut grid = vec![false; h * w];
    if side > 0 {
        let y0 = h / 2 - side / 2;
        let x0 = w / 2 - side / 2;
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                grid[y * w + x] = true;
            }
        }
    }
    Ok(BetaMask {
        height: h,
        width: w,
        side,
        grid,
    })
}

impl BetaMask {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_beta_is_empty() {
        let m = make_mask(16, 16, 0.0).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn one_percent_of_hundred_is_center_bin() {
        let m = make_mask(100, 100, 0.01).unwrap();
        assert_eq!(m.side(), 1);
        assert_eq!(m.count(), 1);
        assert!(m.contains(50, 50));
    }

    #[test]
    fn odd_side_centered() {
        let m = make_mask(10, 10, 0.55).unwrap();
        assert_eq!(m.side(), 5);
        assert_eq!(m.count(), 25);
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(m.contains(y, x), (3..=7).contains(&y) && (3..=7).contains(&x));
            }
        }
    }

    #[test]
    fn even_side_biased_low() {
        let m = make_mask(8, 8, 0.25).unwrap();
        assert_eq!(m.side(), 2);
        assert!(m.contains(3, 3) && m.contains(4, 4) && !m.contains(5, 5));
    }

    #[test]
    fn out_of_range_beta_rejected() {
        for b in [-0.1, 1.0, 1.5, f64::NAN] {
            assert!(make_mask(8, 8, b).is_err(), "{b}");
        }
    }

    proptest! {
        #[test]
        fn monotone_growth(h in 1usize..40, w in 1usize..40, a in 0.0f64..0.999, b in 0.0f64..0.999) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m1 = make_mask(h, w, lo).unwrap();
            let m2 = make_mask(h, w, hi).unwrap();
            prop_assert_eq!(m1.count(), m1.side() * m1.side());
            for (x, y) in m1.grid().iter().zip(m2.grid()) {
                prop_assert!(!*x || *y);
            }
        }
    }
}
