//! Checkerboard sampling pattern used for hypothesis propagation.
//!
//! Six samples are drawn in each of the four directions. All offsets have odd
//! `|dx| + |dy|`, so a pixel only reads pixels of the opposite checkerboard
//! color, and none lies in the 3x3 ring around the center. For the upward
//! direction the offsets are
//!
//! ```text
//!                (0,-5)
//!   (-3,-4)                (3,-4)
//!                (0,-3)
//!         (-1,-2)     (1,-2)
//!                  X
//! ```
//!
//! two along the axis and two pairs on the diagonals, fanning out as a V.
//! The other directions are 90 degree rotations of this set.

/// Offsets `(dx, dy)` of the 24-sample pattern, grouped by direction
/// (up, right, down, left).
pub const CHECKERBOARD_OFFSETS: [(i32, i32); 24] = [
    // up
    (0, -3),
    (0, -5),
    (-1, -2),
    (1, -2),
    (-3, -4),
    (3, -4),
    // right
    (3, 0),
    (5, 0),
    (2, -1),
    (2, 1),
    (4, -3),
    (4, 3),
    // down
    (0, 3),
    (0, 5),
    (1, 2),
    (-1, 2),
    (3, 4),
    (-3, 4),
    // left
    (-3, 0),
    (-5, 0),
    (-2, 1),
    (-2, -1),
    (-4, 3),
    (-4, -3),
];

/// Samples per direction.
pub const SAMPLES_PER_DIRECTION: usize = 6;

/// Checkerboard color of a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Black,
}

impl Color {
    #[inline]
    pub fn of(x: usize, y: usize) -> Self {
        if (x + y) % 2 == 0 {
            Color::Red
        } else {
            Color::Black
        }
    }
}

/// In-bounds sample locations for `(x, y)`, in pattern order.
pub fn checkerboard_samples(x: usize, y: usize, width: usize, height: usize) -> Vec<(usize, usize)> {
    CHECKERBOARD_OFFSETS
        .iter()
        .filter_map(|&(dx, dy)| {
            let sx = x as i64 + dx as i64;
            let sy = y as i64 + dy as i64;
            (sx >= 0 && sy >= 0 && sx < width as i64 && sy < height as i64).then_some((sx as usize, sy as usize))
        })
        .collect()
}
