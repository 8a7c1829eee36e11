//! Central finite-difference gradient checks.

/// Outcome for one named parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    /// `max |analytic - numeric|` divided by the largest magnitude of either
    /// gradient over the block.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub h: f64,
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&BlockReport> {
        self.blocks.iter().filter(|b| !b.passed).collect()
    }
}

/// Compares `analytic[b][i]` with `(f(p + h e_i) - f(p - h e_i)) / 2h` for
/// every coordinate of every block of `params`. `stride` > 1 checks every
/// `stride`-th coordinate only.
pub fn finite_difference_check(
    mut f: impl FnMut(&[(String, Vec<f64>)]) -> f64,
    params: &[(String, Vec<f64>)],
    analytic: &[Vec<f64>],
    h: f64,
    tol: f64,
    stride: usize,
) -> FdReport {
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per block");
    let mut p: Vec<(String, Vec<f64>)> = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    for b in 0..p.len() {
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        let mut checked = 0;
        for i in (0..p[b].1.len()).step_by(stride.max(1)) {
            let orig = p[b].1[i];
            p[b].1[i] = orig + h;
            let up = f(&p);
            p[b].1[i] = orig - h;
            let down = f(&p);
            p[b].1[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[b][i];
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
        let rel = if scale > 0.0 { max_abs / scale } else { 0.0 };
        blocks.push(BlockReport {
            name: p[b].0.clone(),
            checked,
            max_abs_err: max_abs,
            max_rel_err: rel,
            passed: rel <= tol && rel.is_finite(),
        });
    }
    FdReport { h, tol, blocks }
}
