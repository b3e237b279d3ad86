//! Benchmark objectives: shifted synthetic functions, the planar arm task,
//! population initialization, and evaluation metering.
//!
//! F1-F3 are the cheap differentiable surrogates used for training; F4-F9
//! are the shifted test functions. Every function attains 0 at its shifted
//! optimum. Evaluation is always routed through an [`EvalCounter`] so
//! budget claims stay trustworthy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};
use crate::Error;

/// Exact count of scalar objective evaluations charged so far.
///
/// Increments by the number of rows per evaluation call and is never reset
/// implicitly; one counter belongs to one run.
#[derive(Debug, Default, Clone)]
pub struct EvalCounter {
    count: u64,
}

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn charge(&mut self, rows: usize) {
        self.count += rows as u64;
    }
}

/// Per-coordinate box bounds, `lower[i] < upper[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, Error> {
        if lower.len() != upper.len() {
            return Err(Error::Mismatch { what: "bounds length", expected: lower.len(), got: upper.len() });
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l < u) {
                return Err(Error::InvalidConfig(format!("bounds[{i}]: lower {l} must be below upper {u}")));
            }
        }
        Ok(Bounds { lower, upper })
    }

    /// The same `[lo, hi]` interval for every coordinate.
    pub fn uniform(lo: f64, hi: f64, d: usize) -> Self {
        Bounds::new(vec![lo; d], vec![hi; d]).expect("uniform bounds require lo < hi")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn clamp_row(&self, row: &mut [f64]) {
        for ((v, l), u) in row.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn contains_row(&self, row: &[f64]) -> bool {
        row.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, l), u)| *v >= *l && *v <= *u)
    }
}

/// Identity of one synthetic benchmark function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FunctionId {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
    F7,
    F8,
    F9,
}

impl FunctionId {
    pub const TRAINING: [FunctionId; 3] = [FunctionId::F1, FunctionId::F2, FunctionId::F3];
    pub const TEST: [FunctionId; 6] = [
        FunctionId::F4,
        FunctionId::F5,
        FunctionId::F6,
        FunctionId::F7,
        FunctionId::F8,
        FunctionId::F9,
    ];

    /// Decision-variable range `[lo, hi]`.
    pub fn x_range(self) -> (f64, f64) {
        match self {
            FunctionId::F1 | FunctionId::F2 | FunctionId::F3 => (-10.0, 10.0),
            FunctionId::F4 | FunctionId::F5 | FunctionId::F6 => (-100.0, 100.0),
            FunctionId::F7 => (-5.0, 5.0),
            FunctionId::F8 => (-600.0, 600.0),
            FunctionId::F9 => (-32.0, 32.0),
        }
    }

    /// Range the random shift `b` is drawn from.
    pub fn shift_range(self) -> (f64, f64) {
        match self {
            FunctionId::F1 | FunctionId::F2 | FunctionId::F3 => (-10.0, 10.0),
            FunctionId::F4 | FunctionId::F5 | FunctionId::F6 => (-50.0, 50.0),
            FunctionId::F7 => (-2.5, 2.5),
            FunctionId::F8 => (-300.0, 300.0),
            FunctionId::F9 => (-16.0, 16.0),
        }
    }

    pub fn bounds(self, d: usize) -> Bounds {
        let (lo, hi) = self.x_range();
        Bounds::uniform(lo, hi, d)
    }

    /// Whether a tape graph can be recorded for this function.
    ///
    /// F1-F3 are the designated training surrogates; F4 is additionally
    /// differentiable so it can serve as a single-family training set for
    /// the dataset-size study.
    pub fn differentiable(self) -> bool {
        matches!(self, FunctionId::F1 | FunctionId::F2 | FunctionId::F3 | FunctionId::F4)
    }

    pub fn is_training(self) -> bool {
        Self::TRAINING.contains(&self)
    }

    pub fn is_test(self) -> bool {
        Self::TEST.contains(&self)
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F{}", *self as usize + 1)
    }
}

impl FromStr for FunctionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_uppercase().as_str() {
            "F1" => Ok(FunctionId::F1),
            "F2" => Ok(FunctionId::F2),
            "F3" => Ok(FunctionId::F3),
            "F4" => Ok(FunctionId::F4),
            "F5" => Ok(FunctionId::F5),
            "F6" => Ok(FunctionId::F6),
            "F7" => Ok(FunctionId::F7),
            "F8" => Ok(FunctionId::F8),
            "F9" => Ok(FunctionId::F9),
            other => Err(Error::UnknownFunction(other.to_string())),
        }
    }
}

/// Whether arm lengths are fixed (angles only) or free (lengths + angles).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmMode {
    Simple,
    Complex,
}

impl ArmMode {
    pub fn label(self) -> &'static str {
        match self {
            ArmMode::Simple => "SC",
            ArmMode::Complex => "CC",
        }
    }
}

/// The planar arm: `segments` links whose tip should reach a target point.
///
/// The decision vector is the angle vector in the simple case and the
/// concatenation `(lengths, angles)` in the complex case.
#[derive(Debug, Clone)]
pub struct ArmTask {
    pub segments: usize,
    pub length_range: (f64, f64),
    pub fixed_length: f64,
    pub mode: ArmMode,
}

impl ArmTask {
    pub fn new(mode: ArmMode) -> Self {
        ArmTask { segments: 100, length_range: (0.0, 10.0), fixed_length: 10.0, mode }
    }

    /// Decision-vector dimension.
    pub fn dim(&self) -> usize {
        match self.mode {
            ArmMode::Simple => self.segments,
            ArmMode::Complex => 2 * self.segments,
        }
    }

    pub fn bounds(&self) -> Bounds {
        use std::f64::consts::PI;
        match self.mode {
            ArmMode::Simple => Bounds::uniform(-PI, PI, self.segments),
            ArmMode::Complex => {
                let mut lower = vec![self.length_range.0; self.segments];
                let mut upper = vec![self.length_range.1; self.segments];
                lower.extend(vec![-PI; self.segments]);
                upper.extend(vec![PI; self.segments]);
                Bounds { lower, upper }
            }
        }
    }

    /// Splits one decision row into (lengths, angles).
    fn decode<'a>(&self, row: &'a [f64]) -> (Vec<f64>, &'a [f64]) {
        match self.mode {
            ArmMode::Simple => (vec![self.fixed_length; self.segments], row),
            ArmMode::Complex => (row[..self.segments].to_vec(), &row[self.segments..]),
        }
    }
}

/// Tip-to-target distance of the planar arm.
pub fn arm_distance(lengths: &[f64], angles: &[f64], target: [f64; 2]) -> Result<f64, Error> {
    if lengths.len() != angles.len() {
        return Err(Error::Mismatch { what: "arm segment count", expected: lengths.len(), got: angles.len() });
    }
    let mut tip_x = 0.0;
    let mut tip_y = 0.0;
    for (l, a) in lengths.iter().zip(angles) {
        tip_x += a.cos() * l;
        tip_y += a.sin() * l;
    }
    let dx = tip_x - target[0];
    let dy = tip_y - target[1];
    Ok((dx * dx + dy * dy).sqrt())
}

/// Uniformly distributed target points over the disk of radius `r_max`.
pub fn sample_arm_targets<R: Rng>(r_max: f64, count: usize, rng: &mut R) -> Vec<[f64; 2]> {
    // Area-uniform: radius = r_max * sqrt(u), angle uniform.
    (0..count)
        .map(|_| {
            let r = r_max * rng.random_range(0.0..1.0f64).sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            [r * theta.cos(), r * theta.sin()]
        })
        .collect()
}

#[derive(Debug, Clone)]
enum ObjectiveKind {
    Shifted {
        id: FunctionId,
        shift: Vec<f64>,
        /// F1 only: per-coordinate weights.
        weights: Option<Vec<f64>>,
    },
    Arm { task: ArmTask, target: [f64; 2] },
}

/// A concrete objective: a function identity plus its random parameters and
/// box bounds. Immutable after construction and safe to share.
#[derive(Debug, Clone)]
pub struct ObjectiveInstance {
    kind: ObjectiveKind,
    d: usize,
    bounds: Bounds,
    scale: f64,
}

/// Draws a shifted training-function instance (F1-F3).
pub fn sample_training_instance<R: Rng>(id: FunctionId, d: usize, rng: &mut R) -> Result<ObjectiveInstance, Error> {
    if !id.is_training() {
        return Err(Error::UnknownFunction(format!("{id} is not a training function")));
    }
    Ok(ObjectiveInstance::sample_shifted(id, d, rng))
}

/// Draws a shifted test-function instance (F4-F9).
pub fn sample_test_instance<R: Rng>(id: FunctionId, d: usize, rng: &mut R) -> Result<ObjectiveInstance, Error> {
    if !id.is_test() {
        return Err(Error::UnknownFunction(format!("{id} is not a test function")));
    }
    Ok(ObjectiveInstance::sample_shifted(id, d, rng))
}

impl ObjectiveInstance {
    /// Shifted instance of any synthetic function, with `b` (and `w` for F1)
    /// drawn uniformly from the function's table ranges.
    pub fn sample_shifted<R: Rng>(id: FunctionId, d: usize, rng: &mut R) -> Self {
        let (lo, hi) = id.shift_range();
        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
        let weights = if id == FunctionId::F1 {
            Some((0..d).map(|_| rng.random_range(-10.0..10.0)).collect())
        } else {
            None
        };
        ObjectiveInstance {
            kind: ObjectiveKind::Shifted { id, shift, weights },
            d,
            bounds: id.bounds(d),
            scale: 1.0,
        }
    }

    /// Shifted instance with explicit parameters.
    pub fn shifted(id: FunctionId, shift: Vec<f64>, weights: Option<Vec<f64>>) -> Result<Self, Error> {
        let d = shift.len();
        if id == FunctionId::F1 {
            if let Some(w) = &weights {
                if w.len() != d {
                    return Err(Error::Mismatch { what: "F1 weight length", expected: d, got: w.len() });
                }
            }
        }
        Ok(ObjectiveInstance { kind: ObjectiveKind::Shifted { id, shift, weights }, d, bounds: id.bounds(d), scale: 1.0 })
    }

    /// Arm instance for one target point.
    pub fn arm(task: ArmTask, target: [f64; 2]) -> Self {
        let d = task.dim();
        let bounds = task.bounds();
        ObjectiveInstance { kind: ObjectiveKind::Arm { task, target }, d, bounds, scale: 1.0 }
    }

    /// Same objective multiplied by a positive constant.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale *= factor;
        self
    }

    /// Replaces the box bounds with `[lo, hi]` on every coordinate.
    pub fn with_uniform_bounds(mut self, lo: f64, hi: f64) -> Result<Self, Error> {
        self.bounds = Bounds::new(vec![lo; self.d], vec![hi; self.d])?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn shift(&self) -> Option<&[f64]> {
        match &self.kind {
            ObjectiveKind::Shifted { shift, .. } => Some(shift),
            ObjectiveKind::Arm { .. } => None,
        }
    }

    /// True when a tape graph can be recorded for this objective.
    pub fn differentiable(&self) -> bool {
        match &self.kind {
            ObjectiveKind::Shifted { id, .. } => id.differentiable(),
            ObjectiveKind::Arm { .. } => true,
        }
    }

    /// Short identity label for logs and CSV rows.
    pub fn label(&self) -> String {
        match &self.kind {
            ObjectiveKind::Shifted { id, .. } => id.to_string(),
            ObjectiveKind::Arm { task, .. } => format!("ARM-{}", task.mode.label()),
        }
    }

    /// One scalar evaluation. Not metered; callers go through [`Self::evaluate`].
    pub fn eval_row(&self, row: &[f64]) -> Result<f64, Error> {
        if row.len() != self.d {
            return Err(Error::Mismatch { what: "evaluation input dimension", expected: self.d, got: row.len() });
        }
        let raw = match &self.kind {
            ObjectiveKind::Shifted { id, shift, weights } => eval_shifted(*id, shift, weights.as_deref(), row),
            ObjectiveKind::Arm { task, target } => {
                let (lengths, angles) = task.decode(row);
                arm_distance(&lengths, angles, *target)?
            }
        };
        Ok(self.scale * raw)
    }

    /// Fitness of every row of `x`; charges `x.rows()` evaluations.
    pub fn evaluate(&self, x: &Matrix, counter: &mut EvalCounter) -> Result<Vec<f64>, Error> {
        if x.cols() != self.d {
            return Err(Error::Mismatch { what: "population dimension", expected: self.d, got: x.cols() });
        }
        counter.charge(x.rows());
        let mut fitness = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let f = self.eval_row(x.row(i))?;
            if f.is_nan() {
                return Err(Error::NanFitness { row: i });
            }
            fitness.push(f);
        }
        Ok(fitness)
    }

    /// Records fitness evaluation of the population node `x` on the tape,
    /// returning an n x 1 fitness node. Differentiable objectives build a
    /// graph; everything else enters as a constant of the forward values.
    /// Charges `n` evaluations either way.
    pub fn evaluate_on_tape(&self, tape: &mut Tape, x: NodeId, counter: &mut EvalCounter) -> Result<NodeId, Error> {
        let (n, cols) = tape.shape(x);
        if cols != self.d {
            return Err(Error::Mismatch { what: "population dimension", expected: self.d, got: cols });
        }
        if !self.differentiable() {
            let xv = tape.value(x).clone();
            let fitness = self.evaluate(&xv, counter)?;
            return tape.constant(Matrix::from_vec(n, 1, fitness)?);
        }
        counter.charge(n);
        let fit = match &self.kind {
            ObjectiveKind::Shifted { id, shift, weights } => {
                let shift_row = tape.constant(Matrix::row_vector(shift)?)?;
                let shift_mat = tape.broadcast_rows(shift_row, n)?;
                let z = tape.sub(x, shift_mat)?;
                match id {
                    FunctionId::F1 => {
                        let w = weights.as_ref().expect("F1 instance carries weights");
                        let w_row = tape.constant(Matrix::row_vector(w)?)?;
                        let w_mat = tape.broadcast_rows(w_row, n)?;
                        let s = tape.sin(z)?;
                        let ws = tape.hadamard(w_mat, s)?;
                        let a = tape.abs(ws)?;
                        tape.row_sum(a)?
                    }
                    FunctionId::F2 => {
                        let a = tape.abs(z)?;
                        tape.row_sum(a)?
                    }
                    FunctionId::F3 => {
                        let base = tape.abs(z)?;
                        let sum_abs = tape.row_sum(base)?;
                        if self.d < 2 {
                            sum_abs
                        } else {
                            let left = tape.slice_cols(z, 0, self.d - 1)?;
                            let right = tape.slice_cols(z, 1, self.d)?;
                            let pair = tape.add(left, right)?;
                            let pair_abs = tape.abs(pair)?;
                            let sum_pair = tape.row_sum(pair_abs)?;
                            tape.add(sum_pair, sum_abs)?
                        }
                    }
                    FunctionId::F4 => {
                        let sq = tape.hadamard(z, z)?;
                        tape.row_sum(sq)?
                    }
                    other => unreachable!("{other} is not differentiable"),
                }
            }
            ObjectiveKind::Arm { task, target } => {
                let seg = task.segments;
                let (lengths_node, angles) = match task.mode {
                    ArmMode::Simple => {
                        let l_row = tape.constant(Matrix::row_vector(&vec![task.fixed_length; seg])?)?;
                        (tape.broadcast_rows(l_row, n)?, x)
                    }
                    ArmMode::Complex => {
                        let lengths = tape.slice_cols(x, 0, seg)?;
                        let angles = tape.slice_cols(x, seg, 2 * seg)?;
                        (lengths, angles)
                    }
                };
                let cos_a = tape.cos(angles)?;
                let sin_a = tape.sin(angles)?;
                let x_terms = tape.hadamard(cos_a, lengths_node)?;
                let y_terms = tape.hadamard(sin_a, lengths_node)?;
                let tip_x = tape.row_sum(x_terms)?;
                let tip_y = tape.row_sum(y_terms)?;
                let px = tape.constant(Matrix::filled(n, 1, target[0]))?;
                let py = tape.constant(Matrix::filled(n, 1, target[1]))?;
                let dx = tape.sub(tip_x, px)?;
                let dy = tape.sub(tip_y, py)?;
                let dx2 = tape.hadamard(dx, dx)?;
                let dy2 = tape.hadamard(dy, dy)?;
                let dist2 = tape.add(dx2, dy2)?;
                tape.sqrt(dist2)?
            }
        };
        if self.scale != 1.0 {
            tape.scale(fit, self.scale)
        } else {
            Ok(fit)
        }
    }
}

/// Scalar-loop evaluation of the shifted functions; sums run left to right
/// over the coordinate index.
fn eval_shifted(id: FunctionId, shift: &[f64], weights: Option<&[f64]>, row: &[f64]) -> f64 {
    let d = row.len();
    let z = |i: usize| row[i] - shift[i];
    match id {
        FunctionId::F1 => {
            let w = weights.expect("F1 instance carries weights");
            let mut s = 0.0;
            for i in 0..d {
                s += (w[i] * (row[i] - shift[i]).sin()).abs();
            }
            s
        }
        FunctionId::F2 => {
            let mut s = 0.0;
            for i in 0..d {
                s += z(i).abs();
            }
            s
        }
        FunctionId::F3 => {
            let mut pair = 0.0;
            for i in 0..d.saturating_sub(1) {
                pair += (z(i) + z(i + 1)).abs();
            }
            let mut base = 0.0;
            for i in 0..d {
                base += z(i).abs();
            }
            pair + base
        }
        FunctionId::F4 => {
            let mut s = 0.0;
            for i in 0..d {
                s += z(i) * z(i);
            }
            s
        }
        FunctionId::F5 => {
            let mut m = 0.0;
            for i in 0..d {
                m = f64::max(m, z(i).abs());
            }
            m
        }
        FunctionId::F6 => {
            let mut s = 0.0;
            for i in 0..d - 1 {
                let zi = z(i);
                let t1 = zi * zi - z(i + 1);
                let t2 = zi - 1.0;
                s += 100.0 * (t1 * t1) + t2 * t2;
            }
            s
        }
        FunctionId::F7 => {
            let mut s = 0.0;
            for i in 0..d {
                let zi = z(i);
                s += zi * zi - 10.0 * (std::f64::consts::TAU * zi).cos() + 10.0;
            }
            s
        }
        FunctionId::F8 => {
            let mut sum = 0.0;
            let mut prod = 1.0;
            for i in 0..d {
                let zi = z(i);
                sum += zi * zi / 4000.0;
                prod *= (zi / ((i + 1) as f64).sqrt()).cos();
            }
            sum - prod + 1.0
        }
        FunctionId::F9 => {
            let dd = d as f64;
            let mut sq = 0.0;
            let mut cs = 0.0;
            for i in 0..d {
                let zi = z(i);
                sq += zi * zi;
                cs += (std::f64::consts::TAU * zi).cos();
            }
            -20.0 * (-0.2 * (sq / dd).sqrt()).exp() - (cs / dd).exp() + 20.0 + std::f64::consts::E
        }
    }
}

/// Uniform random population over the bounds; entries drawn row-major.
pub fn init_population<R: Rng>(bounds: &Bounds, n: usize, rng: &mut R) -> Matrix {
    let d = bounds.dim();
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        let row = m.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = rng.random_range(bounds.lower[j]..bounds.upper[j]);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{grad_check, ParamSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sphere_is_zero_at_shift() {
        let mut r = rng(1);
        let inst = ObjectiveInstance::sample_shifted(FunctionId::F4, 10, &mut r);
        let b = inst.shift().unwrap().to_vec();
        assert_eq!(inst.eval_row(&b).unwrap(), 0.0);
    }

    #[test]
    fn ackley_is_zero_at_shift() {
        let mut r = rng(2);
        let inst = ObjectiveInstance::sample_shifted(FunctionId::F9, 10, &mut r);
        let b = inst.shift().unwrap().to_vec();
        assert!(inst.eval_row(&b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rosenbrock_is_zero_at_shift_plus_one() {
        let mut r = rng(3);
        let inst = ObjectiveInstance::sample_shifted(FunctionId::F6, 10, &mut r);
        let x: Vec<f64> = inst.shift().unwrap().iter().map(|b| b + 1.0).collect();
        assert_eq!(inst.eval_row(&x).unwrap(), 0.0);
    }

    #[test]
    fn all_functions_attain_zero_at_their_optimum() {
        let mut r = rng(4);
        for id in [FunctionId::F1, FunctionId::F2, FunctionId::F3, FunctionId::F5, FunctionId::F7, FunctionId::F8] {
            let inst = ObjectiveInstance::sample_shifted(id, 7, &mut r);
            let b = inst.shift().unwrap().to_vec();
            let v = inst.eval_row(&b).unwrap();
            assert!(v.abs() < 1e-12, "{id} at optimum gives {v}");
        }
    }

    #[test]
    fn f1_unit_weights_at_quarter_period() {
        let d = 10;
        let inst = ObjectiveInstance::shifted(FunctionId::F1, vec![0.0; d], Some(vec![1.0; d])).unwrap();
        let x = vec![std::f64::consts::FRAC_PI_2; d];
        assert_eq!(inst.eval_row(&x).unwrap(), 10.0);
    }

    #[test]
    fn rastrigin_matches_independent_loop() {
        let mut r = rng(5);
        let d = 10;
        let inst = ObjectiveInstance::sample_shifted(FunctionId::F7, d, &mut r);
        let b = inst.shift().unwrap().to_vec();
        let mut x = b.clone();
        x[0] += 0.5;
        let expected: f64 = (0..d)
            .map(|i| {
                let z = x[i] - b[i];
                z * z - 10.0 * (2.0 * std::f64::consts::PI * z).cos() + 10.0
            })
            .sum();
        assert!((inst.eval_row(&x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn counter_counts_rows_exactly() {
        let mut r = rng(6);
        let inst = ObjectiveInstance::sample_shifted(FunctionId::F4, 5, &mut r);
        let mut counter = EvalCounter::new();
        for _ in 0..7 {
            let x = init_population(inst.bounds(), 13, &mut r);
            inst.evaluate(&x, &mut counter).unwrap();
        }
        assert_eq!(counter.count(), 7 * 13);
    }

    #[test]
    fn training_sampler_rejects_test_functions() {
        let mut r = rng(7);
        assert!(sample_training_instance(FunctionId::F4, 5, &mut r).is_err());
        assert!(sample_test_instance(FunctionId::F2, 5, &mut r).is_err());
    }

    #[test]
    fn shift_ranges_match_tables() {
        let mut r = rng(8);
        for _ in 0..20 {
            let f2 = sample_training_instance(FunctionId::F2, 10, &mut r).unwrap();
            assert!(f2.shift().unwrap().iter().all(|b| (-10.0..10.0).contains(b)));
            let f4 = sample_test_instance(FunctionId::F4, 10, &mut r).unwrap();
            assert!(f4.shift().unwrap().iter().all(|b| (-50.0..50.0).contains(b)));
            let f8 = sample_test_instance(FunctionId::F8, 10, &mut r).unwrap();
            assert!(f8.shift().unwrap().iter().all(|b| (-300.0..300.0).contains(b)));
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let a = ObjectiveInstance::sample_shifted(FunctionId::F1, 12, &mut rng(9));
        let b = ObjectiveInstance::sample_shifted(FunctionId::F1, 12, &mut rng(9));
        assert_eq!(a.shift(), b.shift());
        let (ObjectiveKind::Shifted { weights: wa, .. }, ObjectiveKind::Shifted { weights: wb, .. }) = (&a.kind, &b.kind)
        else {
            unreachable!()
        };
        assert_eq!(wa, wb);
    }

    #[test]
    fn shift_sample_mean_is_near_zero() {
        let mut r = rng(10);
        let mean: f64 = (0..10_000)
            .map(|_| ObjectiveInstance::sample_shifted(FunctionId::F2, 1, &mut r).shift().unwrap()[0])
            .sum::<f64>()
            / 10_000.0;
        assert!(mean.abs() < 0.5, "empirical mean {mean}");
    }

    #[test]
    fn arm_straight_line_cases() {
        let lengths = vec![10.0; 100];
        let angles = vec![0.0; 100];
        assert_eq!(arm_distance(&lengths, &angles, [1000.0, 0.0]).unwrap(), 0.0);
        assert_eq!(arm_distance(&lengths, &angles, [0.0, 0.0]).unwrap(), 1000.0);
    }

    #[test]
    fn arm_matches_scalar_loop() {
        let mut r = rng(11);
        for _ in 0..50 {
            let n = 20;
            let lengths: Vec<f64> = (0..n).map(|_| r.random_range(0.0..10.0)).collect();
            let angles: Vec<f64> = (0..n).map(|_| r.random_range(-3.1..3.1)).collect();
            let target = [r.random_range(-100.0..100.0), r.random_range(-100.0..100.0)];
            let mut tx = 0.0;
            let mut ty = 0.0;
            for i in 0..n {
                tx += angles[i].cos() * lengths[i];
                ty += angles[i].sin() * lengths[i];
            }
            let expect = ((tx - target[0]).powi(2) + (ty - target[1]).powi(2)).sqrt();
            assert_eq!(arm_distance(&lengths, &angles, target).unwrap(), expect);
        }
    }

    #[test]
    fn arm_targets_stay_in_disk() {
        let mut r = rng(12);
        for r_max in [100.0, 300.0, 1000.0] {
            let pts = sample_arm_targets(r_max, 128, &mut r);
            assert_eq!(pts.len(), 128);
            assert!(pts.iter().all(|p| (p[0] * p[0] + p[1] * p[1]).sqrt() <= r_max));
        }
        assert_eq!(sample_arm_targets(1000.0, 600, &mut r).len(), 600);
    }

    #[test]
    fn init_population_respects_bounds_and_seed() {
        let bounds = Bounds::uniform(-100.0, 100.0, 10);
        let a = init_population(&bounds, 100, &mut rng(13));
        assert!(a.as_slice().iter().all(|v| (-100.0..100.0).contains(v)));
        let b = init_population(&bounds, 100, &mut rng(13));
        assert_eq!(a, b);

        // Narrow bounds still work.
        let narrow = Bounds::uniform(1e-9, 2e-9, 3);
        let tiny = init_population(&narrow, 4, &mut rng(14));
        assert!(tiny.as_slice().iter().all(|v| (1e-9..2e-9).contains(v)));
    }

    #[test]
    fn taped_evaluation_equals_scalar_loop() {
        let mut r = rng(15);
        let mut counter = EvalCounter::new();
        for id in [FunctionId::F1, FunctionId::F2, FunctionId::F3, FunctionId::F4] {
            for _ in 0..25 {
                let d = r.random_range(2..8usize);
                let inst = ObjectiveInstance::sample_shifted(id, d, &mut r);
                let x = init_population(inst.bounds(), 6, &mut r);
                let plain = inst.evaluate(&x, &mut counter).unwrap();
                let mut tape = Tape::new();
                let xn = tape.constant(x).unwrap();
                let fit = inst.evaluate_on_tape(&mut tape, xn, &mut counter).unwrap();
                assert_eq!(tape.value(fit).as_slice(), plain.as_slice(), "{id} taped != scalar");
            }
        }
        for mode in [ArmMode::Simple, ArmMode::Complex] {
            let mut task = ArmTask::new(mode);
            task.segments = 12;
            let inst = ObjectiveInstance::arm(task, [30.0, -14.0]);
            let x = init_population(inst.bounds(), 6, &mut r);
            let plain = inst.evaluate(&x, &mut counter).unwrap();
            let mut tape = Tape::new();
            let xn = tape.constant(x).unwrap();
            let fit = inst.evaluate_on_tape(&mut tape, xn, &mut counter).unwrap();
            assert_eq!(tape.value(fit).as_slice(), plain.as_slice(), "{mode:?} taped != scalar");
        }
    }

    #[test]
    fn training_function_gradients_match_finite_differences() {
        let mut r = rng(16);
        for id in [FunctionId::F1, FunctionId::F2, FunctionId::F3, FunctionId::F4] {
            let d = 5;
            let inst = ObjectiveInstance::sample_shifted(id, d, &mut r);
            // Keep |z_i| clear of the abs kinks.
            let mut x = init_population(inst.bounds(), 4, &mut r);
            let shift = inst.shift().unwrap().to_vec();
            for i in 0..x.rows() {
                for j in 0..d {
                    if (x.get(i, j) - shift[j]).abs() < 1e-2 {
                        x.set(i, j, x.get(i, j) + 0.05);
                    }
                }
            }
            let mut params = ParamSet::new();
            let pid = params.add("x", x);
            let inst_ref = &inst;
            let worst = grad_check(
                &params,
                move |tape, p| {
                    let xn = tape.param(p, pid)?;
                    let mut scratch = EvalCounter::new();
                    let fit = inst_ref.evaluate_on_tape(tape, xn, &mut scratch)?;
                    tape.mean(fit)
                },
                1e-6,
            )
            .unwrap();
            assert!(worst <= 1e-4, "{id} gradient error {worst}");
        }
    }

    #[test]
    fn arm_gradients_match_finite_differences() {
        let mut r = rng(17);
        for mode in [ArmMode::Simple, ArmMode::Complex] {
            let mut task = ArmTask::new(mode);
            task.segments = 8;
            let inst = ObjectiveInstance::arm(task, [25.0, 10.0]);
            let x = init_population(inst.bounds(), 3, &mut r);
            let mut params = ParamSet::new();
            let pid = params.add("x", x);
            let inst_ref = &inst;
            let worst = grad_check(
                &params,
                move |tape, p| {
                    let xn = tape.param(p, pid)?;
                    let mut scratch = EvalCounter::new();
                    let fit = inst_ref.evaluate_on_tape(tape, xn, &mut scratch)?;
                    tape.mean(fit)
                },
                1e-6,
            )
            .unwrap();
            assert!(worst <= 1e-4, "{mode:?} gradient error {worst}");
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut r = rng(18);
        let inst = ObjectiveInstance::sample_shifted(FunctionId::F4, 10, &mut r);
        let x = Matrix::zeros(3, 7);
        let mut counter = EvalCounter::new();
        let err = inst.evaluate(&x, &mut counter).unwrap_err();
        assert!(err.to_string().contains("expected 10, got 7"));
    }
}
