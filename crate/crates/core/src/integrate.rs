//! Adaptive Dormand–Prince 5(4) integrator with continuous (dense) output.
//!
//! The stepper is generic over the state dimension so the same code drives
//! the 6-D translational flow, the 42-D state + variational system and the
//! 7-D rigid-body attitude flow.

use nalgebra::SVector;
use thiserror::Error;

/// Failure modes of the stepper itself (right-hand-side errors are passed through).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepFailure {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("maximum number of steps ({steps}) exceeded at t = {t}")]
    MaxSteps { steps: usize, t: f64 },
    #[error("non-finite state encountered at t = {t}")]
    NonFinite { t: f64 },
    #[error("requested event crossing was not found before t = {t}")]
    EventNotFound { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Self { rtol: tol, atol: tol }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepperOptions {
    pub tol: Tolerances,
    pub max_steps: usize,
    /// Upper bound on |h|; `None` means unbounded.
    pub h_max: Option<f64>,
    /// Keep per-step interpolation data for `Solution::eval`.
    pub dense: bool,
}

impl StepperOptions {
    pub fn new(tol: f64) -> Self {
        Self {
            tol: Tolerances::uniform(tol),
            max_steps: 2_000_000,
            h_max: None,
            dense: true,
        }
    }

    pub fn sparse(mut self) -> Self {
        self.dense = false;
        self
    }

    pub fn with_h_max(mut self, h_max: f64) -> Self {
        self.h_max = Some(h_max);
        self
    }
}

// Butcher tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// Error coefficients (5th minus embedded 4th order).
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense output coefficients of the 4th-order continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// Interpolation data for one accepted step `[t, t + h]`.
#[derive(Debug, Clone)]
pub struct DenseSegment<const N: usize> {
    pub t: f64,
    pub h: f64,
    r: [SVector<f64, N>; 5],
}

impl<const N: usize> DenseSegment<N> {
    pub fn eval(&self, t: f64) -> SVector<f64, N> {
        let theta = (t - self.t) / self.h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.r;
        r1 + (r2 + (r3 + (r4 + r5 * theta1) * theta) * theta1) * theta
    }

    pub fn start_state(&self) -> SVector<f64, N> {
        self.r[0]
    }

    fn contains(&self, t: f64) -> bool {
        let (lo, hi) = if self.h >= 0.0 {
            (self.t, self.t + self.h)
        } else {
            (self.t + self.h, self.t)
        };
        t >= lo && t <= hi
    }
}

/// Result of an integration run.
#[derive(Debug, Clone)]
pub struct Solution<const N: usize> {
    pub t0: f64,
    pub tf: f64,
    pub y0: SVector<f64, N>,
    pub yf: SVector<f64, N>,
    pub steps: usize,
    pub rejected: usize,
    segments: Vec<DenseSegment<N>>,
}

impl<const N: usize> Solution<N> {
    /// Evaluate the continuous extension at `t` (must lie inside the span and
    /// the run must have been dense).
    pub fn eval(&self, t: f64) -> Option<SVector<f64, N>> {
        if t == self.t0 {
            return Some(self.y0);
        }
        if t == self.tf {
            return Some(self.yf);
        }
        if !self.span_contains(t) {
            // Absorb rounding at the endpoints (e.g. t = tf * k / k).
            let slack = 8.0 * f64::EPSILON * self.t0.abs().max(self.tf.abs()).max(1.0);
            if (t - self.t0).abs() <= slack {
                return Some(self.y0);
            }
            if (t - self.tf).abs() <= slack {
                return Some(self.yf);
            }
            return None;
        }
        if self.segments.is_empty() {
            return None;
        }
        let forward = self.tf >= self.t0;
        // Segments are stored in integration order, so their start times are monotone.
        let idx = if forward {
            self.segments.partition_point(|s| s.t <= t)
        } else {
            self.segments.partition_point(|s| s.t >= t)
        };
        let seg = &self.segments[idx.saturating_sub(1)];
        if seg.contains(t) {
            Some(seg.eval(t))
        } else {
            None
        }
    }

    fn span_contains(&self, t: f64) -> bool {
        let (lo, hi) = if self.tf >= self.t0 { (self.t0, self.tf) } else { (self.tf, self.t0) };
        (lo..=hi).contains(&t)
    }

    pub fn segments(&self) -> &[DenseSegment<N>] {
        &self.segments
    }
}

fn error_norm<const N: usize>(
    err: &SVector<f64, N>,
    y0: &SVector<f64, N>,
    y1: &SVector<f64, N>,
    tol: &Tolerances,
) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..N {
        let sc = tol.atol + tol.rtol * y0[i].abs().max(y1[i].abs());
        worst = worst.max((err[i] / sc).abs());
    }
    worst
}

fn initial_step<const N: usize, E, F>(
    f: &mut F,
    t0: f64,
    y0: &SVector<f64, N>,
    f0: &SVector<f64, N>,
    dir: f64,
    tol: &Tolerances,
    h_max: f64,
) -> Result<f64, E>
where
    F: FnMut(f64, &SVector<f64, N>) -> Result<SVector<f64, N>, E>,
{
    let scale = y0.map(|v| tol.atol + tol.rtol * v.abs());
    let d0 = (y0.component_div(&scale).norm_squared() / N as f64).sqrt();
    let d1 = (f0.component_div(&scale).norm_squared() / N as f64).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(h_max);
    let y1 = y0 + f0 * (h0 * dir);
    let f1 = f(t0 + h0 * dir, &y1)?;
    let d2 = ((f1 - f0).component_div(&scale).norm_squared() / N as f64).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(h_max))
}

/// Integrate `dy/dt = f(t, y)` from `t0` to `tf`.
pub fn integrate<const N: usize, E, F>(
    mut f: F,
    t0: f64,
    y0: SVector<f64, N>,
    tf: f64,
    opts: &StepperOptions,
) -> Result<Solution<N>, E>
where
    E: From<StepFailure>,
    F: FnMut(f64, &SVector<f64, N>) -> Result<SVector<f64, N>, E>,
{
    run(&mut f, t0, y0, tf, opts, None::<&mut NoEvent>).map(|(sol, _)| sol)
}

/// Scalar event function, evaluated at every accepted step boundary.
pub trait EventFn<const N: usize> {
    fn value(&mut self, t: f64, y: &SVector<f64, N>) -> f64;
}

impl<const N: usize, G: FnMut(f64, &SVector<f64, N>) -> f64> EventFn<N> for G {
    fn value(&mut self, t: f64, y: &SVector<f64, N>) -> f64 {
        self(t, y)
    }
}

struct NoEvent;
impl<const N: usize> EventFn<N> for NoEvent {
    fn value(&mut self, _t: f64, _y: &SVector<f64, N>) -> f64 {
        1.0
    }
}

/// Where an event was bracketed: the accepted step and its signs.
#[derive(Debug, Clone)]
pub struct Bracket<const N: usize> {
    pub segment: DenseSegment<N>,
    pub t_end: f64,
}

/// Integrate until the `count`-th sign change of `event` (ignoring `t0` itself)
/// or until `t_limit`. Returns the solution up to the end of the bracketing step
/// together with the bracket.
pub fn integrate_to_event<const N: usize, E, F, G>(
    mut f: F,
    t0: f64,
    y0: SVector<f64, N>,
    t_limit: f64,
    opts: &StepperOptions,
    mut event: G,
    count: usize,
) -> Result<(Solution<N>, Bracket<N>), E>
where
    E: From<StepFailure>,
    F: FnMut(f64, &SVector<f64, N>) -> Result<SVector<f64, N>, E>,
    G: EventFn<N>,
{
    let mut opts = *opts;
    opts.dense = true;
    let (sol, hit) = run(&mut f, t0, y0, t_limit, &opts, Some(&mut (&mut event, count)))?;
    match hit {
        Some(b) => Ok((sol, b)),
        None => Err(StepFailure::EventNotFound { t: sol.tf }.into()),
    }
}

trait EventTracker<const N: usize> {
    /// Returns true when the step `[ya -> yb]` completes the requested crossing.
    fn check(&mut self, ta: f64, ya: &SVector<f64, N>, tb: f64, yb: &SVector<f64, N>) -> bool;
}

impl<const N: usize> EventTracker<N> for NoEvent {
    fn check(&mut self, _: f64, _: &SVector<f64, N>, _: f64, _: &SVector<f64, N>) -> bool {
        false
    }
}

impl<const N: usize, G: EventFn<N>> EventTracker<N> for (&mut G, usize) {
    fn check(&mut self, ta: f64, ya: &SVector<f64, N>, tb: f64, yb: &SVector<f64, N>) -> bool {
        let ga = self.0.value(ta, ya);
        let gb = self.0.value(tb, yb);
        // A crossing starting exactly on the surface at ta does not count.
        let crossed = (ga < 0.0 && gb >= 0.0) || (ga > 0.0 && gb <= 0.0);
        if crossed {
            self.1 = self.1.saturating_sub(1);
            return self.1 == 0;
        }
        false
    }
}

fn run<const N: usize, E, F, T>(
    f: &mut F,
    t0: f64,
    y0: SVector<f64, N>,
    tf: f64,
    opts: &StepperOptions,
    mut tracker: Option<&mut T>,
) -> Result<(Solution<N>, Option<Bracket<N>>), E>
where
    E: From<StepFailure>,
    F: FnMut(f64, &SVector<f64, N>) -> Result<SVector<f64, N>, E>,
    T: EventTracker<N>,
{
    let mut sol = Solution {
        t0,
        tf: t0,
        y0,
        yf: y0,
        steps: 0,
        rejected: 0,
        segments: Vec::new(),
    };
    if tf == t0 {
        return Ok((sol, None));
    }
    let dir = (tf - t0).signum();
    let span = (tf - t0).abs();
    let h_max = opts.h_max.unwrap_or(span).min(span);
    let tol = &opts.tol;

    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y)?;
    let mut h = initial_step(f, t, &y, &k1, dir, tol, h_max)?;
    let mut last_rejected = false;

    loop {
        if sol.steps + sol.rejected >= opts.max_steps {
            return Err(StepFailure::MaxSteps { steps: opts.max_steps, t }.into());
        }
        let remaining = (tf - t).abs();
        let mut last = false;
        if h >= remaining {
            h = remaining;
            last = true;
        }
        if !last && h <= 1e-14 * t.abs().max(1.0) {
            return Err(StepFailure::StepUnderflow { t }.into());
        }
        let hs = h * dir;

        let k2 = f(t + C2 * hs, &(y + k1 * (A21 * hs)))?;
        let k3 = f(t + C3 * hs, &(y + (k1 * A31 + k2 * A32) * hs))?;
        let k4 = f(t + C4 * hs, &(y + (k1 * A41 + k2 * A42 + k3 * A43) * hs))?;
        let k5 = f(
            t + C5 * hs,
            &(y + (k1 * A51 + k2 * A52 + k3 * A53 + k4 * A54) * hs),
        )?;
        let k6 = f(
            t + hs,
            &(y + (k1 * A61 + k2 * A62 + k3 * A63 + k4 * A64 + k5 * A65) * hs),
        )?;
        let y1 = y + (k1 * A71 + k3 * A73 + k4 * A74 + k5 * A75 + k6 * A76) * hs;
        let t1 = if last { tf } else { t + hs };
        let k7 = f(t1, &y1)?;
        let err = (k1 * E1 + k3 * E3 + k4 * E4 + k5 * E5 + k6 * E6 + k7 * E7) * hs;
        let en = error_norm(&err, &y, &y1, tol);

        if !en.is_finite() || y1.iter().any(|v| !v.is_finite()) {
            // Treat as a hard rejection; shrink aggressively.
            sol.rejected += 1;
            h *= FAC_MIN;
            last_rejected = true;
            if h <= 1e-14 * t.abs().max(1.0) {
                return Err(StepFailure::NonFinite { t }.into());
            }
            continue;
        }

        if en <= 1.0 {
            let segment = if opts.dense || tracker.is_some() {
                let r2 = y1 - y;
                let r3 = k1 * hs - r2;
                let r4 = r2 - k7 * hs - r3;
                let r5 = (k1 * D1 + k3 * D3 + k4 * D4 + k5 * D5 + k6 * D6 + k7 * D7) * hs;
                Some(DenseSegment {
                    t,
                    h: hs,
                    r: [y, r2, r3, r4, r5],
                })
            } else {
                None
            };
            let hit = match (&mut tracker, &segment) {
                (Some(tr), Some(_)) => tr.check(t, &y, t1, &y1),
                _ => false,
            };
            sol.steps += 1;
            if let Some(seg) = segment {
                if hit {
                    sol.tf = t1;
                    sol.yf = y1;
                    let bracket = Bracket {
                        segment: seg.clone(),
                        t_end: t1,
                    };
                    sol.segments.push(seg);
                    return Ok((sol, Some(bracket)));
                }
                if opts.dense {
                    sol.segments.push(seg);
                }
            }
            t = t1;
            y = y1;
            k1 = k7;
            if last {
                sol.tf = t;
                sol.yf = y;
                return Ok((sol, None));
            }
            let mut fac = SAFETY * en.max(1e-10).powf(-0.2);
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = (h * fac).min(h_max);
            last_rejected = false;
        } else {
            sol.rejected += 1;
            let fac = (SAFETY * en.powf(-0.2)).max(FAC_MIN);
            h *= fac;
            last_rejected = true;
        }
    }
}

/// Find the root of `g` within a dense segment by bisection on the interpolant.
pub fn locate_root<const N: usize, G>(
    segment: &DenseSegment<N>,
    t_end: f64,
    mut g: G,
) -> f64
where
    G: FnMut(f64, &SVector<f64, N>) -> f64,
{
    let mut a = segment.t;
    let mut b = t_end;
    let mut ga = g(a, &segment.eval(a));
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m == a || m == b {
            break;
        }
        let gm = g(m, &segment.eval(m));
        if (gm < 0.0) == (ga < 0.0) && gm != 0.0 {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    #[derive(Debug)]
    struct Never;
    impl From<StepFailure> for Never {
        fn from(e: StepFailure) -> Self {
            panic!("{e}")
        }
    }

    fn oscillator(_t: f64, y: &Vector2<f64>) -> Result<Vector2<f64>, Never> {
        Ok(Vector2::new(y[1], -y[0]))
    }

    #[test]
    fn harmonic_oscillator_matches_closed_form() {
        let opts = StepperOptions::new(1e-12);
        let sol = integrate(oscillator, 0.0, Vector2::new(1.0, 0.0), 10.0, &opts).unwrap();
        assert!((sol.yf[0] - 10f64.cos()).abs() < 1e-10);
        assert!((sol.yf[1] + 10f64.sin()).abs() < 1e-10);
    }

    #[test]
    fn dense_output_is_accurate_between_steps() {
        let opts = StepperOptions::new(1e-11);
        let sol = integrate(oscillator, 0.0, Vector2::new(1.0, 0.0), 6.0, &opts).unwrap();
        for i in 0..=600 {
            let t = i as f64 * 0.01;
            let y = sol.eval(t).unwrap();
            assert!((y[0] - t.cos()).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn backward_integration_returns_to_start() {
        let opts = StepperOptions::new(1e-12);
        let fwd = integrate(oscillator, 0.0, Vector2::new(0.3, -0.2), 5.0, &opts).unwrap();
        let back = integrate(oscillator, 5.0, fwd.yf, 0.0, &opts).unwrap();
        assert!((back.yf - Vector2::new(0.3, -0.2)).norm() < 1e-10);
        let mid = back.eval(2.5).unwrap();
        assert!((mid - fwd.eval(2.5).unwrap()).norm() < 1e-8);
    }

    #[test]
    fn zero_span_is_identity() {
        let opts = StepperOptions::new(1e-10);
        let sol = integrate(oscillator, 1.0, Vector2::new(0.5, 0.5), 1.0, &opts).unwrap();
        assert_eq!(sol.yf, Vector2::new(0.5, 0.5));
        assert_eq!(sol.steps, 0);
    }

    #[test]
    fn event_detection_finds_quarter_period() {
        let opts = StepperOptions::new(1e-12);
        let (_, br) = integrate_to_event(
            oscillator,
            0.0,
            Vector2::new(1.0, 0.0),
            20.0,
            &opts,
            |_t: f64, y: &Vector2<f64>| y[0],
            2,
        )
        .unwrap();
        let t = locate_root(&br.segment, br.t_end, |_, y| y[0]);
        assert!((t - 1.5 * std::f64::consts::PI).abs() < 1e-9);
    }
}
