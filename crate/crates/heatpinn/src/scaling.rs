//! Affine maps between physical coordinates/temperature and the network's
//! normalized domain, plus the chain-rule factors that turn scaled
//! derivatives into physical ones.
//!
//! Each spatial axis maps `[0, L] → [−1, 1]`, time maps `[0, t_end] → [−1, 1]`,
//! and temperature maps `T = T0 + u·ΔT_ref` (so the network's strictly
//! positive output `u` enforces `T > T0`). Residuals are formed in physical
//! units, so every derivative from the network picks up one factor of
//! `ΔT_ref·(2/L)` per differentiation order along that axis.

use thiserror::Error;

use crate::autodiff::DerivativeBundle;
use crate::scalar::{Real, Value};

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error("axis {axis} length must be positive and finite, got {got}")]
    BadLength { axis: usize, got: f64 },
    #[error("time horizon must be positive and finite, got {got}")]
    BadHorizon { got: f64 },
    #[error("temperature scale must be positive and finite, got {got}")]
    BadTempScale { got: f64 },
    #[error("{got} spatial axes unsupported (expected 1..=3)")]
    BadSpatialDims { got: usize },
    #[error("input_dim {input_dim} incompatible with {sdim} spatial axes (need sdim+1..=4)")]
    BadInputDim { input_dim: usize, sdim: usize },
}

/// The normalization contract between physical space and the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingSpec<T = crate::F> {
    lengths: [T; 3],
    t_end: T,
    t0: T,
    dt_ref: T,
    sdim: usize,
    input_dim: usize,
}

/// Temperature and its physical-unit derivatives at one point, obtained from
/// a scaled [`DerivativeBundle`] via the chain rule. Entries beyond the
/// varying spatial axes are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalDerivs<V> {
    /// Temperature, K.
    pub temp: V,
    /// ∂T/∂t, K/s.
    pub dtemp_dt: V,
    /// ∂T/∂xᵢ, K/m.
    pub grad: [V; 3],
    /// ∂²T/∂xᵢ², K/m².
    pub hess: [V; 3],
}

impl<T: Real> ScalingSpec<T> {
    /// `lengths` are the extents of the varying spatial axes (1–3 of them);
    /// `input_dim` is the network's input count. Axes between `lengths.len()`
    /// and `input_dim − 1` are pinned to scaled 0 (the thin-wall convention:
    /// a 4-input network evaluated on a 2D domain).
    pub fn new(
        lengths: &[T],
        t_end: T,
        t0: T,
        dt_ref: T,
        input_dim: usize,
    ) -> Result<Self, ScaleError> {
        let sdim = lengths.len();
        if !(1..=3).contains(&sdim) {
            return Err(ScaleError::BadSpatialDims { got: sdim });
        }
        if !(sdim + 1..=4).contains(&input_dim) {
            return Err(ScaleError::BadInputDim { input_dim, sdim });
        }
        for (axis, &l) in lengths.iter().enumerate() {
            if !(l > T::zero()) || !l.is_finite() {
                return Err(ScaleError::BadLength { axis, got: l.to_f64().unwrap_or(f64::NAN) });
            }
        }
        if !(t_end > T::zero()) || !t_end.is_finite() {
            return Err(ScaleError::BadHorizon { got: t_end.to_f64().unwrap_or(f64::NAN) });
        }
        if !(dt_ref > T::zero()) || !dt_ref.is_finite() || !t0.is_finite() {
            return Err(ScaleError::BadTempScale { got: dt_ref.to_f64().unwrap_or(f64::NAN) });
        }
        let mut full = [T::one(); 3];
        full[..sdim].copy_from_slice(lengths);
        Ok(ScalingSpec { lengths: full, t_end, t0, dt_ref, sdim, input_dim })
    }

    pub fn sdim(&self) -> usize {
        self.sdim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn t_end(&self) -> T {
        self.t_end
    }

    pub fn t0(&self) -> T {
        self.t0
    }

    pub fn dt_ref(&self) -> T {
        self.dt_ref
    }

    pub fn length(&self, axis: usize) -> T {
        assert!(axis < self.sdim, "axis {axis} beyond {} spatial dims", self.sdim);
        self.lengths[axis]
    }

    /// `[0, L] → [−1, 1]` (affine; points outside the domain scale linearly).
    pub fn scale_axis(&self, axis: usize, x: T) -> T {
        let two = T::of(2.0);
        two * x / self.length(axis) - T::one()
    }

    pub fn unscale_axis(&self, axis: usize, xh: T) -> T {
        let half = T::of(0.5);
        (xh + T::one()) * half * self.length(axis)
    }

    pub fn scale_time(&self, t: T) -> T {
        let two = T::of(2.0);
        two * t / self.t_end - T::one()
    }

    pub fn unscale_time(&self, th: T) -> T {
        let half = T::of(0.5);
        (th + T::one()) * half * self.t_end
    }

    /// T = T0 + u·ΔT_ref.
    pub fn unscale_temperature(&self, u: T) -> T {
        self.t0 + u * self.dt_ref
    }

    /// u = (T − T0)/ΔT_ref.
    pub fn scale_temperature(&self, temp: T) -> T {
        (temp - self.t0) / self.dt_ref
    }

    /// The network input for a physical point: scaled spatial coordinates
    /// first, pinned axes as 0, scaled time last. Returns the 4-slot buffer
    /// and the used length (`input_dim`).
    pub fn network_input(&self, pos: [T; 3], t: T) -> ([T; 4], usize) {
        let mut out = [T::zero(); 4];
        for axis in 0..self.sdim {
            out[axis] = self.scale_axis(axis, pos[axis]);
        }
        out[self.input_dim - 1] = self.scale_time(t);
        (out, self.input_dim)
    }

    /// Chain rule: physical temperature and derivatives from a scaled bundle.
    ///
    /// ∂T/∂x = ΔT_ref·(2/L)·∂u/∂x̂, ∂²T/∂x² = ΔT_ref·(2/L)²·∂²u/∂x̂², and
    /// ∂T/∂t = ΔT_ref·(2/t_end)·∂u/∂t̂. Components may be tape variables, so
    /// the same code path serves plain evaluation and parameter gradients.
    pub fn physical_derivs<V: Value<R = T>>(&self, b: &DerivativeBundle<V>) -> PhysicalDerivs<V> {
        let two = T::of(2.0);
        let lift = |c: T| b.value.lift(c);
        let zero = lift(T::zero());
        let mut out = PhysicalDerivs {
            temp: lift(self.t0) + b.value * lift(self.dt_ref),
            dtemp_dt: b.grad_inputs[3] * lift(self.dt_ref * two / self.t_end),
            grad: [zero; 3],
            hess: [zero; 3],
        };
        for axis in 0..self.sdim {
            let c1 = self.dt_ref * two / self.lengths[axis];
            let c2 = c1 * two / self.lengths[axis];
            out.grad[axis] = b.grad_inputs[axis] * lift(c1);
            out.hess[axis] = b.hess_diag[axis] * lift(c2);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::eval_with_input_derivs;
    use crate::network::{NetworkParams, NetworkSpec};
    use proptest::prelude::*;

    fn plate() -> ScalingSpec<f64> {
        // 40 × 10 × 6 mm box, 3 s horizon, ambient 298 K, span 2702 K.
        ScalingSpec::new(&[0.040, 0.010, 0.006], 3.0, 298.0, 2702.0, 4).unwrap()
    }

    #[test]
    fn axis_endpoints_and_midpoint() {
        let s = plate();
        assert_eq!(s.scale_axis(0, 0.0), -1.0);
        assert_eq!(s.scale_axis(0, 0.040), 1.0);
        assert_eq!(s.scale_axis(0, 0.020), 0.0);
        assert_eq!(s.scale_time(0.0), -1.0);
        assert_eq!(s.scale_time(3.0), 1.0);
    }

    #[test]
    fn ambient_maps_to_zero_output() {
        let s = plate();
        assert_eq!(s.unscale_temperature(0.0), 298.0);
        assert_eq!(s.scale_temperature(298.0), 0.0);
        // u = 1 is the top of the modeled range.
        assert_eq!(s.unscale_temperature(1.0), 3000.0);
    }

    #[test]
    fn chain_rule_frozen_value() {
        // u with slope exactly 1 in x̂ on a 40 mm axis, ΔT_ref = 2702 K:
        // ∂T/∂x = 2702 · (2/0.040) = 135 100 K/m.
        let s = plate();
        let b = DerivativeBundle {
            value: 0.0,
            grad_inputs: [1.0, 0.0, 0.0, 0.0],
            hess_diag: [0.0; 3],
        };
        let d = s.physical_derivs(&b);
        assert_eq!(d.grad[0], 135_100.0);
        assert_eq!(d.hess, [0.0; 3]);
        assert_eq!(d.dtemp_dt, 0.0);
    }

    #[test]
    fn doubling_length_halves_grad_and_quarters_hess() {
        let b = DerivativeBundle {
            value: 0.25f64,
            grad_inputs: [0.5, 0.0, 0.0, 0.125],
            hess_diag: [2.0, 0.0, 0.0],
        };
        let s1 = ScalingSpec::new(&[0.040], 3.0, 298.0, 2702.0, 2).unwrap();
        let s2 = ScalingSpec::new(&[0.080], 3.0, 298.0, 2702.0, 2).unwrap();
        let d1 = s1.physical_derivs(&b);
        let d2 = s2.physical_derivs(&b);
        assert!((d2.grad[0] - d1.grad[0] / 2.0).abs() < 1e-12 * d1.grad[0].abs());
        assert!((d2.hess[0] - d1.hess[0] / 4.0).abs() < 1e-12 * d1.hess[0].abs());
        // Time factor is untouched by axis lengths.
        assert_eq!(d1.dtemp_dt, d2.dtemp_dt);
    }

    #[test]
    fn constant_field_has_zero_physical_derivatives() {
        let s = plate();
        let b = DerivativeBundle { value: 0.5, grad_inputs: [0.0; 4], hess_diag: [0.0; 3] };
        let d = s.physical_derivs(&b);
        assert_eq!(d.temp, 298.0 + 0.5 * 2702.0);
        assert_eq!(d.dtemp_dt, 0.0);
        assert_eq!(d.grad, [0.0; 3]);
        assert_eq!(d.hess, [0.0; 3]);
    }

    #[test]
    fn pinned_axis_stays_zero_in_network_input() {
        // Thin-wall convention: 2 varying axes, 4-input network, ẑ ≡ 0.
        let s = ScalingSpec::new(&[0.030, 0.020], 7.0, 298.0, 2702.0, 4).unwrap();
        let (input, len) = s.network_input([0.030, 0.005, 0.0], 3.5);
        assert_eq!(len, 4);
        assert_eq!(input[0], 1.0);
        assert_eq!(input[1], -0.5);
        assert_eq!(input[2], 0.0);
        assert_eq!(input[3], 0.0);
    }

    #[test]
    fn rod_input_is_two_dimensional() {
        let s = ScalingSpec::new(&[0.100], 2.0, 298.0, 1000.0, 2).unwrap();
        let (input, len) = s.network_input([0.075, 0.0, 0.0], 0.5);
        assert_eq!(len, 2);
        // 0.075 and 0.1 are not binary-exact; allow one rounding.
        assert!((input[0] - 0.5f64).abs() < 1e-15);
        assert_eq!(input[1], -0.5);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ScalingSpec::new(&[0.0], 1.0, 298.0, 1.0, 2).is_err());
        assert!(ScalingSpec::new(&[1.0], 0.0, 298.0, 1.0, 2).is_err());
        assert!(ScalingSpec::new(&[1.0], 1.0, 298.0, -1.0, 2).is_err());
        assert!(ScalingSpec::new(&[], 1.0, 298.0, 1.0, 2).is_err());
        assert!(ScalingSpec::new(&[1.0, 1.0, 1.0, 1.0], 1.0, 298.0, 1.0, 4).is_err());
        // input_dim must cover sdim + time.
        assert!(ScalingSpec::new(&[1.0, 1.0], 1.0, 298.0, 1.0, 2).is_err());
        assert!(ScalingSpec::new(&[1.0], 1.0, 298.0, 1.0, 5).is_err());
    }

    #[test]
    fn chain_factors_match_physical_space_finite_differences() {
        // Compose the full physical-space map T(x) = unscale(net(scale(x)))
        // and compare physical_derivs against finite differences in meters —
        // an end-to-end check that every 2/L factor lands where it should.
        let s = plate();
        let p = NetworkParams::<f64>::init(&NetworkSpec::new(4, vec![10, 10], 23).unwrap()).unwrap();
        let temp_at = |pos: [f64; 3], t: f64| {
            let (input, len) = s.network_input(pos, t);
            s.unscale_temperature(p.forward(&input[..len]).unwrap())
        };
        let pos = [0.013, 0.0042, 0.0051];
        let t = 1.7;
        let (input, len) = s.network_input(pos, t);
        let d = s.physical_derivs(&eval_with_input_derivs(&p, &input[..len]).unwrap());

        assert!((d.temp - temp_at(pos, t)).abs() < 1e-9);
        for axis in 0..3 {
            let h = s.length(axis) * 1e-5;
            let mut pp = pos;
            let mut pm = pos;
            pp[axis] += h;
            pm[axis] -= h;
            let fd1 = (temp_at(pp, t) - temp_at(pm, t)) / (2.0 * h);
            let fd2 = (temp_at(pp, t) - 2.0 * temp_at(pos, t) + temp_at(pm, t)) / (h * h);
            assert!(
                (d.grad[axis] - fd1).abs() <= 1e-6 * fd1.abs().max(1.0),
                "grad[{axis}]: {} vs {fd1}",
                d.grad[axis]
            );
            assert!(
                (d.hess[axis] - fd2).abs() <= 1e-4 * fd2.abs().max(1e3),
                "hess[{axis}]: {} vs {fd2}",
                d.hess[axis]
            );
        }
        let ht = 1e-5 * s.t_end();
        let fdt = (temp_at(pos, t + ht) - temp_at(pos, t - ht)) / (2.0 * ht);
        assert!((d.dtemp_dt - fdt).abs() <= 1e-6 * fdt.abs().max(1.0));
    }

    proptest! {
        #[test]
        fn scale_unscale_round_trips_within_one_ulp(
            l in 1e-4f64..10.0,
            frac in 0.0f64..1.0,
            dt_ref in 1.0f64..5000.0,
            u in 0.0f64..2.0,
        ) {
            let s = ScalingSpec::new(&[l], 10.0, 298.0, dt_ref, 2).unwrap();
            let x = frac * l;
            let back = s.unscale_axis(0, s.scale_axis(0, x));
            prop_assert!((back - x).abs() <= 2.0 * f64::EPSILON * l);
            // Adding the 298 K ambient rounds at magnitude t0 + u·dt_ref, so
            // the recovered u carries error ~ε·(t0/dt_ref + u).
            let tb = s.scale_temperature(s.unscale_temperature(u));
            prop_assert!((tb - u).abs() <= 2.0 * f64::EPSILON * (298.0 / dt_ref + 1.0 + u));
        }
    }
}
