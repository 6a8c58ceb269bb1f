//! Flow-condition computation: dimensional and nondimensional solver inputs
//! derived from a freestream Mach number, dynamic pressure, and density.
//!
//! All quantities use US customary units (ft, s, slug, degrees Rankine).

use crate::error::{Error, Result};

/// Constants of the flow-condition computation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlutterConstants {
    /// Characteristic length (ft).
    pub length: f64,
    /// Nondimensional characteristic length.
    pub length_nondim: f64,
    /// Frequency of interest (Hz).
    pub f_char: f64,
    /// Timesteps per period of the frequency of interest.
    pub steps_per_period: f64,
    /// Specific heat ratio.
    pub gamma: f64,
    /// Specific gas constant (ft·lbf/slug·°R).
    pub gas_constant: f64,
    /// Sutherland's constant (°R).
    pub sutherland_c: f64,
    /// Reference temperature (°R).
    pub t_ref: f64,
    /// Reference viscosity (slug/ft·s).
    pub mu_ref: f64,
}

impl Default for FlutterConstants {
    fn default() -> Self {
        Self {
            length: 1.833,
            length_nondim: 1.833,
            f_char: 20.39,
            steps_per_period: 200.0,
            gamma: 1.4,
            gas_constant: 1716.49,
            sutherland_c: 198.6,
            t_ref: 518.69,
            mu_ref: 3.737e-7,
        }
    }
}

impl FlutterConstants {
    fn validate(&self) -> Result<()> {
        let fields = [
            ("length", self.length),
            ("length_nondim", self.length_nondim),
            ("f_char", self.f_char),
            ("steps_per_period", self.steps_per_period),
            ("gamma", self.gamma),
            ("gas_constant", self.gas_constant),
            ("sutherland_c", self.sutherland_c),
            ("t_ref", self.t_ref),
            ("mu_ref", self.mu_ref),
        ];
        for (name, v) in fields {
            if !(v > 0.0) {
                return Err(Error::Domain(format!("constant {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Inputs and derived outputs for one flow condition.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCondition {
    pub mach: f64,
    /// Dynamic pressure (lb/ft^2).
    pub q_inf: f64,
    /// Density (slug/ft^3).
    pub rho: f64,
    /// Freestream velocity (ft/s).
    pub u_inf: f64,
    /// Speed of sound (ft/s).
    pub sound_speed: f64,
    /// Temperature (°R).
    pub temperature: f64,
    /// Viscosity (slug/ft·s).
    pub viscosity: f64,
    /// Reynolds number.
    pub reynolds: f64,
    /// Reynolds number per nondimensional unit length.
    pub reynolds_per_length: f64,
    /// Dimensional timestep size (s).
    pub dt_dim: f64,
    /// Nondimensional timestep size.
    pub dt_nondim: f64,
}

/// Sutherland's law: `mu = mu_ref * (T_ref + C)/(T + C) * (T/T_ref)^{3/2}`.
pub fn sutherland_viscosity(temperature: f64, consts: &FlutterConstants) -> Result<f64> {
    consts.validate()?;
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(consts.mu_ref * (consts.t_ref + consts.sutherland_c) / (temperature + consts.sutherland_c)
        * (temperature / consts.t_ref).powf(1.5))
}

/// Derive every flow-condition quantity from Mach number, dynamic pressure,
/// and density.
pub fn compute_flow_condition(
    mach: f64,
    q_inf: f64,
    rho: f64,
    consts: &FlutterConstants,
) -> Result<FlowCondition> {
    consts.validate()?;
    for (name, v) in [("mach", mach), ("q_inf", q_inf), ("rho", rho)] {
        if !(v > 0.0) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    let u_inf = (2.0 * q_inf / rho).sqrt();
    let sound_speed = u_inf / mach;
    let temperature = sound_speed * sound_speed / (consts.gamma * consts.gas_constant);
    let viscosity = sutherland_viscosity(temperature, consts)?;
    let reynolds = rho * u_inf * consts.length / viscosity;
    let reynolds_per_length = reynolds / consts.length_nondim;
    let dt_dim = (1.0 / consts.f_char) / consts.steps_per_period;
    let dt_nondim = sound_speed * (consts.length_nondim / consts.length) * dt_dim;
    Ok(FlowCondition {
        mach,
        q_inf,
        rho,
        u_inf,
        sound_speed,
        temperature,
        viscosity,
        reynolds,
        reynolds_per_length,
        dt_dim,
        dt_nondim,
    })
}

/// Published reference values for one flow condition (used as fixtures).
#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub mach: f64,
    pub q_inf: f64,
    pub u_inf: f64,
    pub temperature: f64,
    pub reynolds: f64,
    pub dt_nondim: f64,
}

impl ReferenceRow {
    /// Density consistent with the tabulated velocity: `rho = 2 q / u^2`.
    /// The experimental densities behind the table are not published, so
    /// this derived value stands in for them.
    pub fn density(&self) -> f64 {
        2.0 * self.q_inf / (self.u_inf * self.u_inf)
    }
}

/// The nine tabulated flow conditions used as fixtures.
pub const REFERENCE_CONDITIONS: [ReferenceRow; 9] = [
    ReferenceRow { mach: 0.901, q_inf: 50.0, u_inf: 728.37, temperature: 271.95, reynolds: 1.164e6, dt_nondim: 0.19826 },
    ReferenceRow { mach: 0.901, q_inf: 70.0, u_inf: 861.82, temperature: 380.72, reynolds: 1.023e6, dt_nondim: 0.23458 },
    // u_inf corrected from a typo in the source (877.21); the row's own
    // temperature, Reynolds number, and timestep all imply 977.21.
    ReferenceRow { mach: 0.901, q_inf: 90.0, u_inf: 977.21, temperature: 489.50, reynolds: 9.453e5, dt_nondim: 0.26599 },
    ReferenceRow { mach: 0.957, q_inf: 50.0, u_inf: 916.65, temperature: 381.78, reynolds: 6.856e5, dt_nondim: 0.23491 },
    ReferenceRow { mach: 0.957, q_inf: 70.0, u_inf: 1084.60, temperature: 534.49, reynolds: 6.186e5, dt_nondim: 0.27794 },
    ReferenceRow { mach: 0.957, q_inf: 90.0, u_inf: 1229.82, temperature: 687.21, reynolds: 5.813e5, dt_nondim: 0.31516 },
    ReferenceRow { mach: 1.141, q_inf: 50.0, u_inf: 823.66, temperature: 216.85, reynolds: 1.276e6, dt_nondim: 0.17704 },
    ReferenceRow { mach: 1.141, q_inf: 70.0, u_inf: 974.57, temperature: 303.59, reynolds: 1.102e6, dt_nondim: 0.20947 },
    ReferenceRow { mach: 1.141, q_inf: 90.0, u_inf: 1105.06, temperature: 390.33, reynolds: 1.005e6, dt_nondim: 0.23752 },
];

/// Mapping from quantity symbols to the flow solver's input parameter names.
pub const SOLVER_PARAMETER_NAMES: [(&str, &str); 6] = [
    ("u_inf", "uinf"),
    ("q_inf", "qinf"),
    ("T", "temperature"),
    ("Re_L", "reynolds_number"),
    ("M_inf", "mach_number"),
    ("dt_nondim", "time_step_nondim"),
];

/// Agreement at `digits` significant figures: relative error below half a
/// unit in the last significant place.
pub fn matches_sig_figs(value: f64, reference: f64, digits: u32) -> bool {
    if reference == 0.0 {
        return value == 0.0;
    }
    let rel = ((value - reference) / reference).abs();
    rel <= 0.5 * 10f64.powi(1 - digits as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sutherland_fixed_point_at_reference_temperature() {
        let consts = FlutterConstants::default();
        let mu = sutherland_viscosity(consts.t_ref, &consts).unwrap();
        assert!((mu - consts.mu_ref).abs() < 1e-20);
    }

    #[test]
    fn sutherland_at_cold_condition() {
        // Direct formula evaluation at the coldest tabulated temperature.
        let consts = FlutterConstants::default();
        let mu = sutherland_viscosity(271.95, &consts).unwrap();
        assert!(matches_sig_figs(mu, 2.1627e-7, 4), "mu = {mu:e}");
    }

    #[test]
    fn sutherland_increases_above_reference() {
        let consts = FlutterConstants::default();
        let mu = sutherland_viscosity(2.0 * consts.t_ref, &consts).unwrap();
        assert!(mu > consts.mu_ref);
    }

    #[test]
    fn flow_condition_examples() {
        let consts = FlutterConstants::default();
        for (row, t_want, dt_want) in [
            (REFERENCE_CONDITIONS[0], 271.95, 0.19826),
            (REFERENCE_CONDITIONS[4], 534.49, 0.27794),
            (REFERENCE_CONDITIONS[8], 390.33, 0.23752),
        ] {
            let fc = compute_flow_condition(row.mach, row.q_inf, row.density(), &consts).unwrap();
            assert!(matches_sig_figs(fc.u_inf, row.u_inf, 4));
            assert!(matches_sig_figs(fc.temperature, t_want, 4), "T = {}", fc.temperature);
            assert!(matches_sig_figs(fc.dt_nondim, dt_want, 4), "dt = {}", fc.dt_nondim);
        }
    }

    #[test]
    fn internal_consistency_invariants() {
        let consts = FlutterConstants::default();
        let row = REFERENCE_CONDITIONS[3];
        let fc = compute_flow_condition(row.mach, row.q_inf, row.density(), &consts).unwrap();
        assert!(((fc.u_inf - fc.mach * fc.sound_speed) / fc.u_inf).abs() < 1e-12);
        let re = fc.rho * fc.u_inf * consts.length / fc.viscosity;
        assert!(((fc.reynolds - re) / re).abs() < 1e-12);
        // dt_dim * N * f_char == 1 exactly by construction.
        assert_eq!(fc.dt_dim * consts.steps_per_period * consts.f_char, 1.0);
    }

    #[test]
    fn scaling_density_and_pressure_together_scales_only_reynolds() {
        let consts = FlutterConstants::default();
        let base = compute_flow_condition(0.9, 50.0, 1.9e-4, &consts).unwrap();
        let c2 = 4.0;
        let scaled = compute_flow_condition(0.9, c2 * 50.0, c2 * 1.9e-4, &consts).unwrap();
        assert!((scaled.u_inf - base.u_inf).abs() < 1e-12);
        assert!((scaled.temperature - base.temperature).abs() < 1e-12);
        assert!((scaled.viscosity - base.viscosity).abs() < 1e-22);
        assert!((scaled.dt_nondim - base.dt_nondim).abs() < 1e-12);
        assert!(((scaled.reynolds - c2 * base.reynolds) / base.reynolds).abs() < 1e-10);
    }

    #[test]
    fn nonpositive_inputs_are_domain_errors() {
        let consts = FlutterConstants::default();
        assert!(compute_flow_condition(0.0, 50.0, 1e-4, &consts).is_err());
        assert!(compute_flow_condition(0.9, -1.0, 1e-4, &consts).is_err());
        assert!(compute_flow_condition(0.9, 50.0, 0.0, &consts).is_err());
        assert!(sutherland_viscosity(-5.0, &consts).is_err());
    }
}
